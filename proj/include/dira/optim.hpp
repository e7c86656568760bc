#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "dira/networks.hpp"

namespace dira::optim {

enum class Family { sgd_momentum, adam };

std::string to_string(Family f);
Family family_from_string(const std::string& name);

struct OptimizerConfig {
  Family family = Family::adam;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd_momentum only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const;
};

nlohmann::json to_json(const OptimizerConfig& c);
OptimizerConfig optimizer_config_from_json(const nlohmann::json& j, const OptimizerConfig& defaults);

// Updates the trainable entries of a parameter list in place. A parameter
// that received no gradient since the last zero_grad() is skipped entirely,
// so its moments and step count stay untouched as well.
template <class T>
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(const OptimizerConfig& config, const net::ParamList<T>& params);

  void step();
  void zero_grad();

  const OptimizerConfig& config() const { return config_; }
  const net::ParamList<T>& params() const { return params_; }

  // Named state arrays (moments) for checkpointing, and per-parameter step counts.
  std::vector<std::pair<std::string, nn::Tensor<T>*>> state_arrays();
  std::vector<std::uint64_t>& step_counts() { return steps_; }

 private:
  OptimizerConfig config_;
  net::ParamList<T> params_;
  std::vector<nn::Tensor<T>> m_, v_;
  std::vector<std::uint64_t> steps_;
};

}  // namespace dira::optim
