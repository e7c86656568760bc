#include "dira/optim.hpp"

#include <cmath>

#include "dira/errors.hpp"

namespace dira::optim {

using nlohmann::json;

std::string to_string(Family f) { return f == Family::adam ? "adam" : "sgd_momentum"; }

Family family_from_string(const std::string& name) {
  if (name == "adam") return Family::adam;
  if (name == "sgd_momentum") return Family::sgd_momentum;
  throw ConfigError("unknown optimizer family '" + name + "'");
}

void OptimizerConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError("momentum must be in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ParameterError("betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ParameterError("eps must be positive");
  if (weight_decay < 0.0) throw ParameterError("weight_decay must be non-negative");
}

json to_json(const OptimizerConfig& c) {
  return {{"family", to_string(c.family)}, {"lr", c.lr},     {"momentum", c.momentum},         {"beta1", c.beta1},
          {"beta2", c.beta2},              {"eps", c.eps},   {"weight_decay", c.weight_decay}};
}

OptimizerConfig optimizer_config_from_json(const json& j, const OptimizerConfig& defaults) {
  if (!j.is_object()) throw ConfigError("optimizer config must be an object");
  OptimizerConfig c = defaults;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "family") c.family = family_from_string(value.get<std::string>());
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "momentum") c.momentum = value.get<double>();
      else if (key == "beta1") c.beta1 = value.get<double>();
      else if (key == "beta2") c.beta2 = value.get<double>();
      else if (key == "eps") c.eps = value.get<double>();
      else if (key == "weight_decay") c.weight_decay = value.get<double>();
      else throw ConfigError("unknown optimizer key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("optimizer." + key + ": " + e.what());
    }
  }
  return c;
}

template <class T>
Optimizer<T>::Optimizer(const OptimizerConfig& config, const net::ParamList<T>& params) : config_(config) {
  config_.validate();
  for (const auto& p : params) {
    if (!p.trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p.var.shape());
    if (config_.family == Family::adam) v_.emplace_back(p.var.shape());
  }
  steps_.assign(params_.size(), 0);
}

template <class T>
void Optimizer<T>::zero_grad() {
  net::zero_grads(params_);
}

template <class T>
void Optimizer<T>::step() {
  const T lr = static_cast<T>(config_.lr), wd = static_cast<T>(config_.weight_decay);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto var = params_[i].var;
    if (!var.has_grad()) continue;
    const auto& g = var.grad();
    auto& w = var.mutable_value();
    auto& m = m_[i];
    ++steps_[i];
    if (config_.family == Family::sgd_momentum) {
      const T mu = static_cast<T>(config_.momentum);
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = mu * m[k] + g[k] + wd * w[k];
        w[k] -= lr * m[k];
      }
    } else {
      auto& v = v_[i];
      const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
      const T eps = static_cast<T>(config_.eps);
      const double t = static_cast<double>(steps_[i]);
      const T c1 = static_cast<T>(1.0 - std::pow(config_.beta1, t));
      const T c2 = static_cast<T>(1.0 - std::pow(config_.beta2, t));
      for (std::size_t k = 0; k < w.size(); ++k) {
        const T gk = g[k] + wd * w[k];
        m[k] = b1 * m[k] + (T(1) - b1) * gk;
        v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      }
    }
  }
}

template <class T>
std::vector<std::pair<std::string, nn::Tensor<T>*>> Optimizer<T>::state_arrays() {
  std::vector<std::pair<std::string, nn::Tensor<T>*>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("m." + params_[i].name, &m_[i]);
    if (!v_.empty()) out.emplace_back("v." + params_[i].name, &v_[i]);
  }
  return out;
}

template class Optimizer<float>;
template class Optimizer<double>;

}  // namespace dira::optim
