#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dira/augment.hpp"
#include "dira/checkpoint.hpp"
#include "dira/networks.hpp"
#include "dira/objectives.hpp"
#include "dira/optim.hpp"
#include "dira/rng.hpp"

namespace dira::pre {

using Real = float;
using nn::Tensor;
using nn::Var;

enum class Method { moco, simsiam, barlow, classwise };
enum class Ablation { di, dir, dira };

std::string to_string(Method m);
Method method_from_string(const std::string& name);
std::string to_string(Ablation a);
Ablation ablation_from_string(const std::string& name);

struct Toggles {
  bool res = true;
  bool adv = true;
};
Toggles toggles_for(Ablation a);

struct ModelConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t d_y = 128;
  std::size_t d_z = 32;
  std::size_t proj_hidden = 128;
  std::size_t pred_hidden = 32;
  bool projector_bn_last = false;  // SimSiam only; BN on the output masks collapse at this scale
  std::size_t adversary_channels = 16;

  net::EncoderSpec encoder_spec(std::size_t input_size) const;
};

struct MethodConfig {
  Method name = Method::moco;
  Ablation ablation = Ablation::dira;
  double temperature = 0.2;
  std::size_t queue_size = 4096;
  double momentum = 0.99;
  double lambda_bt = 0.005;
  bool stop_gradient = true;
  bool saturating_generator = false;
};

struct ScheduleConfig {
  std::size_t stage1_epochs = 20;
  std::size_t stage2_epochs = 40;
  std::size_t stage3_epochs = 140;
  std::size_t batch_size = 32;
  std::size_t max_steps_per_epoch = 0;  // 0: one full pass over the training split
  double val_fraction = 0.1;
  bool record_wall_time = true;
  std::size_t divergence_patience = 5;

  std::size_t total_epochs() const { return stage1_epochs + stage2_epochs + stage3_epochs; }
  // Stage (1, 2 or 3) of a 0-based epoch index.
  int stage_of(std::size_t epoch) const;
  int final_stage() const;
};

struct OptimizersConfig {
  optim::OptimizerConfig theta{optim::Family::adam, 1e-3, 0.9, 0.9, 0.999, 1e-8, 0.0};
  optim::OptimizerConfig adversary{optim::Family::adam, 2e-4, 0.9, 0.5, 0.999, 1e-8, 0.0};
};

struct ExperimentConfig {
  std::string dataset_path;
  aug::AugmentationConfig augment;
  ModelConfig model;
  MethodConfig method;
  loss::LossWeights lambdas;
  ScheduleConfig schedule;
  OptimizersConfig optimizers;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
// Strict: unknown sections or keys raise ConfigError; missing ones keep defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig read_experiment_config(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const MethodConfig& c);
MethodConfig method_config_from_json(const nlohmann::json& j);

// Every network of one pretraining run. θ: encoder, decoder and heads; ξ: the
// momentum twins (MoCo only, otherwise the online networks are shared); φ: the
// adversary.
struct DiraModel {
  DiraModel() = default;
  DiraModel(const ModelConfig& model, const MethodConfig& method, std::size_t input_size, std::size_t n_classes,
            std::uint64_t seed);

  ModelConfig model_config;
  MethodConfig method_config;
  std::size_t input_size = 0;
  std::size_t n_classes = 0;

  net::Encoder<Real> encoder;
  net::Decoder<Real> decoder;
  net::Head<Real> projector;
  net::Head<Real> predictor;   // simsiam
  net::Head<Real> classifier;  // classwise
  net::Encoder<Real> twin_encoder;
  net::Head<Real> twin_projector;
  net::TwinCoupling coupling;
  net::Adversary<Real> adversary;
  loss::NegativeQueue<Real> queue;

  net::ParamList<Real> theta() const;
  net::ParamList<Real> xi() const;
  net::ParamList<Real> phi() const;
  // Embedding watched by the collapse diagnostics. Projector batch norms use the
  // statistics of `images` itself, so pass the whole evaluated set at once.
  Tensor<Real> diagnostic_embedding(const Tensor<Real>& images) const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  int stage = 0;
  double loss_dis = 0, loss_res = 0, loss_adv_gen = 0, loss_adv_disc = 0, loss_total = 0;
  double val_loss = 0, per_dim_std = 0, effective_rank = 0, wall_seconds = 0;
};

nlohmann::json to_json(const EpochMetrics& m);
EpochMetrics epoch_metrics_from_json(const nlohmann::json& j);
std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

struct TrainState {
  ExperimentConfig config;
  DiraModel model;
  optim::Optimizer<Real> opt_theta;
  optim::Optimizer<Real> opt_phi;
  Rng rng;
  std::size_t epoch = 0;  // completed epochs
  int stage = 1;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t low_disc_streak = 0;
  std::vector<EpochMetrics> history;
};

TrainState make_train_state(const ExperimentConfig& config, std::size_t input_size, std::size_t n_classes);

// One batch of prepared views: NCHW tensors plus pseudo-class labels (classwise only).
struct Batch {
  Tensor<Real> view1, view2, target1;
  std::vector<std::size_t> labels;
};
Batch make_batch(std::span<const aug::ViewPair> pairs, std::vector<std::size_t> labels = {});

// One optimization step on θ and, when adversarial learning is on, one on φ.
loss::LossBundle train_step(TrainState& state, const Batch& batch, Method method, Toggles toggles);

// Weighted composite loss on a batch without updating anything.
loss::LossBundle evaluate_batch(const DiraModel& model, const Batch& batch, const loss::LossWeights& weights,
                                Toggles toggles);

// Snapshot of everything needed to resume, and back.
ckpt::Checkpoint to_checkpoint(TrainState& state);
void restore_from_checkpoint(TrainState& state, const ckpt::Checkpoint& c);

struct Diagnostics {
  double per_dim_std = 0.0;
  double effective_rank = 0.0;
};
// Rows are L2-normalized first. per_dim_std: mean over dimensions of the
// population std; effective_rank: exp(entropy of normalized singular values).
Diagnostics collapse_diagnostics(const Tensor<double>& embeddings);
Diagnostics collapse_diagnostics(const Tensor<Real>& embeddings);

struct RunOptions {
  bool resume = false;
  std::optional<std::size_t> stop_after_epoch;  // stop once this many epochs are complete
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct PretrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  std::vector<EpochMetrics> history;
  Diagnostics initial;
};

// Writes config.json, metrics.csv, summary.json and checkpoints/{best,last} under out_dir.
PretrainResult run_pretraining(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                               const RunOptions& options = {});

// Copies checkpoint arrays into parameters whose names start with one of
// `prefixes`. Throws IncompatibilityError listing every missing or mis-shaped array.
void load_params(const net::ParamList<Real>& params, const std::map<std::string, Tensor<Real>>& arrays,
                 const std::vector<std::string>& prefixes);

}  // namespace dira::pre
