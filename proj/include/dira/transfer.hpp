#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dira/datasets.hpp"
#include "dira/networks.hpp"
#include "dira/optim.hpp"
#include "dira/pretrain.hpp"

namespace dira::xfer {

using pre::Real;
using nn::Tensor;
using nn::Var;

enum class TaskKind { classification, segmentation };
enum class Metric { auc, dice, iou };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& name);
std::string to_string(Metric m);
Metric metric_from_string(const std::string& name);

struct DownstreamTask {
  TaskKind kind = TaskKind::segmentation;
  std::string dataset_path;
  data::SplitSpec label_split;   // label fraction of the training pool
  double test_fraction = 0.2;    // held-out test split, fixed by test_seed
  std::uint64_t test_seed = 0;
  double val_fraction = 0.1;     // of the labeled ids, per run
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::size_t batch_size = 16;
  std::optional<optim::OptimizerConfig> optimizer;  // default depends on kind
  std::optional<Metric> metric;                     // auc for classification, dice for segmentation

  Metric effective_metric() const;
  optim::OptimizerConfig effective_optimizer() const;
  void validate() const;
};

// Encoder plus a task head. Classification: one lesion-present logit from the
// pooled feature. Segmentation: the U-Net decoder's per-pixel logit.
struct TaskModel {
  TaskKind kind = TaskKind::segmentation;
  pre::ModelConfig model_config;
  std::size_t input_size = 0;
  net::Encoder<Real> encoder;
  net::Decoder<Real> decoder;
  net::Linear<Real> classifier;
  std::string source;  // checkpoint path or "random"

  net::ParamList<Real> params() const;
  // [B] for classification, [B, 1, H, W] for segmentation.
  Var<Real> logits(const Var<Real>& images) const;
};

// Transfers the encoder (and the decoder for segmentation) from a pretraining
// checkpoint; every other parameter is freshly initialized from `seed`. With no
// checkpoint the whole model is random (the "Random" baseline).
TaskModel init_from_checkpoint(const std::optional<std::filesystem::path>& checkpoint, TaskKind kind,
                               const pre::ModelConfig& random_config, std::size_t random_input_size,
                               std::uint64_t seed);

void save_task_model(const std::filesystem::path& dir, const TaskModel& model);
TaskModel load_task_model(const std::filesystem::path& dir);

// Rank-based AUC, ties count one half.
double metric_auc(std::span<const double> scores, std::span<const int> labels);
// Both-empty masks score 1.
double metric_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double metric_iou_mask(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

struct Splits {
  std::vector<std::size_t> test;     // indices into the dataset
  std::vector<std::size_t> labeled;  // label-fraction subset of the training pool
};
Splits make_splits(const data::Dataset& ds, const DownstreamTask& task);

// Metric of `model` over the given dataset indices.
double evaluate(const TaskModel& model, const data::Dataset& ds, std::span<const std::size_t> indices, Metric metric);

struct FineTuneResult {
  std::string task;
  std::string method;
  std::string checkpoint;
  double fraction = 1.0;
  std::string metric;
  std::vector<double> runs;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single run

  void recompute();
};

nlohmann::json to_json(const FineTuneResult& r);

struct FineTuneOptions {
  std::size_t runs = 10;
  std::uint64_t seed = 0;  // run r uses seed + r
  std::optional<std::filesystem::path> checkpoint;
  pre::ModelConfig random_config;       // architecture for the random baseline
  std::size_t random_input_size = 32;
  std::string method_label;             // defaults to method-ablation of the checkpoint, or "random"
  std::optional<std::filesystem::path> save_model;  // stores the run-0 model
};

FineTuneResult finetune(const DownstreamTask& task, const FineTuneOptions& options);

// Appends one row under an advisory lock, writing the header on first use.
void append_ledger(const std::filesystem::path& ledger, const FineTuneResult& r);
std::string ledger_header();

}  // namespace dira::xfer
