#include "dira/transfer.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <numeric>

#include "dira/checkpoint.hpp"
#include "dira/errors.hpp"

namespace dira::xfer {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(TaskKind k) { return k == TaskKind::classification ? "classification" : "segmentation"; }

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "classification") return TaskKind::classification;
  if (name == "segmentation") return TaskKind::segmentation;
  throw ConfigError("unknown task '" + name + "' (expected classification or segmentation)");
}

std::string to_string(Metric m) {
  switch (m) {
    case Metric::auc: return "auc";
    case Metric::dice: return "dice";
    case Metric::iou: return "iou";
  }
  return "?";
}

Metric metric_from_string(const std::string& name) {
  for (Metric m : {Metric::auc, Metric::dice, Metric::iou})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown metric '" + name + "' (expected auc, dice or iou)");
}

Metric DownstreamTask::effective_metric() const {
  if (metric) return *metric;
  return kind == TaskKind::classification ? Metric::auc : Metric::dice;
}

optim::OptimizerConfig DownstreamTask::effective_optimizer() const {
  if (optimizer) return *optimizer;
  optim::OptimizerConfig c;
  c.family = optim::Family::adam;
  c.lr = kind == TaskKind::classification ? 2e-4 : 1e-3;
  return c;
}

void DownstreamTask::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ParameterError("test_fraction must be in (0, 1)");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ParameterError("val_fraction must be in (0, 1)");
  if (!(label_split.fraction > 0.0 && label_split.fraction <= 1.0)) throw ParameterError("fraction must be in (0, 1]");
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  const Metric m = effective_metric();
  if ((kind == TaskKind::classification) != (m == Metric::auc)) {
    throw ConfigError("metric " + to_string(m) + " does not fit a " + to_string(kind) + " task");
  }
  effective_optimizer().validate();
}

// ---------------------------------------------------------------- model

net::ParamList<Real> TaskModel::params() const {
  net::ParamList<Real> out;
  encoder.collect("encoder", out);
  if (kind == TaskKind::segmentation) {
    decoder.collect("decoder", out);
  } else {
    classifier.collect("classifier", out);
  }
  return out;
}

Var<Real> TaskModel::logits(const Var<Real>& images) const {
  const auto e = encoder(images);
  if (kind == TaskKind::segmentation) return decoder.logits(e.final_map, e.skips);
  return nn::reshape(classifier(e.y), {images.dim(0)});
}

TaskModel init_from_checkpoint(const std::optional<fs::path>& checkpoint, TaskKind kind,
                               const pre::ModelConfig& random_config, std::size_t random_input_size,
                               std::uint64_t seed) {
  TaskModel m;
  m.kind = kind;
  m.model_config = random_config;
  m.input_size = random_input_size;
  m.source = "random";
  std::optional<ckpt::Checkpoint> c;
  if (checkpoint) {
    c = ckpt::load_checkpoint(*checkpoint);
    try {
      m.model_config = pre::model_config_from_json(c->extra.at("model"));
      m.input_size = c->extra.at("input_size").get<std::size_t>();
    } catch (const json::exception& e) {
      throw IncompatibilityError("checkpoint " + checkpoint->string() + " has no model description: " + e.what());
    }
    m.source = checkpoint->string();
  }
  Rng rng(derive_seed(seed, {0x7a5c}));
  const net::EncoderSpec spec = m.model_config.encoder_spec(m.input_size);
  m.encoder = net::Encoder<Real>(spec, rng);
  if (kind == TaskKind::segmentation) {
    m.decoder = net::Decoder<Real>(spec, 1, rng);
  } else {
    m.classifier = net::Linear<Real>(m.model_config.d_y, 1, rng);
  }
  if (c) {
    std::vector<std::string> transferred{"encoder."};
    if (kind == TaskKind::segmentation) transferred.push_back("decoder.");
    pre::load_params(m.params(), c->arrays, transferred);
  }
  return m;
}

void save_task_model(const fs::path& dir, const TaskModel& model) {
  ckpt::Checkpoint c;
  for (const auto& p : model.params()) c.arrays.emplace(p.name, p.var.value());
  c.extra = {{"model", pre::to_json(model.model_config)},
             {"input_size", model.input_size},
             {"task", to_string(model.kind)},
             {"source", model.source}};
  c.config_hash = ckpt::config_hash(c.extra);
  ckpt::save_checkpoint(dir, c);
}

TaskModel load_task_model(const fs::path& dir) {
  const ckpt::Checkpoint c = ckpt::load_checkpoint(dir);
  TaskKind kind;
  try {
    kind = task_kind_from_string(c.extra.at("task").get<std::string>());
  } catch (const json::exception&) {
    throw IncompatibilityError(dir.string() + " is not a fine-tuned task model");
  }
  TaskModel m = init_from_checkpoint(dir, kind, {}, 0, 0);
  pre::load_params(m.params(), c.arrays, {""});
  m.source = c.extra.value("source", dir.string());
  return m;
}

// ---------------------------------------------------------------- metrics

double metric_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        pos_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw UndefinedMetricError("AUC needs both positive and negative labels");
  const double p = static_cast<double>(n_pos), q = static_cast<double>(n_neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

namespace {

void overlap_counts(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, std::size_t& inter,
                    std::size_t& a, std::size_t& b) {
  if (pred.size() != gt.size()) throw ShapeError("masks differ in size");
  inter = a = b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    a += p;
    b += g;
    inter += p && g;
  }
}

}  // namespace

double metric_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  std::size_t inter, a, b;
  overlap_counts(pred, gt, inter, a, b);
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

double metric_iou_mask(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  std::size_t inter, a, b;
  overlap_counts(pred, gt, inter, a, b);
  const std::size_t uni = a + b - inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------- data

namespace {

struct Prepared {
  std::vector<Image> images;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<int> labels;
};

Prepared prepare(const data::Dataset& ds, std::size_t size) {
  Prepared p;
  for (const auto& s : ds.samples) {
    if (s.image.height == size && s.image.width == size) {
      p.images.push_back(s.image);
      p.masks.push_back(s.mask);
    } else {
      p.images.push_back(resize_bilinear(s.image, size, size));
      Image m(s.image.height, s.image.width);
      for (std::size_t i = 0; i < s.mask.size(); ++i) m.pixels[i] = s.mask[i] ? 1.0 : 0.0;
      const Image r = resize_bilinear(m, size, size);
      std::vector<std::uint8_t> mask(size * size);
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = r.pixels[i] >= 0.5;
      p.masks.push_back(std::move(mask));
    }
    p.labels.push_back(s.meta.lesion_present ? 1 : 0);
  }
  return p;
}

Tensor<Real> images_of(const Prepared& p, std::span<const std::size_t> idx) {
  std::vector<Image> imgs;
  for (std::size_t i : idx) imgs.push_back(p.images[i]);
  return to_batch<Real>(imgs);
}

Tensor<Real> targets_of(const Prepared& p, std::span<const std::size_t> idx, TaskKind kind, std::size_t size) {
  if (kind == TaskKind::classification) {
    Tensor<Real> t({idx.size()});
    for (std::size_t k = 0; k < idx.size(); ++k) t[k] = static_cast<Real>(p.labels[idx[k]]);
    return t;
  }
  Tensor<Real> t({idx.size(), 1, size, size});
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t i = 0; i < size * size; ++i) t[k * size * size + i] = p.masks[idx[k]][i] ? Real(1) : Real(0);
  return t;
}

double evaluate_prepared(const TaskModel& model, const Prepared& p, std::span<const std::size_t> indices,
                         Metric metric) {
  if (indices.empty()) throw PreconditionError("nothing to evaluate");
  const std::size_t size = model.input_size, chunk = 64;
  std::vector<double> scores;
  std::vector<int> labels;
  double per_image_sum = 0.0;
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const auto idx = indices.subspan(start, std::min(chunk, indices.size() - start));
    const Tensor<Real> logits = model.logits(Var<Real>(images_of(p, idx))).value();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (model.kind == TaskKind::classification) {
        scores.push_back(logits[k]);
        labels.push_back(p.labels[idx[k]]);
        continue;
      }
      std::vector<std::uint8_t> pred(size * size);
      for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = logits[k * size * size + i] >= Real(0);
      per_image_sum += metric == Metric::iou ? metric_iou_mask(pred, p.masks[idx[k]]) : metric_dice(pred, p.masks[idx[k]]);
    }
  }
  if (model.kind == TaskKind::classification) {
    if (metric != Metric::auc) throw ConfigError("classification models are scored with auc");
    return metric_auc(scores, labels);
  }
  if (metric == Metric::auc) throw ConfigError("segmentation models are scored with dice or iou");
  return per_image_sum / static_cast<double>(indices.size());
}

// Segmentation adds a soft Dice term: with small lesions, BCE alone often settles
// on all-background masks before early stopping gives it a chance to recover.
// Lesion-free images are left to BCE: a per-image Dice term on them would only
// reward empty masks.
Var<Real> task_loss(TaskKind kind, const Var<Real>& logits, const Tensor<Real>& targets) {
  const Var<Real> bce = nn::bce_with_logits(logits, targets);
  if (kind == TaskKind::classification) return bce;
  return nn::add(bce, nn::soft_dice_loss(logits, targets, Real(1), true));
}

double mean_loss(const TaskModel& model, const Prepared& p, std::span<const std::size_t> idx) {
  const Var<Real> logits = model.logits(Var<Real>(images_of(p, idx)));
  return task_loss(model.kind, logits.detach(), targets_of(p, idx, model.kind, model.input_size)).item();
}

void shuffle(std::vector<std::size_t>& v, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

}  // namespace

double evaluate(const TaskModel& model, const data::Dataset& ds, std::span<const std::size_t> indices, Metric metric) {
  return evaluate_prepared(model, prepare(ds, model.input_size), indices, metric);
}

Splits make_splits(const data::Dataset& ds, const DownstreamTask& task) {
  task.validate();
  const auto& records = ds.manifest.records;
  if (records.size() < 4) throw PreconditionError("downstream dataset needs at least four images");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index[records[i].image_id] = i;

  const auto test_ids = data::split_label_fraction(records, {task.test_fraction, task.test_seed, data::Stratify::lesion_present});
  Splits s;
  std::vector<bool> is_test(records.size(), false);
  for (const auto& id : test_ids) {
    s.test.push_back(index.at(id));
    is_test[index.at(id)] = true;
  }
  std::vector<data::RecordMeta> pool;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (!is_test[i]) pool.push_back(records[i]);
  if (pool.empty()) throw PreconditionError("no training images left after the test split");
  for (const auto& id : data::split_label_fraction(pool, task.label_split)) s.labeled.push_back(index.at(id));

  const auto positives = std::count_if(s.labeled.begin(), s.labeled.end(),
                                       [&](std::size_t i) { return records[i].lesion_present; });
  if (positives == 0) {
    throw StratificationError("label fraction " + std::to_string(task.label_split.fraction) +
                              " leaves no lesion-positive training images");
  }
  if (s.labeled.size() < 2) throw StratificationError("label fraction leaves fewer than two training images");
  return s;
}

// ---------------------------------------------------------------- fine-tuning

void FineTuneResult::recompute() {
  const double n = static_cast<double>(runs.size());
  mean = runs.empty() ? 0.0 : std::accumulate(runs.begin(), runs.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : runs) ss += (r - mean) * (r - mean);
  std = runs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
}

json to_json(const FineTuneResult& r) {
  return {{"task", r.task}, {"method", r.method}, {"checkpoint", r.checkpoint}, {"fraction", r.fraction},
          {"metric", r.metric}, {"runs", r.runs}, {"mean", r.mean}, {"std", r.std}};
}

FineTuneResult finetune(const DownstreamTask& task, const FineTuneOptions& options) {
  task.validate();
  if (options.runs == 0) throw ParameterError("runs must be positive");
  const data::Dataset ds = data::load_dataset(task.dataset_path);
  const Splits splits = make_splits(ds, task);
  const Metric metric = task.effective_metric();

  FineTuneResult result;
  result.task = to_string(task.kind);
  result.fraction = task.label_split.fraction;
  result.metric = to_string(metric);
  result.checkpoint = options.checkpoint ? options.checkpoint->string() : "random";
  result.method = options.method_label;
  if (result.method.empty()) {
    result.method = "random";
    if (options.checkpoint) {
      const ckpt::Checkpoint c = ckpt::load_checkpoint(*options.checkpoint);
      if (c.extra.contains("method")) {
        const pre::MethodConfig mc = pre::method_config_from_json(c.extra.at("method"));
        result.method = pre::to_string(mc.name) + "-" + pre::to_string(mc.ablation);
      } else {
        result.method = "checkpoint";
      }
    }
  }

  std::optional<Prepared> prepared;
  for (std::size_t run = 0; run < options.runs; ++run) {
    const std::uint64_t seed = options.seed + run;
    TaskModel model = init_from_checkpoint(options.checkpoint, task.kind, options.random_config,
                                           options.random_input_size, seed);
    if (!prepared) prepared = prepare(ds, model.input_size);
    const Prepared& p = *prepared;

    std::vector<std::size_t> labeled = splits.labeled;
    shuffle(labeled, derive_seed(seed, {0x7a1}));
    std::size_t n_val = static_cast<std::size_t>(std::llround(task.val_fraction * static_cast<double>(labeled.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, labeled.size() - 1);
    const std::vector<std::size_t> val(labeled.begin(), labeled.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(labeled.begin() + static_cast<std::ptrdiff_t>(n_val), labeled.end());

    const net::ParamList<Real> params = model.params();
    optim::Optimizer<Real> opt(task.effective_optimizer(), params);
    double best = mean_loss(model, p, val);
    std::vector<Tensor<Real>> best_values;
    for (const auto& q : params) best_values.push_back(q.var.value());
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < task.max_epochs && since_best < task.patience; ++epoch) {
      shuffle(train, derive_seed(seed, {epoch, 0xe9}));
      for (std::size_t start = 0; start < train.size(); start += task.batch_size) {
        const auto idx = std::span(train).subspan(start, std::min(task.batch_size, train.size() - start));
        opt.zero_grad();
        const Var<Real> l = task_loss(task.kind, model.logits(Var<Real>(images_of(p, idx))),
                                      targets_of(p, idx, task.kind, model.input_size));
        if (!std::isfinite(l.item())) {
          throw DivergenceError("fine-tuning run " + std::to_string(run) + " diverged at epoch " +
                                std::to_string(epoch + 1));
        }
        l.backward();
        opt.step();
      }
      const double v = mean_loss(model, p, val);
      if (v < best) {
        best = v;
        since_best = 0;
        for (std::size_t i = 0; i < params.size(); ++i) best_values[i] = params[i].var.value();
      } else {
        ++since_best;
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) const_cast<Var<Real>&>(params[i].var).mutable_value() = best_values[i];
    result.runs.push_back(evaluate_prepared(model, p, splits.test, metric));
    if (run == 0 && options.save_model) save_task_model(*options.save_model, model);
  }
  result.recompute();
  return result;
}

// ---------------------------------------------------------------- ledger

std::string ledger_header() { return "task,method,checkpoint,fraction,metric,n_runs,mean,std,runs"; }

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

void append_ledger(const fs::path& ledger, const FineTuneResult& r) {
  if (ledger.has_parent_path()) fs::create_directories(ledger.parent_path());
  std::string runs;
  for (std::size_t i = 0; i < r.runs.size(); ++i) runs += (i ? ";" : "") + fmt(r.runs[i]);
  const std::string row = csv_field(r.task) + "," + csv_field(r.method) + "," + csv_field(r.checkpoint) + "," +
                          fmt(r.fraction) + "," + csv_field(r.metric) + "," + std::to_string(r.runs.size()) + "," +
                          fmt(r.mean) + "," + fmt(r.std) + "," + runs + "\n";

  const int fd = ::open(ledger.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw StorageError("cannot open ledger " + ledger.string());
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw StorageError("cannot lock ledger " + ledger.string());
  }
  struct stat st {};
  ::fstat(fd, &st);
  std::string text = st.st_size == 0 ? ledger_header() + "\n" + row : row;
  const bool ok = ::write(fd, text.data(), text.size()) == static_cast<ssize_t>(text.size());
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (!ok) throw StorageError("failed appending to ledger " + ledger.string());
}

}  // namespace dira::xfer
