#include "dira/pretrain.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "dira/datasets.hpp"
#include "dira/errors.hpp"
#include "dira/json_util.hpp"

namespace dira::pre {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- enums

std::string to_string(Method m) {
  switch (m) {
    case Method::moco: return "moco";
    case Method::simsiam: return "simsiam";
    case Method::barlow: return "barlow";
    case Method::classwise: return "classwise";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  for (Method m : {Method::moco, Method::simsiam, Method::barlow, Method::classwise})
    if (to_string(m) == name) return m;
  throw ConfigError("unknown method '" + name + "' (expected moco, simsiam, barlow or classwise)");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::di: return "di";
    case Ablation::dir: return "dir";
    case Ablation::dira: return "dira";
  }
  return "?";
}

Ablation ablation_from_string(const std::string& name) {
  for (Ablation a : {Ablation::di, Ablation::dir, Ablation::dira})
    if (to_string(a) == name) return a;
  throw ConfigError("unknown ablation '" + name + "' (expected di, dir or dira)");
}

Toggles toggles_for(Ablation a) {
  switch (a) {
    case Ablation::di: return {false, false};
    case Ablation::dir: return {true, false};
    case Ablation::dira: return {true, true};
  }
  return {};
}

// ---------------------------------------------------------------- config

net::EncoderSpec ModelConfig::encoder_spec(std::size_t input_size) const {
  net::EncoderSpec s;
  s.input_size = input_size;
  s.in_channels = 1;
  s.stage_channels = stage_channels;
  s.d_y = d_y;
  return s;
}

int ScheduleConfig::stage_of(std::size_t epoch) const {
  if (epoch < stage1_epochs) return 1;
  if (epoch < stage1_epochs + stage2_epochs) return 2;
  return 3;
}

int ScheduleConfig::final_stage() const {
  if (stage3_epochs > 0) return 3;
  if (stage2_epochs > 0) return 2;
  return 1;
}

void ExperimentConfig::validate() const {
  augment.validate();
  model.encoder_spec(augment.output_size).validate();
  if (model.d_z < 2) throw ParameterError("model.d_z must be >= 2");
  if (model.proj_hidden == 0 || model.pred_hidden == 0 || model.adversary_channels == 0) {
    throw ParameterError("model widths must be positive");
  }
  if (!(method.temperature > 0.0)) throw ParameterError("method.temperature must be positive");
  if (method.queue_size == 0) throw ParameterError("method.queue_size must be positive");
  if (!(method.momentum >= 0.0 && method.momentum <= 1.0)) throw ParameterError("method.momentum must be in [0, 1]");
  if (method.lambda_bt < 0.0) throw ParameterError("method.lambda_bt must be non-negative");
  if (lambdas.dis < 0.0 || lambdas.res < 0.0 || lambdas.adv < 0.0) throw ParameterError("lambdas must be non-negative");
  if (schedule.batch_size < 2) throw ParameterError("schedule.batch_size must be >= 2");
  if (!(schedule.val_fraction > 0.0 && schedule.val_fraction < 1.0)) {
    throw ParameterError("schedule.val_fraction must be in (0, 1)");
  }
  optimizers.theta.validate();
  optimizers.adversary.validate();
}

json to_json(const ModelConfig& c) {
  return {{"stage_channels", c.stage_channels}, {"d_y", c.d_y},
          {"d_z", c.d_z},                       {"proj_hidden", c.proj_hidden},
          {"pred_hidden", c.pred_hidden},       {"projector_bn_last", c.projector_bn_last},
          {"adversary_channels", c.adversary_channels}};
}

ModelConfig model_config_from_json(const json& j) {
  require_keys(j, {"stage_channels", "d_y", "d_z", "proj_hidden", "pred_hidden", "projector_bn_last", "adversary_channels"},
               "model");
  ModelConfig c;
  read_opt(j, "stage_channels", c.stage_channels, "model");
  read_opt(j, "d_y", c.d_y, "model");
  read_opt(j, "d_z", c.d_z, "model");
  read_opt(j, "proj_hidden", c.proj_hidden, "model");
  read_opt(j, "pred_hidden", c.pred_hidden, "model");
  read_opt(j, "projector_bn_last", c.projector_bn_last, "model");
  read_opt(j, "adversary_channels", c.adversary_channels, "model");
  return c;
}

json to_json(const MethodConfig& c) {
  return {{"name", to_string(c.name)},
          {"ablation", to_string(c.ablation)},
          {"temperature", c.temperature},
          {"queue_size", c.queue_size},
          {"momentum", c.momentum},
          {"lambda_bt", c.lambda_bt},
          {"stop_gradient", c.stop_gradient},
          {"saturating_generator", c.saturating_generator}};
}

MethodConfig method_config_from_json(const json& j) {
  require_keys(j,
               {"name", "ablation", "temperature", "queue_size", "momentum", "lambda_bt", "stop_gradient",
                "saturating_generator"},
               "method");
  MethodConfig c;
  std::string name = to_string(c.name), ablation = to_string(c.ablation);
  read_opt(j, "name", name, "method");
  read_opt(j, "ablation", ablation, "method");
  c.name = method_from_string(name);
  c.ablation = ablation_from_string(ablation);
  read_opt(j, "temperature", c.temperature, "method");
  read_opt(j, "queue_size", c.queue_size, "method");
  read_opt(j, "momentum", c.momentum, "method");
  read_opt(j, "lambda_bt", c.lambda_bt, "method");
  read_opt(j, "stop_gradient", c.stop_gradient, "method");
  read_opt(j, "saturating_generator", c.saturating_generator, "method");
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {
      {"dataset", {{"path", c.dataset_path}}},
      {"augment", aug::to_json(c.augment)},
      {"model", to_json(c.model)},
      {"method", to_json(c.method)},
      {"lambdas", {{"dis", c.lambdas.dis}, {"res", c.lambdas.res}, {"adv", c.lambdas.adv}}},
      {"schedule",
       {{"stage1_epochs", c.schedule.stage1_epochs},
        {"stage2_epochs", c.schedule.stage2_epochs},
        {"stage3_epochs", c.schedule.stage3_epochs},
        {"batch_size", c.schedule.batch_size},
        {"max_steps_per_epoch", c.schedule.max_steps_per_epoch},
        {"val_fraction", c.schedule.val_fraction},
        {"record_wall_time", c.schedule.record_wall_time},
        {"divergence_patience", c.schedule.divergence_patience}}},
      {"optimizers", {{"theta", optim::to_json(c.optimizers.theta)}, {"adversary", optim::to_json(c.optimizers.adversary)}}},
      {"seed", c.seed},
  };
}

ExperimentConfig experiment_config_from_json(const json& j) {
  require_keys(j, {"dataset", "augment", "model", "method", "lambdas", "schedule", "optimizers", "seed"}, "config");
  ExperimentConfig c;
  if (j.contains("dataset")) {
    require_keys(j.at("dataset"), {"path"}, "dataset");
    read_opt(j.at("dataset"), "path", c.dataset_path, "dataset");
  }
  if (j.contains("augment")) c.augment = aug::augmentation_config_from_json(j.at("augment"));
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("method")) c.method = method_config_from_json(j.at("method"));
  if (j.contains("lambdas")) {
    const json& l = j.at("lambdas");
    require_keys(l, {"dis", "res", "adv"}, "lambdas");
    read_opt(l, "dis", c.lambdas.dis, "lambdas");
    read_opt(l, "res", c.lambdas.res, "lambdas");
    read_opt(l, "adv", c.lambdas.adv, "lambdas");
  }
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    require_keys(s,
                 {"stage1_epochs", "stage2_epochs", "stage3_epochs", "batch_size", "max_steps_per_epoch",
                  "val_fraction", "record_wall_time", "divergence_patience"},
                 "schedule");
    read_opt(s, "stage1_epochs", c.schedule.stage1_epochs, "schedule");
    read_opt(s, "stage2_epochs", c.schedule.stage2_epochs, "schedule");
    read_opt(s, "stage3_epochs", c.schedule.stage3_epochs, "schedule");
    read_opt(s, "batch_size", c.schedule.batch_size, "schedule");
    read_opt(s, "max_steps_per_epoch", c.schedule.max_steps_per_epoch, "schedule");
    read_opt(s, "val_fraction", c.schedule.val_fraction, "schedule");
    read_opt(s, "record_wall_time", c.schedule.record_wall_time, "schedule");
    read_opt(s, "divergence_patience", c.schedule.divergence_patience, "schedule");
  }
  if (j.contains("optimizers")) {
    const json& o = j.at("optimizers");
    require_keys(o, {"theta", "adversary"}, "optimizers");
    if (o.contains("theta")) c.optimizers.theta = optim::optimizer_config_from_json(o.at("theta"), c.optimizers.theta);
    if (o.contains("adversary")) {
      c.optimizers.adversary = optim::optimizer_config_from_json(o.at("adversary"), c.optimizers.adversary);
    }
  }
  read_opt(j, "seed", c.seed, "config");
  return c;
}

ExperimentConfig read_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

// ---------------------------------------------------------------- model

DiraModel::DiraModel(const ModelConfig& model, const MethodConfig& method, std::size_t input_size_,
                     std::size_t n_classes_, std::uint64_t seed)
    : model_config(model), method_config(method), input_size(input_size_), n_classes(n_classes_) {
  Rng rng(derive_seed(seed, {0x40de1}));
  const net::EncoderSpec spec = model.encoder_spec(input_size);
  encoder = net::Encoder<Real>(spec, rng);
  decoder = net::Decoder<Real>(spec, 1, rng);

  net::HeadSpec proj;
  proj.kind = net::HeadKind::projector;
  proj.in_dim = model.d_y;
  switch (method.name) {
    case Method::moco:
      proj.widths = {model.proj_hidden, model.d_z};
      projector = net::Head<Real>(proj, rng);
      break;
    case Method::simsiam: {
      proj.widths = {model.proj_hidden, model.proj_hidden, model.d_z};
      proj.batch_norm = true;
      proj.bn_last = model.projector_bn_last;
      projector = net::Head<Real>(proj, rng);
      net::HeadSpec pred;
      pred.kind = net::HeadKind::predictor;
      pred.in_dim = model.d_z;
      pred.widths = {model.pred_hidden, model.d_z};
      pred.batch_norm = true;
      predictor = net::Head<Real>(pred, rng);
      break;
    }
    case Method::barlow:
      proj.widths = {model.proj_hidden, model.proj_hidden, model.d_z};
      proj.batch_norm = true;
      projector = net::Head<Real>(proj, rng);
      break;
    case Method::classwise: {
      if (n_classes < 2) throw ConfigError("classwise method needs at least two pseudo-classes");
      net::HeadSpec cls;
      cls.kind = net::HeadKind::classifier;
      cls.in_dim = model.d_y;
      cls.widths = {model.proj_hidden, n_classes};
      classifier = net::Head<Real>(cls, rng);
      break;
    }
  }

  net::AdversarySpec adv;
  adv.base_channels = model.adversary_channels;
  adversary = net::Adversary<Real>(adv, rng);

  if (method.name == Method::moco) {
    coupling = {net::CouplingMode::momentum, method.momentum};
    twin_encoder = encoder;
    twin_encoder.make_independent(false);
    twin_projector = projector;
    twin_projector.make_independent(false);
    queue = loss::NegativeQueue<Real>(method.queue_size, model.d_z);
  } else {
    coupling = {net::CouplingMode::shared, 0.0};
  }
}

net::ParamList<Real> DiraModel::theta() const {
  net::ParamList<Real> out;
  encoder.collect("encoder", out);
  decoder.collect("decoder", out);
  switch (method_config.name) {
    case Method::simsiam:
      projector.collect("projector", out);
      predictor.collect("predictor", out);
      break;
    case Method::classwise: classifier.collect("classifier", out); break;
    default: projector.collect("projector", out); break;
  }
  return out;
}

net::ParamList<Real> DiraModel::xi() const {
  net::ParamList<Real> out;
  if (coupling.mode == net::CouplingMode::momentum) {
    twin_encoder.collect("twin_encoder", out);
    twin_projector.collect("twin_projector", out);
  }
  return out;
}

net::ParamList<Real> DiraModel::phi() const {
  net::ParamList<Real> out;
  adversary.collect("adversary", out);
  return out;
}

Tensor<Real> DiraModel::diagnostic_embedding(const Tensor<Real>& images) const {
  const Var<Real> y = encoder(Var<Real>(images)).y.detach();
  if (method_config.name == Method::classwise) return y.value();
  // Batch statistics over the evaluated set; the running buffers are put back untouched.
  net::ParamList<Real> buffers;
  projector.collect("projector", buffers);
  std::vector<Tensor<Real>> saved;
  for (const auto& b : buffers) saved.push_back(b.var.value());
  Tensor<Real> z = projector(y, net::Mode::train).value();
  for (std::size_t i = 0; i < buffers.size(); ++i) const_cast<Var<Real>&>(buffers[i].var).mutable_value() = saved[i];
  return z;
}

// ---------------------------------------------------------------- metrics

json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"stage", m.stage},
          {"loss_dis", m.loss_dis},
          {"loss_res", m.loss_res},
          {"loss_adv_gen", m.loss_adv_gen},
          {"loss_adv_disc", m.loss_adv_disc},
          {"loss_total", m.loss_total},
          {"val_loss", m.val_loss},
          {"per_dim_std", m.per_dim_std},
          {"effective_rank", m.effective_rank},
          {"wall_seconds", m.wall_seconds}};
}

EpochMetrics epoch_metrics_from_json(const json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch").get<std::size_t>();
  m.stage = j.at("stage").get<int>();
  m.loss_dis = j.at("loss_dis").get<double>();
  m.loss_res = j.at("loss_res").get<double>();
  m.loss_adv_gen = j.at("loss_adv_gen").get<double>();
  m.loss_adv_disc = j.at("loss_adv_disc").get<double>();
  m.loss_total = j.at("loss_total").get<double>();
  m.val_loss = j.at("val_loss").get<double>();
  m.per_dim_std = j.at("per_dim_std").get<double>();
  m.effective_rank = j.at("effective_rank").get<double>();
  m.wall_seconds = j.at("wall_seconds").get<double>();
  return m;
}

std::string metrics_csv_header() {
  return "epoch,stage,loss_dis,loss_res,loss_adv_gen,loss_adv_disc,loss_total,val_loss,per_dim_std,effective_rank,"
         "wall_seconds";
}

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f", m.epoch, m.stage, m.loss_dis,
                m.loss_res, m.loss_adv_gen, m.loss_adv_disc, m.loss_total, m.val_loss, m.per_dim_std,
                m.effective_rank, m.wall_seconds);
  return buf;
}

// ---------------------------------------------------------------- steps

TrainState make_train_state(const ExperimentConfig& config, std::size_t input_size, std::size_t n_classes) {
  config.validate();
  TrainState s;
  s.config = config;
  s.model = DiraModel(config.model, config.method, input_size, n_classes, config.seed);
  s.opt_theta = optim::Optimizer<Real>(config.optimizers.theta, s.model.theta());
  s.opt_phi = optim::Optimizer<Real>(config.optimizers.adversary, s.model.phi());
  s.rng = Rng(derive_seed(config.seed, {0xe90c}));
  return s;
}

Batch make_batch(std::span<const aug::ViewPair> pairs, std::vector<std::size_t> labels) {
  std::vector<Image> v1, v2, t1;
  v1.reserve(pairs.size());
  v2.reserve(pairs.size());
  t1.reserve(pairs.size());
  for (const auto& p : pairs) {
    v1.push_back(p.view1);
    v2.push_back(p.view2);
    t1.push_back(p.target1);
  }
  Batch b;
  b.view1 = to_batch<Real>(v1);
  b.view2 = to_batch<Real>(v2);
  b.target1 = to_batch<Real>(t1);
  b.labels = std::move(labels);
  return b;
}

namespace {

struct Forward {
  Var<Real> dis, res, gen, restored;
  Tensor<Real> keys;  // MoCo key embeddings, enqueued after the step
};

Forward forward(const DiraModel& m, const Batch& b, Toggles t, net::Mode mode) {
  if (t.adv && !t.res) throw ConfigError("adversarial learning requires the restoration branch");
  const MethodConfig& mc = m.method_config;
  const Var<Real> x1(b.view1), x2(b.view2);
  const auto e1 = m.encoder(x1);
  Forward f;
  switch (mc.name) {
    case Method::moco: {
      const Var<Real> z1 = nn::l2_normalize_rows(m.projector(e1.y, mode));
      const Var<Real> z2 = nn::l2_normalize_rows(m.twin_projector(m.twin_encoder(x2).y, mode));
      f.keys = z2.value();
      // Before anything has been enqueued the current keys double as negatives.
      const Tensor<Real> negatives = m.queue.fill() > 0 ? m.queue.entries() : f.keys;
      f.dis = loss::loss_infonce(z1, f.keys, negatives, static_cast<Real>(mc.temperature));
      break;
    }
    case Method::simsiam: {
      const auto e2 = m.encoder(x2);
      const Var<Real> y1 = m.projector(e1.y, mode), y2 = m.projector(e2.y, mode);
      const Var<Real> p1 = m.predictor(y1, mode), p2 = m.predictor(y2, mode);
      f.dis = loss::loss_simsiam(p1, p2, y1, y2, mc.stop_gradient);
      break;
    }
    case Method::barlow: {
      const auto e2 = m.encoder(x2);
      f.dis = loss::loss_barlow(m.projector(e1.y, mode), m.projector(e2.y, mode), static_cast<Real>(mc.lambda_bt));
      break;
    }
    case Method::classwise: {
      if (b.labels.size() != b.view1.dim(0)) throw ConfigError("classwise method needs one pseudo-label per sample");
      const auto e2 = m.encoder(x2);
      f.dis = nn::scale(nn::add(loss::loss_classwise(m.classifier(e1.y, mode), b.labels),
                                loss::loss_classwise(m.classifier(e2.y, mode), b.labels)),
                        Real(0.5));
      break;
    }
  }
  if (t.res) {
    f.restored = m.decoder(e1.final_map, e1.skips);
    f.res = loss::loss_restoration(Var<Real>(b.target1), f.restored);
    if (t.adv) f.gen = loss::loss_adversary_gen(m.adversary(f.restored), mc.saturating_generator);
  }
  return f;
}

Var<Real> weighted_total(const Forward& f, const loss::LossWeights& w) {
  Var<Real> total = nn::scale(f.dis, static_cast<Real>(w.dis));
  if (f.res.defined()) total = nn::add(total, nn::scale(f.res, static_cast<Real>(w.res)));
  if (f.gen.defined()) total = nn::add(total, nn::scale(f.gen, static_cast<Real>(w.adv)));
  return total;
}

loss::LossBundle bundle_of(const Forward& f, const loss::LossWeights& w) {
  return loss::combine(f.dis.item(), f.res.defined() ? f.res.item() : 0.0, f.gen.defined() ? f.gen.item() : 0.0, w);
}

net::ParamList<Real> online_twin_sources(const DiraModel& m) {
  net::ParamList<Real> out;
  m.encoder.collect("encoder", out);
  m.projector.collect("projector", out);
  return out;
}

}  // namespace

loss::LossBundle train_step(TrainState& state, const Batch& batch, Method method, Toggles toggles) {
  DiraModel& m = state.model;
  if (method != m.method_config.name) {
    throw ConfigError("train state was built for " + to_string(m.method_config.name) + ", not " + to_string(method));
  }
  state.opt_theta.zero_grad();
  state.opt_phi.zero_grad();

  const Forward f = forward(m, batch, toggles, net::Mode::train);
  loss::LossBundle bundle = bundle_of(f, state.config.lambdas);
  if (!std::isfinite(bundle.total)) {
    throw DivergenceError("non-finite total loss (dis=" + std::to_string(bundle.dis) + ", res=" +
                          std::to_string(bundle.res) + ", adv_gen=" + std::to_string(bundle.adv_gen) +
                          "); lower the learning rate or the loss weights");
  }
  weighted_total(f, state.config.lambdas).backward();
  state.opt_theta.step();

  if (toggles.adv) {
    const Var<Real> real = m.adversary(Var<Real>(batch.target1));
    const Var<Real> fake = m.adversary(f.restored.detach());
    const Var<Real> d = loss::loss_adversary_disc(real, fake);
    state.opt_phi.zero_grad();
    d.backward();
    state.opt_phi.step();
    bundle.adv_disc = d.item();
  }
  if (m.coupling.mode == net::CouplingMode::momentum) net::twin_update(m.coupling, online_twin_sources(m), m.xi());
  if (m.method_config.name == Method::moco) m.queue.enqueue(f.keys);
  return bundle;
}

loss::LossBundle evaluate_batch(const DiraModel& model, const Batch& batch, const loss::LossWeights& weights,
                                Toggles toggles) {
  const Forward f = forward(model, batch, toggles, net::Mode::eval);
  loss::LossBundle b = bundle_of(f, weights);
  if (toggles.adv) {
    const Var<Real> d =
        loss::loss_adversary_disc(model.adversary(Var<Real>(batch.target1)), model.adversary(f.restored.detach()));
    b.adv_disc = d.item();
  }
  return b;
}

// ---------------------------------------------------------------- checkpoints

void load_params(const net::ParamList<Real>& params, const std::map<std::string, Tensor<Real>>& arrays,
                 const std::vector<std::string>& prefixes) {
  std::vector<std::string> problems;
  for (const auto& p : params) {
    const bool wanted = std::any_of(prefixes.begin(), prefixes.end(),
                                    [&](const std::string& pre) { return p.name.rfind(pre, 0) == 0; });
    if (!wanted) continue;
    auto it = arrays.find(p.name);
    if (it == arrays.end()) {
      problems.push_back(p.name + " (missing)");
    } else if (it->second.shape() != p.var.shape()) {
      problems.push_back(p.name + " (checkpoint " + nn::to_string(it->second.shape()) + ", model " +
                         nn::to_string(p.var.shape()) + ")");
    }
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint is incompatible with the model:";
    for (const auto& s : problems) msg += " " + s + ";";
    throw IncompatibilityError(msg);
  }
  for (const auto& p : params) {
    auto it = arrays.find(p.name);
    if (it == arrays.end()) continue;
    const bool wanted = std::any_of(prefixes.begin(), prefixes.end(),
                                    [&](const std::string& pre) { return p.name.rfind(pre, 0) == 0; });
    if (wanted) const_cast<Var<Real>&>(p.var).mutable_value() = it->second;
  }
}

ckpt::Checkpoint to_checkpoint(TrainState& s) {
  ckpt::Checkpoint c;
  for (const auto& list : {s.model.theta(), s.model.xi(), s.model.phi()})
    for (const auto& p : list) c.arrays.emplace(p.name, p.var.value());
  for (auto& [name, t] : s.opt_theta.state_arrays()) c.arrays.emplace("opt_theta." + name, *t);
  for (auto& [name, t] : s.opt_phi.state_arrays()) c.arrays.emplace("opt_phi." + name, *t);
  if (s.model.method_config.name == Method::moco) c.arrays.emplace("queue.ring", s.model.queue.storage());

  const json config = to_json(s.config);
  c.epoch = s.epoch;
  c.stage = s.stage;
  c.config_hash = ckpt::config_hash(config);
  c.rng_state = serialize_rng(s.rng);
  json history = json::array();
  for (const auto& h : s.history) history.push_back(to_json(h));
  c.metrics = {{"best_val_loss", std::isfinite(s.best_val) ? json(s.best_val) : json(nullptr)},
               {"best_epoch", s.best_epoch},
               {"history", history}};
  c.extra = {{"experiment", config},
             {"model", to_json(s.model.model_config)},
             {"method", to_json(s.model.method_config)},
             {"input_size", s.model.input_size},
             {"n_classes", s.model.n_classes},
             {"opt_theta_steps", s.opt_theta.step_counts()},
             {"opt_phi_steps", s.opt_phi.step_counts()},
             {"queue", {{"fill", s.model.queue.fill()}, {"head", s.model.queue.head()}}},
             {"low_disc_streak", s.low_disc_streak}};
  return c;
}

void restore_from_checkpoint(TrainState& s, const ckpt::Checkpoint& c) {
  if (c.config_hash != ckpt::config_hash(to_json(s.config))) {
    throw ConfigError("checkpoint was written with a different configuration (hash " + c.config_hash + ")");
  }
  for (const auto& list : {s.model.theta(), s.model.xi(), s.model.phi()}) load_params(list, c.arrays, {""});
  auto restore_opt = [&](optim::Optimizer<Real>& opt, const std::string& prefix, const char* steps_key) {
    for (auto& [name, t] : opt.state_arrays()) {
      auto it = c.arrays.find(prefix + name);
      if (it == c.arrays.end() || it->second.shape() != t->shape()) {
        throw IncompatibilityError("checkpoint lacks optimizer state " + prefix + name);
      }
      *t = it->second;
    }
    const auto steps = c.extra.at(steps_key).get<std::vector<std::uint64_t>>();
    if (steps.size() != opt.step_counts().size()) throw IncompatibilityError("optimizer step counts do not match");
    opt.step_counts() = steps;
  };
  try {
    restore_opt(s.opt_theta, "opt_theta.", "opt_theta_steps");
    restore_opt(s.opt_phi, "opt_phi.", "opt_phi_steps");
    if (s.model.method_config.name == Method::moco) {
      s.model.queue.restore(c.arrays.at("queue.ring"), c.extra.at("queue").at("fill").get<std::size_t>(),
                            c.extra.at("queue").at("head").get<std::size_t>());
    }
    s.epoch = c.epoch;
    s.stage = c.stage;
    s.rng = deserialize_rng(c.rng_state);
    const json& best = c.metrics.at("best_val_loss");
    s.best_val = best.is_null() ? std::numeric_limits<double>::infinity() : best.get<double>();
    s.best_epoch = c.metrics.at("best_epoch").get<std::size_t>();
    s.low_disc_streak = c.extra.at("low_disc_streak").get<std::size_t>();
    s.history.clear();
    for (const auto& h : c.metrics.at("history")) s.history.push_back(epoch_metrics_from_json(h));
  } catch (const json::exception& e) {
    throw StorageError(std::string("malformed checkpoint metadata: ") + e.what());
  } catch (const std::out_of_range&) {
    throw StorageError("checkpoint lacks the negative queue");
  }
}

// ---------------------------------------------------------------- diagnostics

Diagnostics collapse_diagnostics(const Tensor<double>& embeddings) {
  if (embeddings.rank() != 2) throw ShapeError("embeddings must be [n, d]");
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (n < 2) throw PreconditionError("collapse diagnostics need at least two samples");
  Eigen::MatrixXd z(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += embeddings.at(i, j) * embeddings.at(i, j);
    const double inv = sq > 0.0 ? 1.0 / std::sqrt(sq) : 0.0;
    for (std::size_t j = 0; j < d; ++j) z(i, j) = embeddings.at(i, j) * inv;
  }
  Diagnostics out;
  const Eigen::RowVectorXd mu = z.colwise().mean();
  double std_sum = 0.0;
  for (std::size_t j = 0; j < d; ++j) std_sum += std::sqrt((z.col(j).array() - mu(j)).square().mean());
  out.per_dim_std = std_sum / static_cast<double>(d);

  const Eigen::VectorXd sv = Eigen::BDCSVD<Eigen::MatrixXd>(z).singularValues();
  const double total = sv.sum();
  if (!(total > 0.0)) {
    out.effective_rank = 1.0;
    return out;
  }
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    const double p = sv(i) / total;
    if (p > 0.0) entropy -= p * std::log(p);
  }
  out.effective_rank = std::exp(entropy);
  return out;
}

Diagnostics collapse_diagnostics(const Tensor<Real>& embeddings) {
  return collapse_diagnostics(embeddings.cast<double>());
}

// ---------------------------------------------------------------- run

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot write " + path.string());
  out << text;
  if (!out) throw StorageError("failed writing " + path.string());
}

void write_metrics_csv(const fs::path& path, const std::vector<EpochMetrics>& history) {
  std::string text = metrics_csv_header() + "\n";
  for (const auto& m : history) text += metrics_csv_row(m) + "\n";
  write_text(path, text);
}

Diagnostics diagnose(const DiraModel& model, const Tensor<Real>& images) {
  return collapse_diagnostics(model.diagnostic_embedding(images));
}

}  // namespace

PretrainResult run_pretraining(const ExperimentConfig& config, const fs::path& out_dir, const RunOptions& options) {
  config.validate();
  const data::Dataset ds = data::load_dataset(config.dataset_path);
  const std::size_t n = ds.samples.size();
  if (n < 4) throw PreconditionError("pretraining needs at least four images");

  std::size_t n_classes = 0;
  if (config.method.name == Method::classwise) {
    for (const auto& s : ds.samples) {
      if (s.meta.pseudo_class < 0) {
        throw ConfigError("classwise method requires pseudo_class for every manifest record (missing for " +
                          s.meta.image_id + ")");
      }
      n_classes = std::max(n_classes, static_cast<std::size_t>(s.meta.pseudo_class) + 1);
    }
    n_classes = std::max(n_classes, ds.manifest.k_templates);
  }

  std::error_code ec;
  fs::create_directories(out_dir / "checkpoints", ec);
  if (ec) throw StorageError("cannot create " + out_dir.string() + ": " + ec.message());
  write_text(out_dir / "config.json", to_json(config).dump(2) + "\n");

  // Fixed validation split.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  {
    Rng split_rng(derive_seed(config.seed, {0x5911}));
    for (std::size_t i = n - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(order[i], order[pick(split_rng)]);
    }
  }
  std::size_t n_val = static_cast<std::size_t>(std::llround(config.schedule.val_fraction * static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 2, n - 2);
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  auto labels_of = [&](std::span<const std::size_t> idx) {
    std::vector<std::size_t> labels;
    if (config.method.name == Method::classwise)
      for (std::size_t i : idx) labels.push_back(static_cast<std::size_t>(ds.samples[i].meta.pseudo_class));
    return labels;
  };

  const std::size_t bs = config.schedule.batch_size;
  std::vector<Batch> val_batches;
  for (std::size_t start = 0; start < n_val; start += bs) {
    const std::size_t count = std::min(bs, n_val - start);
    if (count < 2) break;
    std::vector<aug::ViewPair> pairs;
    for (std::size_t k = start; k < start + count; ++k) {
      const Image& img = ds.samples[val_idx[k]].image;
      pairs.push_back(aug::make_view_pair(img, img, config.augment, derive_seed(config.seed, {0x7a1, val_idx[k]})));
    }
    val_batches.push_back(make_batch(pairs, labels_of(std::span(val_idx).subspan(start, count))));
  }
  std::vector<Image> clean;
  for (std::size_t i : val_idx)
    clean.push_back(resize_bilinear(ds.samples[i].image, config.augment.output_size, config.augment.output_size));
  const Tensor<Real> diag_images = to_batch<Real>(clean);

  TrainState state = make_train_state(config, config.augment.output_size, n_classes);
  PretrainResult result;
  result.initial = diagnose(state.model, diag_images);
  result.best_checkpoint = out_dir / "checkpoints" / "best";
  result.last_checkpoint = out_dir / "checkpoints" / "last";

  if (options.resume) {
    if (!fs::exists(result.last_checkpoint / "manifest.json")) {
      throw StorageError("nothing to resume: " + result.last_checkpoint.string() + " does not exist");
    }
    restore_from_checkpoint(state, ckpt::load_checkpoint(result.last_checkpoint));
  }

  const Toggles ablation = toggles_for(config.method.ablation);
  const std::size_t total_epochs = config.schedule.total_epochs();
  const std::size_t n_train = train_idx.size();
  std::size_t steps = std::max<std::size_t>(1, n_train / bs);
  if (config.schedule.max_steps_per_epoch > 0) steps = std::min(steps, config.schedule.max_steps_per_epoch);
  const std::size_t batch_n = std::min(bs, n_train);
  bool best_saved = fs::exists(result.best_checkpoint / "manifest.json") && options.resume;

  for (std::size_t epoch = state.epoch; epoch < total_epochs; ++epoch) {
    if (options.stop_after_epoch && epoch >= *options.stop_after_epoch) break;
    const auto t0 = std::chrono::steady_clock::now();
    const int stage = config.schedule.stage_of(epoch);
    const Toggles toggles{ablation.res && stage >= 2, ablation.adv && stage >= 3};
    const std::uint64_t epoch_seed = state.rng();

    std::vector<std::size_t> perm = train_idx;
    Rng order_rng(epoch_seed);
    for (std::size_t i = perm.size() - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(perm[i], perm[pick(order_rng)]);
    }

    EpochMetrics row;
    row.epoch = epoch + 1;
    row.stage = stage;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<aug::ViewPair> pairs;
      std::vector<std::size_t> idx;
      for (std::size_t k = 0; k < batch_n; ++k) {
        const std::size_t i = perm[(step * batch_n + k) % perm.size()];
        idx.push_back(i);
        const Image& img = ds.samples[i].image;
        pairs.push_back(aug::make_view_pair(img, img, config.augment, derive_seed(epoch_seed, {i})));
      }
      loss::LossBundle b;
      try {
        b = train_step(state, make_batch(pairs, labels_of(idx)), config.method.name, toggles);
      } catch (const DivergenceError& e) {
        throw DivergenceError("epoch " + std::to_string(epoch + 1) + " (stage " + std::to_string(stage) + "), step " +
                              std::to_string(step + 1) + ": " + e.what());
      }
      row.loss_dis += b.dis;
      row.loss_res += b.res;
      row.loss_adv_gen += b.adv_gen;
      row.loss_adv_disc += b.adv_disc;
      row.loss_total += b.total;
    }
    const double inv_steps = 1.0 / static_cast<double>(steps);
    row.loss_dis *= inv_steps;
    row.loss_res *= inv_steps;
    row.loss_adv_gen *= inv_steps;
    row.loss_adv_disc *= inv_steps;
    row.loss_total *= inv_steps;

    double val_sum = 0.0;
    std::size_t val_count = 0;
    for (const auto& vb : val_batches) {
      const std::size_t c = vb.view1.dim(0);
      val_sum += evaluate_batch(state.model, vb, config.lambdas, toggles).total * static_cast<double>(c);
      val_count += c;
    }
    row.val_loss = val_sum / static_cast<double>(std::max<std::size_t>(1, val_count));
    const Diagnostics diag = diagnose(state.model, diag_images);
    row.per_dim_std = diag.per_dim_std;
    row.effective_rank = diag.effective_rank;
    if (config.schedule.record_wall_time) {
      row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    if (toggles.adv && std::abs(row.loss_adv_disc) < 1e-4) {
      if (++state.low_disc_streak >= config.schedule.divergence_patience) {
        throw DivergenceError("epoch " + std::to_string(epoch + 1) + ": discriminator loss below 1e-4 for " +
                              std::to_string(state.low_disc_streak) +
                              " consecutive epochs; lower optimizers.adversary.lr or lambdas.adv");
      }
    } else {
      state.low_disc_streak = 0;
    }

    state.history.push_back(row);
    state.epoch = epoch + 1;
    state.stage = stage;
    if (stage == config.schedule.final_stage() && std::isfinite(row.val_loss) && row.val_loss < state.best_val) {
      state.best_val = row.val_loss;
      state.best_epoch = epoch + 1;
      ckpt::save_checkpoint(result.best_checkpoint, to_checkpoint(state));
      best_saved = true;
    }
    ckpt::save_checkpoint(result.last_checkpoint, to_checkpoint(state));
    write_metrics_csv(out_dir / "metrics.csv", state.history);
    if (options.on_epoch) options.on_epoch(row);
  }

  if (state.history.empty() || !fs::exists(result.last_checkpoint / "manifest.json")) {
    ckpt::save_checkpoint(result.last_checkpoint, to_checkpoint(state));
  }
  if (!best_saved) ckpt::save_checkpoint(result.best_checkpoint, to_checkpoint(state));
  write_metrics_csv(out_dir / "metrics.csv", state.history);

  json summary = {{"method", to_string(config.method.name)},
                  {"ablation", to_string(config.method.ablation)},
                  {"epochs_completed", state.epoch},
                  {"best_epoch", state.best_epoch},
                  {"best_val_loss", std::isfinite(state.best_val) ? json(state.best_val) : json(nullptr)},
                  {"initial_per_dim_std", result.initial.per_dim_std},
                  {"initial_effective_rank", result.initial.effective_rank}};
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  result.history = state.history;
  return result;
}

}  // namespace dira::pre
