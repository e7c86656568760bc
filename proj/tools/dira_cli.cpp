// Command-line entry point: datagen, pretrain, finetune, eval, localize, report.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "dira/datasets.hpp"
#include "dira/errors.hpp"
#include "dira/json_util.hpp"
#include "dira/localization.hpp"
#include "dira/pretrain.hpp"
#include "dira/report.hpp"
#include "dira/transfer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dira;

namespace {

enum Exit { ok = 0, failure = 1, config_error = 2, io_error = 3, diverged = 4 };

fs::path home() {
  const char* h = std::getenv("DIRA_HOME");
  return h && *h ? fs::path(h) : fs::path("dira_out");
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw StorageError(what + " not found: " + p.string());
}

json read_json_file(const fs::path& p) {
  require_exists(p, "config");
  std::ifstream in(p);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot write " + p.string());
  out << j.dump(2) << "\n";
}

// "a,b,c" epochs per stage.
void parse_stage_epochs(const std::string& s, pre::ScheduleConfig& sched) {
  std::size_t a = 0, b = 0, c = 0;
  char extra = 0;
  if (std::sscanf(s.c_str(), "%zu,%zu,%zu%c", &a, &b, &c, &extra) != 3) {
    throw ParameterError("--epochs expects three comma-separated stage lengths, got '" + s + "'");
  }
  sched.stage1_epochs = a;
  sched.stage2_epochs = b;
  sched.stage3_epochs = c;
}

// ---------------------------------------------------------------- datagen

struct DatagenArgs {
  std::uint64_t seed = 0;
  std::size_t n = 200;
  fs::path out;
  data::PhantomParams params;
};

int run_datagen(const DatagenArgs& a) {
  const fs::path out = a.out.empty() ? home() / "data" : a.out;
  a.params.validate();
  const auto m = data::build_dataset(a.seed, a.n, a.params, out);
  std::cout << "wrote " << m.records.size() << " images to " << out.string() << "\n";
  return ok;
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
  std::string config, method, ablation, dataset, epochs, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size, max_steps, stop_after;
  bool deterministic = false, resume = false, quiet = false;
};

int run_pretrain(const PretrainArgs& a) {
  pre::ExperimentConfig cfg;
  if (!a.config.empty()) cfg = pre::experiment_config_from_json(read_json_file(a.config));
  if (!a.method.empty()) cfg.method.name = pre::method_from_string(a.method);
  if (!a.ablation.empty()) cfg.method.ablation = pre::ablation_from_string(a.ablation);
  if (!a.dataset.empty()) cfg.dataset_path = a.dataset;
  if (a.seed) cfg.seed = *a.seed;
  if (!a.epochs.empty()) parse_stage_epochs(a.epochs, cfg.schedule);
  if (a.batch_size) cfg.schedule.batch_size = *a.batch_size;
  if (a.max_steps) cfg.schedule.max_steps_per_epoch = *a.max_steps;
  if (a.deterministic) cfg.schedule.record_wall_time = false;
  if (cfg.dataset_path.empty()) cfg.dataset_path = (home() / "data").string();
  cfg.validate();
  require_exists(fs::path(cfg.dataset_path) / "manifest.json", "dataset manifest");

  const fs::path out = a.out.empty() ? home() / "runs" /
                                           (pre::to_string(cfg.method.name) + "-" + pre::to_string(cfg.method.ablation))
                                     : fs::path(a.out);
  pre::RunOptions opts;
  opts.resume = a.resume;
  opts.stop_after_epoch = a.stop_after;
  if (!a.quiet) {
    opts.on_epoch = [](const pre::EpochMetrics& m) {
      std::fprintf(stderr, "epoch %zu (stage %d): loss %.5f  val %.5f  std %.4f  rank %.2f\n", m.epoch, m.stage,
                   m.loss_total, m.val_loss, m.per_dim_std, m.effective_rank);
    };
  }
  const auto r = pre::run_pretraining(cfg, out, opts);
  std::cout << "best checkpoint: " << r.best_checkpoint.string() << "\n";
  return ok;
}

// ---------------------------------------------------------------- finetune

struct FinetuneArgs {
  std::string config, task, dataset, checkpoint, metric, method_label, ledger, save_model, result_json;
  std::optional<double> fraction, lr;
  std::optional<std::size_t> runs, max_epochs, patience, batch_size;
  std::optional<std::uint64_t> seed, split_seed, test_seed;
};

// Strict JSON counterpart of the finetune flags.
void apply_finetune_json(const json& j, xfer::DownstreamTask& t, xfer::FineTuneOptions& o, std::string& checkpoint) {
  const std::string s = "finetune config";
  require_keys(j, {"task", "dataset", "checkpoint", "fraction", "split_seed", "test_fraction", "test_seed",
                   "val_fraction", "max_epochs", "patience", "batch_size", "optimizer", "metric", "runs", "seed",
                   "method_label", "random_model", "random_input_size"},
               s);
  if (j.contains("task")) t.kind = xfer::task_kind_from_string(j.at("task").get<std::string>());
  read_opt(j, "dataset", t.dataset_path, s);
  read_opt(j, "checkpoint", checkpoint, s);
  read_opt(j, "fraction", t.label_split.fraction, s);
  read_opt(j, "split_seed", t.label_split.seed, s);
  read_opt(j, "test_fraction", t.test_fraction, s);
  read_opt(j, "test_seed", t.test_seed, s);
  read_opt(j, "val_fraction", t.val_fraction, s);
  read_opt(j, "max_epochs", t.max_epochs, s);
  read_opt(j, "patience", t.patience, s);
  read_opt(j, "batch_size", t.batch_size, s);
  if (j.contains("optimizer")) t.optimizer = optim::optimizer_config_from_json(j.at("optimizer"), t.effective_optimizer());
  if (j.contains("metric")) t.metric = xfer::metric_from_string(j.at("metric").get<std::string>());
  read_opt(j, "runs", o.runs, s);
  read_opt(j, "seed", o.seed, s);
  read_opt(j, "method_label", o.method_label, s);
  if (j.contains("random_model")) o.random_config = pre::model_config_from_json(j.at("random_model"));
  read_opt(j, "random_input_size", o.random_input_size, s);
}

int run_finetune(const FinetuneArgs& a) {
  xfer::DownstreamTask task;
  xfer::FineTuneOptions opts;
  std::string checkpoint;
  if (!a.config.empty()) apply_finetune_json(read_json_file(a.config), task, opts, checkpoint);
  if (!a.task.empty()) task.kind = xfer::task_kind_from_string(a.task);
  if (!a.dataset.empty()) task.dataset_path = a.dataset;
  if (!a.checkpoint.empty()) checkpoint = a.checkpoint;
  if (a.fraction) task.label_split.fraction = *a.fraction;
  if (a.split_seed) task.label_split.seed = *a.split_seed;
  if (a.test_seed) task.test_seed = *a.test_seed;
  if (a.max_epochs) task.max_epochs = *a.max_epochs;
  if (a.patience) task.patience = *a.patience;
  if (a.batch_size) task.batch_size = *a.batch_size;
  if (!a.metric.empty()) task.metric = xfer::metric_from_string(a.metric);
  if (a.lr) {
    auto o = task.effective_optimizer();
    o.lr = *a.lr;
    task.optimizer = o;
  }
  if (a.runs) opts.runs = *a.runs;
  if (a.seed) opts.seed = *a.seed;
  if (!a.method_label.empty()) opts.method_label = a.method_label;
  if (!a.save_model.empty()) opts.save_model = a.save_model;
  if (task.dataset_path.empty()) task.dataset_path = (home() / "data").string();
  task.validate();
  require_exists(fs::path(task.dataset_path) / "manifest.json", "dataset manifest");
  if (!checkpoint.empty() && checkpoint != "random") {
    require_exists(fs::path(checkpoint) / "manifest.json", "checkpoint");
    opts.checkpoint = checkpoint;
  }

  const auto r = xfer::finetune(task, opts);
  const fs::path ledger = a.ledger.empty() ? home() / "ledger.csv" : fs::path(a.ledger);
  xfer::append_ledger(ledger, r);
  if (!a.result_json.empty()) write_json_file(a.result_json, xfer::to_json(r));
  std::printf("%s %s: %s = %.4f ± %.4f over %zu runs\n", r.task.c_str(), r.method.c_str(), r.metric.c_str(), r.mean,
              r.std, r.runs.size());
  return ok;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string model, dataset, metric;
  bool test_only = false;
  double test_fraction = 0.2;
  std::uint64_t test_seed = 0;
};

int run_eval(const EvalArgs& a) {
  require_exists(fs::path(a.model) / "manifest.json", "task model");
  require_exists(fs::path(a.dataset) / "manifest.json", "dataset manifest");
  const xfer::TaskModel model = xfer::load_task_model(a.model);
  const data::Dataset ds = data::load_dataset(a.dataset);
  xfer::DownstreamTask task;
  task.kind = model.kind;
  if (!a.metric.empty()) task.metric = xfer::metric_from_string(a.metric);
  task.test_fraction = a.test_fraction;
  task.test_seed = a.test_seed;
  task.validate();
  std::vector<std::size_t> idx;
  if (a.test_only) {
    task.label_split.fraction = 1.0;
    idx = xfer::make_splits(ds, task).test;
  } else {
    idx.resize(ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  }
  const auto metric = task.effective_metric();
  const double v = xfer::evaluate(model, ds, idx, metric);
  std::cout << json{{"metric", xfer::to_string(metric)}, {"value", v}, {"n", idx.size()}}.dump() << "\n";
  return ok;
}

// ---------------------------------------------------------------- localize

struct LocalizeArgs {
  std::string model, dataset, deltas = "0.1:0.6:0.1", method, out, rule = "two_threshold", overlay_dir;
  std::size_t overlays = 0;
};

int run_localize(const LocalizeArgs& a) {
  const auto deltas = loc::parse_deltas(a.deltas);
  for (double d : deltas)
    if (!(d > 0.0 && d < 1.0)) throw ParameterError("every delta must lie in (0, 1)");
  const bool all_rules = a.rule == "all";
  const auto wanted = all_rules ? loc::BoxRule::two_threshold : loc::box_rule_from_string(a.rule);
  require_exists(fs::path(a.model) / "manifest.json", "task model");
  require_exists(fs::path(a.dataset) / "manifest.json", "dataset manifest");
  const xfer::TaskModel model = xfer::load_task_model(a.model);
  const data::Dataset ds = data::load_dataset(a.dataset);
  const fs::path overlay_dir = a.overlay_dir.empty() ? fs::path(a.out).parent_path() / "overlays" : fs::path(a.overlay_dir);
  const auto run = loc::localize_dataset(model, ds, overlay_dir, a.overlays);
  const std::string label = a.method.empty() ? fs::path(a.model).filename().string() : a.method;

  const fs::path out = a.out.empty() ? home() / "localization.csv" : fs::path(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const bool fresh = !fs::exists(out) || fs::file_size(out) == 0;
  std::ofstream csv(out, std::ios::app | std::ios::binary);
  if (!csv) throw StorageError("cannot write " + out.string());
  if (fresh) csv << loc::localization_csv_header() << "\n";
  for (const auto& [rule, preds] : run.predictions) {
    if (!all_rules && rule != wanted) continue;
    for (double d : deltas) {
      const auto s = loc::score_localization(preds, run.ground_truth, d);
      const std::string row = loc::localization_csv_row(label + "/" + loc::to_string(rule), s);
      csv << row << "\n";
      std::cout << row << "\n";
    }
  }
  return ok;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
  std::vector<std::string> ledgers, localization;
  std::string out;
};

int run_report(const ReportArgs& a) {
  std::vector<fs::path> ledgers(a.ledgers.begin(), a.ledgers.end());
  std::vector<fs::path> locs(a.localization.begin(), a.localization.end());
  if (ledgers.empty()) ledgers.push_back(home() / "ledger.csv");
  if (locs.empty()) locs.push_back(home() / "localization.csv");
  const fs::path out = a.out.empty() ? home() / "report" : fs::path(a.out);
  report::build_tables(ledgers, locs, out);
  std::cout << "wrote " << out.string() << "\n";
  return ok;
}

int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    return config_error;
  } catch (const ParameterError&) {
    return config_error;
  } catch (const StratificationError&) {
    return config_error;
  } catch (const IncompatibilityError&) {
    return config_error;
  } catch (const StorageError&) {
    return io_error;
  } catch (const fs::filesystem_error&) {
    return io_error;
  } catch (const DivergenceError&) {
    return diverged;
  } catch (const NumericError&) {
    return diverged;
  } catch (...) {
    return failure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DiRA self-supervised pretraining on synthetic phantoms"};
  app.require_subcommand(1);
  std::string stage;

  DatagenArgs dg;
  auto* c_dg = app.add_subcommand("datagen", "Generate a synthetic phantom dataset");
  c_dg->add_option("--seed", dg.seed, "Dataset seed");
  c_dg->add_option("--n", dg.n, "Number of images");
  c_dg->add_option("--out", dg.out, "Output directory (default $DIRA_HOME/data)");
  c_dg->add_option("--size", dg.params.size, "Image side in pixels");
  c_dg->add_option("--k-templates", dg.params.k_templates, "Number of anatomy templates");
  c_dg->add_option("--lesion-prob", dg.params.lesion_probability, "Probability that an image holds a lesion");
  c_dg->add_option("--lesion-classes", dg.params.n_lesion_classes, "Number of lesion classes");
  c_dg->add_option("--jitter", dg.params.jitter, "Per-sample geometric jitter scale");
  c_dg->add_option("--noise", dg.params.noise_amplitude, "Per-sample noise amplitude");
  c_dg->add_option("--lesion-contrast", dg.params.lesion_contrast, "Lesion intensity offset");

  PretrainArgs pt;
  auto* c_pt = app.add_subcommand("pretrain", "Self-supervised pretraining");
  c_pt->add_option("--config", pt.config, "Experiment config JSON");
  c_pt->add_option("--method", pt.method, "moco | simsiam | barlow | classwise");
  c_pt->add_option("--ablation", pt.ablation, "di | dir | dira");
  c_pt->add_option("--dataset", pt.dataset, "Dataset directory");
  c_pt->add_option("--out", pt.out, "Run directory (default $DIRA_HOME/runs/<method>-<ablation>)");
  c_pt->add_option("--seed", pt.seed, "Run seed");
  c_pt->add_option("--epochs", pt.epochs, "Epochs per stage, e.g. 2,4,4");
  c_pt->add_option("--batch-size", pt.batch_size, "Batch size");
  c_pt->add_option("--max-steps", pt.max_steps, "Cap on steps per epoch (0: full pass)");
  c_pt->add_option("--stop-after", pt.stop_after, "Stop once this many epochs are complete");
  c_pt->add_flag("--resume", pt.resume, "Continue from checkpoints/last");
  c_pt->add_flag("--deterministic", pt.deterministic, "Record zero wall time so outputs are byte-stable");
  c_pt->add_flag("--quiet", pt.quiet, "No per-epoch progress");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Fine-tune on a downstream task and append to the ledger");
  c_ft->add_option("--config", ft.config, "Fine-tuning config JSON");
  c_ft->add_option("--task", ft.task, "classification | segmentation");
  c_ft->add_option("--dataset", ft.dataset, "Downstream dataset directory");
  c_ft->add_option("--checkpoint", ft.checkpoint, "Pretraining checkpoint directory, or 'random'");
  c_ft->add_option("--fraction", ft.fraction, "Label fraction of the training pool");
  c_ft->add_option("--split-seed", ft.split_seed, "Seed of the label-fraction subset");
  c_ft->add_option("--test-seed", ft.test_seed, "Seed of the held-out test split");
  c_ft->add_option("--runs", ft.runs, "Independent runs");
  c_ft->add_option("--seed", ft.seed, "Seed of run 0; run r uses seed + r");
  c_ft->add_option("--max-epochs", ft.max_epochs, "Epoch cap per run");
  c_ft->add_option("--patience", ft.patience, "Early-stopping patience in epochs");
  c_ft->add_option("--batch-size", ft.batch_size, "Batch size");
  c_ft->add_option("--lr", ft.lr, "Learning rate");
  c_ft->add_option("--metric", ft.metric, "auc | dice | iou");
  c_ft->add_option("--method-label", ft.method_label, "Method column of the ledger row");
  c_ft->add_option("--ledger", ft.ledger, "Ledger CSV (default $DIRA_HOME/ledger.csv)");
  c_ft->add_option("--save-model", ft.save_model, "Store the run-0 model in this directory");
  c_ft->add_option("--result-json", ft.result_json, "Also write the result as JSON");

  EvalArgs ev;
  auto* c_ev = app.add_subcommand("eval", "Score a fine-tuned model on a dataset");
  c_ev->add_option("--model", ev.model, "Fine-tuned model directory")->required();
  c_ev->add_option("--dataset", ev.dataset, "Dataset directory")->required();
  c_ev->add_option("--metric", ev.metric, "auc | dice | iou");
  c_ev->add_flag("--test-only", ev.test_only, "Score only the held-out test split");
  c_ev->add_option("--test-fraction", ev.test_fraction, "Test split fraction");
  c_ev->add_option("--test-seed", ev.test_seed, "Test split seed");

  LocalizeArgs lc;
  auto* c_lc = app.add_subcommand("localize", "Grad-CAM lesion localization sweep");
  c_lc->add_option("--model", lc.model, "Fine-tuned classification model directory")->required();
  c_lc->add_option("--dataset", lc.dataset, "Dataset directory")->required();
  c_lc->add_option("--deltas", lc.deltas, "IoU thresholds start:stop:step");
  c_lc->add_option("--rule", lc.rule, "two_threshold | low_only | high_only | all");
  c_lc->add_option("--method", lc.method, "Method label (default: model directory name)");
  c_lc->add_option("--out", lc.out, "Localization CSV, appended (default $DIRA_HOME/localization.csv)");
  c_lc->add_option("--overlays", lc.overlays, "Write this many heatmap overlay PNGs");
  c_lc->add_option("--overlay-dir", lc.overlay_dir, "Overlay directory");

  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "Tables and plots from ledgers");
  c_rp->add_option("--ledger", rp.ledgers, "Fine-tuning ledger CSV (repeatable)");
  c_rp->add_option("--localization", rp.localization, "Localization CSV (repeatable)");
  c_rp->add_option("--out", rp.out, "Output directory (default $DIRA_HOME/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*c_dg) return stage = "datagen", run_datagen(dg);
    if (*c_pt) return stage = "pretrain", run_pretrain(pt);
    if (*c_ft) return stage = "finetune", run_finetune(ft);
    if (*c_ev) return stage = "eval", run_eval(ev);
    if (*c_lc) return stage = "localize", run_localize(lc);
    if (*c_rp) return stage = "report", run_report(rp);
  } catch (const std::exception& e) {
    std::cerr << "dira " << stage << ": " << e.what() << "\n";
    return exit_code_for(std::current_exception());
  }
  return failure;
}
