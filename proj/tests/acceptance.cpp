// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "checks.hpp"
#include "dira/datasets.hpp"
#include "dira/localization.hpp"
#include "dira/pretrain.hpp"
#include "dira/transfer.hpp"

using namespace dira;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // runtime limit from the criterion, checked as part of the verdict
  std::function<Verdict()> run;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Verdict from_checks(const std::vector<checks::Outcome>& outcomes) {
  const bool ok = checks::all_pass(outcomes);
  return {ok, ok ? std::to_string(outcomes.size()) + " checks" : checks::failures(outcomes)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

// Model used by the desk-scale experiments (criteria 4 and 6).
pre::ModelConfig bench_model() {
  pre::ModelConfig m;
  m.stage_channels = {8, 16, 32};
  m.d_y = 64;
  m.d_z = 32;
  m.proj_hidden = 64;
  m.pred_hidden = 16;
  m.adversary_channels = 8;
  return m;
}

pre::ExperimentConfig tiny_experiment(pre::Method method, pre::Ablation ablation, const fs::path& data) {
  pre::ExperimentConfig c;
  c.dataset_path = data.string();
  c.augment.output_size = 16;
  c.model.stage_channels = {4, 8};
  c.model.d_y = 16;
  c.model.d_z = 16;
  c.model.proj_hidden = 16;
  c.model.pred_hidden = 8;
  c.model.adversary_channels = 4;
  c.method.name = method;
  c.method.ablation = ablation;
  c.method.queue_size = 16;
  c.schedule.batch_size = 16;
  c.schedule.record_wall_time = false;
  c.seed = 1;
  return c;
}

const fs::path& ensure_dataset(const fs::path& dir, std::uint64_t seed, std::size_t n, std::size_t size) {
  if (!fs::exists(dir / "manifest.json")) {
    data::PhantomParams p;
    p.size = size;
    data::build_dataset(seed, n, p, dir);
  }
  return dir;
}

// Criterion 4: SimSiam without stop-gradient collapses, with it does not.
Verdict collapse(const fs::path& work) {
  const fs::path data = ensure_dataset(work / "c4_data", 1, 512, 32);
  int collapsed = 0, stable = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (bool sg : {false, true}) {
      pre::ExperimentConfig c;
      c.dataset_path = data.string();
      c.augment.output_size = 32;
      c.model = bench_model();
      c.method.name = pre::Method::simsiam;
      c.method.ablation = pre::Ablation::di;
      c.method.stop_gradient = sg;
      c.schedule.stage1_epochs = 50;
      c.schedule.stage2_epochs = 0;
      c.schedule.stage3_epochs = 0;
      c.schedule.record_wall_time = false;
      c.seed = seed;
      const auto r = pre::run_pretraining(c, work / ("c4_seed" + std::to_string(seed) + (sg ? "_sg" : "_nosg")));
      const double ratio = r.history.back().per_dim_std / r.initial.per_dim_std;
      if (!sg && ratio < 0.1) ++collapsed;
      if (sg && ratio > 0.5) ++stable;
      detail += " seed" + std::to_string(seed) + (sg ? " sg=" : " nosg=") + fmt("%.3f", ratio);
    }
  }
  return {collapsed >= 2 && stable >= 2,
          "std ratio final/initial:" + detail + " (collapsed " + std::to_string(collapsed) + "/3, stable " +
              std::to_string(stable) + "/3)"};
}

// Criterion 5: Di+R overfits 16 fixed images.
Verdict restoration(const fs::path&) {
  pre::ExperimentConfig c;
  c.augment.output_size = 16;
  c.model.stage_channels = {8, 16};
  c.model.d_y = 32;
  c.model.d_z = 16;
  c.model.proj_hidden = 32;
  c.model.pred_hidden = 8;
  c.model.adversary_channels = 4;
  c.method.name = pre::Method::barlow;
  c.method.ablation = pre::Ablation::dir;
  c.seed = 1;
  data::PhantomParams pp;
  pp.size = 16;
  std::vector<aug::ViewPair> pairs;
  for (std::uint64_t i = 0; i < 16; ++i) {
    const auto s = data::generate_phantom(500 + i, pp);
    pairs.push_back(aug::make_view_pair(s.image, s.image, c.augment, 900 + i));
  }
  const auto batch = pre::make_batch(pairs);
  auto state = pre::make_train_state(c, 16, 0);
  const auto toggles = pre::toggles_for(c.method.ablation);
  for (std::size_t step = 1; step <= 2000; ++step) {
    pre::train_step(state, batch, c.method.name, toggles);
    const double mse = pre::evaluate_batch(state.model, batch, c.lambdas, toggles).res;
    if (mse < 1e-3) return {true, "restoration MSE " + fmt("%.3g", mse) + " after " + std::to_string(step) + " steps"};
  }
  const double mse = pre::evaluate_batch(state.model, batch, c.lambdas, toggles).res;
  return {false, "restoration MSE still " + fmt("%.3g", mse) + " after 2000 steps"};
}

const std::vector<pre::Method> kMethods2D{pre::Method::moco, pre::Method::simsiam, pre::Method::barlow};
const std::vector<pre::Ablation> kAblations{pre::Ablation::di, pre::Ablation::dir, pre::Ablation::dira};

fs::path c6_run_dir(const fs::path& work, pre::Method m, pre::Ablation a) {
  return work / "c6" / ("run-" + pre::to_string(m) + "-" + pre::to_string(a));
}

// Criterion 6: adding restoration (and adversarial learning) helps at 10% labels.
Verdict directional(const fs::path& work) {
  const fs::path pre_data = ensure_dataset(work / "c6" / "pretrain_data", 1000, 2000, 32);
  const fs::path down_data = ensure_dataset(work / "c6" / "downstream_data", 2000, 1000, 32);
  std::map<std::pair<pre::Method, pre::Ablation>, double> dice;
  std::string detail;
  for (auto m : kMethods2D) {
    for (auto a : kAblations) {
      pre::ExperimentConfig c;
      c.dataset_path = pre_data.string();
      c.augment.output_size = 32;
      c.model = bench_model();
      c.method.name = m;
      c.method.ablation = a;
      c.method.queue_size = 1024;
      c.schedule.stage1_epochs = 4;
      c.schedule.stage2_epochs = 8;
      c.schedule.stage3_epochs = 8;
      c.schedule.record_wall_time = false;
      c.seed = 7;
      const auto r = pre::run_pretraining(c, c6_run_dir(work, m, a));

      xfer::DownstreamTask t;
      t.kind = xfer::TaskKind::segmentation;
      t.dataset_path = down_data.string();
      t.label_split.fraction = 0.1;
      // With ~70 training images an epoch is only a handful of steps; the
      // default patience stops most runs on the all-background plateau.
      t.patience = 20;
      auto opt = t.effective_optimizer();
      opt.lr = 3e-3;
      t.optimizer = opt;
      xfer::FineTuneOptions o;
      o.runs = 5;
      o.seed = 11;
      o.checkpoint = r.best_checkpoint;
      const auto f = xfer::finetune(t, o);
      dice[{m, a}] = f.mean;
      detail += " " + f.method + "=" + fmt("%.4f", f.mean);
      std::fflush(stdout);
    }
  }
  int dira_wins = 0, dir_wins = 0;
  for (auto m : kMethods2D) {
    dira_wins += dice[{m, pre::Ablation::dira}] >= dice[{m, pre::Ablation::di}];
    dir_wins += dice[{m, pre::Ablation::dir}] >= dice[{m, pre::Ablation::di}];
  }
  return {dira_wins >= 2 && dir_wins >= 2, "mean Dice over 5 runs:" + detail + "; DiRA>=Di in " +
                                               std::to_string(dira_wins) + "/3, Di+R>=Di in " +
                                               std::to_string(dir_wins) + "/3"};
}

// Criterion 7: rasterized oracles, then a monotone delta sweep on every
// evaluated model: a random-init baseline plus every criterion-6 encoder found.
Verdict localization(const fs::path& work) {
  const auto oracles = checks::localization_oracles(200);
  if (!checks::all_pass(oracles)) return {false, checks::failures(oracles)};

  const fs::path data = ensure_dataset(work / "c6" / "downstream_data", 2000, 1000, 32);
  const auto ds = data::load_dataset(data);
  std::vector<std::pair<std::string, std::optional<fs::path>>> sources{{"random", std::nullopt}};
  for (auto m : kMethods2D)
    for (auto a : kAblations) {
      const fs::path ck = c6_run_dir(work, m, a) / "checkpoints" / "best";
      if (fs::exists(ck / "manifest.json")) sources.emplace_back(pre::to_string(m) + "-" + pre::to_string(a), ck);
    }

  const auto deltas = loc::parse_deltas("0.1:0.6:0.1");
  std::size_t sweeps = 0;
  for (const auto& [label, ck] : sources) {
    xfer::DownstreamTask t;
    t.kind = xfer::TaskKind::classification;
    t.dataset_path = data.string();
    t.label_split.fraction = 0.1;
    xfer::FineTuneOptions o;
    o.runs = 1;
    o.seed = 3;
    o.checkpoint = ck;
    o.random_config = bench_model();
    o.random_input_size = 32;
    o.save_model = work / "c7_models" / label;
    xfer::finetune(t, o);
    const auto model = xfer::load_task_model(*o.save_model);
    const auto run = loc::localize_dataset(model, ds);
    for (const auto& [rule, boxes] : run.predictions) {
      double prev = 2.0;
      for (double d : deltas) {
        const double acc = loc::score_localization(boxes, run.ground_truth, d).accuracy();
        if (acc > prev)
          return {false, label + "/" + loc::to_string(rule) + " accuracy rises at delta " + fmt("%.1f", d)};
        prev = acc;
      }
      ++sweeps;
    }
  }
  return {true, std::to_string(oracles.size()) + " oracle checks; " + std::to_string(sweeps) +
                    " monotone sweeps over " + std::to_string(sources.size()) + " models"};
}

int sh(const fs::path& cwd, const std::string& args) {
  const std::string cmd = "cd \"" + cwd.string() + "\" && \"" + DIRA_CLI_PATH + "\" " + args + " >> cli.log 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Criterion 9: two independent CLI invocations give identical bytes.
Verdict determinism(const fs::path& work) {
  const std::vector<std::string> steps{
      "datagen --seed 9 --n 64 --size 16 --out data",
      "pretrain --method barlow --ablation dira --config tiny.json --epochs 1,1,1 --deterministic --quiet "
      "--dataset data --out run",
      "finetune --task segmentation --dataset data --checkpoint run/checkpoints/best --fraction 0.5 --runs 1 "
      "--seed 2 --max-epochs 3 --ledger ledger.csv"};
  const nlohmann::json cfg = {
      {"augment", {{"output_size", 16}}},
      {"model",
       {{"stage_channels", {4, 8}}, {"d_y", 8}, {"d_z", 8}, {"proj_hidden", 8}, {"pred_hidden", 4},
        {"adversary_channels", 4}}},
      {"schedule", {{"batch_size", 16}}},
      {"seed", 4}};
  std::vector<fs::path> dirs{work / "c9_a", work / "c9_b"};
  for (const auto& d : dirs) {
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.json") << cfg.dump(2);
    for (const auto& s : steps)
      if (const int rc = sh(d, s); rc != 0) return {false, "'" + s + "' exited with " + std::to_string(rc)};
  }
  const std::vector<std::string> artifacts{"data/manifest.json", "run/metrics.csv", "ledger.csv"};
  for (const auto& a : artifacts) {
    const std::string x = slurp(dirs[0] / a), y = slurp(dirs[1] / a);
    if (x.empty()) return {false, a + " is missing or empty"};
    if (x != y) return {false, a + " differs between invocations"};
  }
  return {true, "manifest, metrics CSV and ledger byte-identical"};
}

// Criterion 10: disabled loss columns are zero, enabled ones are not.
Verdict ablation_plumbing(const fs::path& work) {
  const fs::path data = ensure_dataset(work / "c10_data", 5, 64, 16);
  std::size_t runs = 0;
  for (auto m : {pre::Method::moco, pre::Method::simsiam, pre::Method::barlow, pre::Method::classwise}) {
    for (auto a : kAblations) {
      auto c = tiny_experiment(m, a, data);
      c.schedule.stage1_epochs = c.schedule.stage2_epochs = c.schedule.stage3_epochs = 1;
      const fs::path out = work / ("c10_" + pre::to_string(m) + "-" + pre::to_string(a));
      try {
        pre::run_pretraining(c, out);
      } catch (const std::exception& e) {
        return {false, pre::to_string(m) + "-" + pre::to_string(a) + ": " + e.what()};
      }
      const auto rows = read_csv(out / "metrics.csv");
      if (rows.size() != 4) return {false, out.string() + " has " + std::to_string(rows.size()) + " lines"};
      const auto tg = pre::toggles_for(a);
      for (std::size_t i = 1; i < rows.size(); ++i) {
        const int stage = std::stoi(rows[i][1]);
        const bool res = tg.res && stage >= 2, adv = tg.adv && stage >= 3;
        const std::vector<std::pair<std::size_t, bool>> expect{{2, true}, {3, res}, {4, adv}, {5, adv}};
        for (const auto& [col, on] : expect) {
          const double v = std::stod(rows[i][col]);
          if (on != (v != 0.0))
            return {false, pre::to_string(m) + "-" + pre::to_string(a) + " stage " + std::to_string(stage) + " " +
                               rows[0][col] + "=" + rows[i][col]};
        }
      }
      ++runs;
    }
  }
  return {true, std::to_string(runs) + " runs; zero columns exactly where the ablation disables the loss"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  fs::path work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory (reused between invocations)");
  app.add_option("--only", only, "Run just these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  work = fs::absolute(work);

  const std::vector<Criterion> criteria{
      {1, "loss oracles", 1.0, [] { return from_checks(checks::loss_oracles()); }},
      {2, "gradient checks", 30.0, [] { return from_checks(checks::gradient_checks()); }},
      {3, "mechanism invariants", 0.0, [] { return from_checks(checks::mechanism_invariants()); }},
      {4, "collapse property", 600.0, [&] { return collapse(work); }},
      {5, "restoration sanity", 300.0, [&] { return restoration(work); }},
      {6, "directional DiRA claim", 7200.0, [&] { return directional(work); }},
      {7, "localization pipeline", 0.0, [&] { return localization(work); }},
      {8, "metric oracles", 0.0, [] { return from_checks(checks::metric_oracles()); }},
      {9, "determinism", 0.0, [&] { return determinism(work); }},
      {10, "ablation plumbing", 0.0, [&] { return ablation_plumbing(work); }},
  };

  bool all = true;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds) {
      v.pass = false;
      v.detail += "; over the " + fmt("%.0f", c.budget_seconds) + " s budget";
    }
    all = all && v.pass;
    std::printf("criterion %d (%s): %s [%.1f s] %s\n", c.id, c.name.c_str(), v.pass ? "PASS" : "FAIL", secs,
                v.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
