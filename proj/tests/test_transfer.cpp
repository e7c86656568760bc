#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "dira/checkpoint.hpp"
#include "dira/datasets.hpp"
#include "dira/errors.hpp"
#include "dira/transfer.hpp"

using namespace dira;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path root, data, checkpoint;
};

// One tiny dataset and one short pretraining run, shared by the tests below.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.root = fs::temp_directory_path() / "dira_test_transfer";
    fs::remove_all(x.root);
    x.data = x.root / "data";
    data::PhantomParams pp;
    pp.size = 16;
    data::build_dataset(31, 200, pp, x.data);

    pre::ExperimentConfig c;
    c.dataset_path = x.data.string();
    c.augment.output_size = 16;
    c.model.stage_channels = {4, 8};
    c.model.d_y = 8;
    c.model.d_z = 8;
    c.model.proj_hidden = 8;
    c.model.pred_hidden = 4;
    c.model.adversary_channels = 4;
    c.method.name = pre::Method::barlow;
    c.method.ablation = pre::Ablation::dir;
    c.schedule.stage1_epochs = 1;
    c.schedule.stage2_epochs = 1;
    c.schedule.stage3_epochs = 0;
    c.schedule.batch_size = 16;
    c.schedule.record_wall_time = false;
    c.seed = 2;
    x.checkpoint = pre::run_pretraining(c, x.root / "run").best_checkpoint;
    return x;
  }();
  return f;
}

xfer::DownstreamTask quick_task(xfer::TaskKind kind) {
  xfer::DownstreamTask t;
  t.kind = kind;
  t.dataset_path = fixture().data.string();
  t.label_split.fraction = 0.25;
  t.max_epochs = 2;
  t.patience = 1;
  return t;
}

bool same_bits(const nn::Tensor<float>& a, const nn::Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a[i], &b[i], sizeof(float)) != 0) return false;
  return true;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("AUC examples") {
  const std::vector<int> labels{1, 0, 1, 0};
  CHECK(xfer::metric_auc(std::vector<double>{0.9, 0.8, 0.8, 0.1}, labels) == doctest::Approx(0.875).epsilon(1e-15));
  CHECK(xfer::metric_auc(std::vector<double>{0.9, 0.1, 0.8, 0.2}, labels) == 1.0);
  CHECK(xfer::metric_auc(std::vector<double>{0.1, 0.9, 0.2, 0.8}, labels) == 0.0);
  CHECK_THROWS_AS(xfer::metric_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(xfer::metric_auc(std::vector<double>{0.1}, labels), ShapeError);

  // invariant under strictly monotone transforms
  const std::vector<double> s{0.3, -1.2, 2.5, 0.3, 0.7, -0.1};
  const std::vector<int> l{1, 0, 1, 0, 0, 1};
  std::vector<double> t;
  for (double v : s) t.push_back(std::exp(3.0 * v) - 7.0);
  CHECK(xfer::metric_auc(s, l) == xfer::metric_auc(t, l));
}

TEST_CASE("Dice and IoU examples") {
  using M = std::vector<std::uint8_t>;
  CHECK(xfer::metric_dice(M{1, 1, 0, 0}, M{1, 1, 0, 0}) == 1.0);
  CHECK(xfer::metric_dice(M{1, 1, 0, 0}, M{0, 0, 1, 1}) == 0.0);
  CHECK(xfer::metric_dice(M{1, 1, 0, 0}, M{0, 1, 1, 0}) == 0.5);
  CHECK(xfer::metric_dice(M{0, 0, 0}, M{0, 0, 0}) == 1.0);
  CHECK(xfer::metric_iou_mask(M{1, 0, 1}, M{1, 0, 1}) == 1.0);
  CHECK(xfer::metric_iou_mask(M{1, 0, 0}, M{0, 1, 0}) == 0.0);
  CHECK(xfer::metric_iou_mask(M{1, 1, 0}, M{0, 1, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(xfer::metric_iou_mask(M{0, 0}, M{0, 0}) == 1.0);
  CHECK_THROWS_AS(xfer::metric_dice(M{1}, M{1, 0}), ShapeError);
  CHECK_THROWS_AS(xfer::metric_iou_mask(M{1}, M{1, 0}), ShapeError);
}

TEST_CASE("task defaults and validation") {
  xfer::DownstreamTask t;
  t.kind = xfer::TaskKind::segmentation;
  CHECK(t.effective_metric() == xfer::Metric::dice);
  CHECK(t.effective_optimizer().lr == 1e-3);
  CHECK(t.patience == 10);
  CHECK(t.val_fraction == 0.1);
  t.kind = xfer::TaskKind::classification;
  CHECK(t.effective_metric() == xfer::Metric::auc);
  CHECK(t.effective_optimizer().lr == 2e-4);
  t.metric = xfer::Metric::dice;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK(xfer::FineTuneOptions{}.runs == 10);
}

TEST_CASE("result statistics are recomputed from the runs") {
  xfer::FineTuneResult r;
  r.runs = {0.5, 0.7, 0.9};
  r.recompute();
  CHECK(r.mean == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(r.std == doctest::Approx(0.2).epsilon(1e-14));
  r.runs = {0.4};
  r.recompute();
  CHECK(r.std == 0.0);
}

TEST_CASE("splits honour the label fraction") {
  const auto ds = data::load_dataset(fixture().data);
  auto t = quick_task(xfer::TaskKind::segmentation);
  t.label_split.fraction = 1.0;
  const auto full = xfer::make_splits(ds, t);
  CHECK(full.test.size() == 40);
  CHECK(full.labeled.size() == 160);
  std::set<std::size_t> test(full.test.begin(), full.test.end());
  for (std::size_t i : full.labeled) CHECK(test.count(i) == 0);

  t.label_split.fraction = 0.05;
  const auto few = xfer::make_splits(ds, t);
  CHECK(few.test == full.test);
  CHECK(few.labeled.size() == 8);
  for (std::size_t i : few.labeled) CHECK(test.count(i) == 0);

  t.label_split.fraction = 0.001;
  CHECK_THROWS_AS(xfer::make_splits(ds, t), StratificationError);
}

TEST_CASE("transferred weights are bit-exact") {
  const auto ck = ckpt::load_checkpoint(fixture().checkpoint);
  const auto seg = xfer::init_from_checkpoint(fixture().checkpoint, xfer::TaskKind::segmentation, {}, 0, 1);
  std::size_t encoder = 0, decoder = 0;
  for (const auto& p : seg.params()) {
    const bool enc = p.name.rfind("encoder.", 0) == 0, dec = p.name.rfind("decoder.", 0) == 0;
    if (!enc && !dec) continue;
    REQUIRE(ck.arrays.count(p.name));
    CHECK(same_bits(p.var.value(), ck.arrays.at(p.name)));
    (enc ? encoder : decoder)++;
  }
  CHECK(encoder > 0);
  CHECK(decoder > 0);

  const auto cls = xfer::init_from_checkpoint(fixture().checkpoint, xfer::TaskKind::classification, {}, 0, 1);
  for (const auto& p : cls.params()) CHECK(p.name.rfind("decoder.", 0) != 0);

  // probe forward through both encoders
  data::PhantomParams pp;
  pp.size = 16;
  std::vector<Image> probe;
  for (std::uint64_t s = 0; s < 3; ++s) probe.push_back(data::generate_phantom(900 + s, pp).image);
  const nn::Var<float> x(to_batch<float>(probe));
  CHECK(same_bits(seg.encoder(x).y.value(), cls.encoder(x).y.value()));

  // every trainable parameter, head included, receives a gradient
  const auto loss = nn::mean(seg.logits(x));
  loss.backward();
  for (const auto& p : seg.params()) CHECK(p.var.has_grad());
}

TEST_CASE("shape mismatches are reported") {
  auto ck = ckpt::load_checkpoint(fixture().checkpoint);
  ck.arrays["encoder.stage0.weight"] = nn::Tensor<float>({3});
  const fs::path bad = fixture().root / "bad_ckpt";
  ckpt::save_checkpoint(bad, ck);
  CHECK_THROWS_AS(xfer::init_from_checkpoint(bad, xfer::TaskKind::classification, {}, 0, 1), IncompatibilityError);
}

TEST_CASE("fine-tuning is deterministic and records every run") {
  auto t = quick_task(xfer::TaskKind::segmentation);
  xfer::FineTuneOptions o;
  o.runs = 2;
  o.seed = 4;
  o.checkpoint = fixture().checkpoint;
  o.save_model = fixture().root / "seg_model";
  const auto a = xfer::finetune(t, o);
  o.save_model.reset();
  const auto b = xfer::finetune(t, o);
  CHECK(a.runs.size() == 2);
  CHECK(a.runs == b.runs);
  CHECK(a.method == "barlow-dir");
  for (double v : a.runs) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // the saved run-0 model reproduces its score
  const auto model = xfer::load_task_model(fixture().root / "seg_model");
  const auto ds = data::load_dataset(fixture().data);
  CHECK(xfer::evaluate(model, ds, xfer::make_splits(ds, t).test, xfer::Metric::dice) == a.runs[0]);

  // Dice and IoU of one model obey D = 2J / (1 + J) per image
  const auto test = xfer::make_splits(ds, t).test;
  for (std::size_t i = 0; i < 5; ++i) {
    const std::vector<std::size_t> one{test[i]};
    const double d = xfer::evaluate(model, ds, one, xfer::Metric::dice);
    const double j = xfer::evaluate(model, ds, one, xfer::Metric::iou);
    CHECK(std::abs(d - 2 * j / (1 + j)) < 1e-12);
  }

  auto c = quick_task(xfer::TaskKind::classification);
  xfer::FineTuneOptions oc;
  oc.runs = 1;
  oc.random_config.stage_channels = {4, 8};
  oc.random_config.d_y = 8;
  oc.random_input_size = 16;
  const auto r = xfer::finetune(c, oc);
  CHECK(r.method == "random");
  CHECK(r.metric == "auc");
}

TEST_CASE("ledger rows append under one header") {
  const fs::path ledger = fixture().root / "ledger.csv";
  fs::remove(ledger);
  xfer::FineTuneResult r;
  r.task = "segmentation";
  r.method = "moco-dira";
  r.checkpoint = "ck";
  r.fraction = 0.1;
  r.metric = "dice";
  r.runs = {0.5, 0.75};
  r.recompute();
  xfer::append_ledger(ledger, r);
  xfer::append_ledger(ledger, r);
  const std::string text = slurp(ledger);
  CHECK(text.rfind(xfer::ledger_header(), 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
  CHECK(text.find("0.5;0.75") != std::string::npos);
}
