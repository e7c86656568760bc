#include "doctest.h"

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "dira_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int dira(const std::string& args) {
  const std::string cmd = std::string("\"") + DIRA_CLI_PATH + "\" " + args + " > \"" +
                          (work() / "last.log").string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string path(const std::string& rel) { return "\"" + (work() / rel).string() + "\""; }

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  return static_cast<std::size_t>(std::count(std::istreambuf_iterator<char>(in), {}, '\n'));
}

void write_config(const fs::path& p) {
  const nlohmann::json c = {
      {"augment", {{"output_size", 16}}},
      {"model",
       {{"stage_channels", {4, 8}}, {"d_y", 8}, {"d_z", 8}, {"proj_hidden", 8}, {"pred_hidden", 4},
        {"adversary_channels", 4}}},
      {"method", {{"queue_size", 16}}},
      {"schedule", {{"batch_size", 16}, {"record_wall_time", false}}}};
  std::ofstream(p) << c.dump(2);
}

}  // namespace

TEST_CASE("datagen writes the requested records") {
  REQUIRE(dira("datagen --seed 3 --n 40 --size 16 --out " + path("data")) == 0);
  const auto m = nlohmann::json::parse(std::ifstream(work() / "data" / "manifest.json"));
  CHECK(m.at("records").size() == 40);
  CHECK(m.at("n_samples") == 40);
}

TEST_CASE("exit codes") {
  CHECK(dira("datagen --seed 3 --n 5 --size 16 --lesion-prob 1.5 --out " + path("bad")) == 2);
  CHECK(dira("datagen --no-such-flag") == 2);
  CHECK(dira("pretrain --dataset " + path("does_not_exist") + " --out " + path("r0")) == 3);
  CHECK(dira("eval --model " + path("no_model") + " --dataset " + path("data")) == 3);
  CHECK(dira("report --ledger " + path("none.csv") + " --out " + path("empty_report")) == 0);
}

TEST_CASE("classwise pretraining needs pseudo-classes") {
  REQUIRE(dira("datagen --seed 4 --n 24 --size 16 --out " + path("nopseudo")) == 0);
  const fs::path mf = work() / "nopseudo" / "manifest.json";
  auto m = nlohmann::json::parse(std::ifstream(mf));
  for (auto& r : m["records"]) r.erase("pseudo_class");
  std::ofstream(mf) << m.dump(2);
  write_config(work() / "tiny.json");
  CHECK(dira("pretrain --config " + path("tiny.json") + " --method classwise --ablation di --epochs 1,0,0 --dataset " +
             path("nopseudo") + " --out " + path("cw") + " --quiet") == 2);
}

TEST_CASE("pretrain, finetune, localize and report end to end") {
  REQUIRE(dira("datagen --seed 5 --n 60 --size 16 --out " + path("e2e")) == 0);
  write_config(work() / "tiny.json");
  REQUIRE(dira("pretrain --config " + path("tiny.json") +
               " --method moco --ablation dira --epochs 1,1,1 --deterministic --quiet --dataset " + path("e2e") +
               " --out " + path("run")) == 0);
  CHECK(line_count(work() / "run" / "metrics.csv") == 4);
  CHECK(dira("finetune --task classification --dataset " + path("e2e") + " --checkpoint " +
             path("run/checkpoints/best") + " --fraction 0.5 --runs 1 --max-epochs 2 --ledger " + path("ledger.csv") +
             " --save-model " + path("cls")) == 0);
  CHECK(line_count(work() / "ledger.csv") == 2);
  CHECK(dira("eval --model " + path("cls") + " --dataset " + path("e2e")) == 0);
  CHECK(dira("localize --model " + path("cls") + " --dataset " + path("e2e") + " --deltas 0.1:0.6:0.1 --out " +
             path("loc.csv")) == 0);
  CHECK(line_count(work() / "loc.csv") == 7);
  CHECK(dira("report --ledger " + path("ledger.csv") + " --localization " + path("loc.csv") + " --out " +
             path("report")) == 0);
  CHECK(fs::exists(work() / "report" / "results.md"));
  CHECK(fs::exists(work() / "report" / "localization.md"));
}
