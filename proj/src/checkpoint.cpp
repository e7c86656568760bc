#include "dira/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "dira/errors.hpp"

namespace dira::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw StorageError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw StorageError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void check_name(const std::string& name) {
  if (name.empty() || name.find('/') != std::string::npos || name.find("..") != std::string::npos) {
    throw ParameterError("invalid checkpoint array name '" + name + "'");
  }
}

}  // namespace

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  const fs::path tmp = dir.parent_path() / (dir.filename().string() + ".tmp");
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp / "arrays", ec);
  if (ec) throw StorageError("cannot create " + tmp.string() + ": " + ec.message());

  json arrays = json::array();
  for (const auto& [name, t] : ckpt.arrays) {
    check_name(name);
    const std::string file = "arrays/" + name + ".bin";
    write_file(tmp / file, std::string(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float)));
    arrays.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}});
  }
  json manifest = {
      {"format", "dira-checkpoint-v1"},
      {"dtype", "float32"},
      {"byte_order", "little"},
      {"epoch", ckpt.epoch},
      {"stage", ckpt.stage},
      {"config_hash", ckpt.config_hash},
      {"rng_state", ckpt.rng_state},
      {"metrics", ckpt.metrics},
      {"extra", ckpt.extra},
      {"arrays", arrays},
  };
  write_file(tmp / "manifest.json", manifest.dump(2) + "\n");

  fs::remove_all(dir, ec);
  fs::rename(tmp, dir, ec);
  if (ec) throw StorageError("cannot move checkpoint into " + dir.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw StorageError("no checkpoint manifest at " + manifest_path.string());
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw StorageError("corrupt checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  Checkpoint c;
  try {
    if (m.at("dtype").get<std::string>() != "float32") throw StorageError("unsupported checkpoint dtype");
    c.epoch = m.at("epoch").get<std::size_t>();
    c.stage = m.at("stage").get<int>();
    c.config_hash = m.at("config_hash").get<std::string>();
    c.rng_state = m.at("rng_state").get<std::string>();
    c.metrics = m.at("metrics");
    c.extra = m.at("extra");
    for (const auto& a : m.at("arrays")) {
      const std::string name = a.at("name").get<std::string>();
      check_name(name);
      nn::Tensor<float> t(a.at("shape").get<nn::Shape>());
      const std::string bytes = read_file(dir / a.at("file").get<std::string>());
      if (bytes.size() != t.size() * sizeof(float)) {
        throw StorageError("array " + name + " has " + std::to_string(bytes.size()) + " bytes, expected " +
                           std::to_string(t.size() * sizeof(float)));
      }
      std::memcpy(t.data(), bytes.data(), bytes.size());
      c.arrays.emplace(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw StorageError("malformed checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  return c;
}

}  // namespace dira::ckpt
