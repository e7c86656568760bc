#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"

#include "dira/nn/tensor.hpp"

namespace dira::ckpt {

// On disk: <dir>/manifest.json plus <dir>/arrays/<name>.bin holding raw
// little-endian float32 values in row-major order.
struct Checkpoint {
  std::map<std::string, nn::Tensor<float>> arrays;
  std::size_t epoch = 0;
  int stage = 0;
  std::string config_hash;
  std::string rng_state;
  nlohmann::json metrics = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();  // model description, optimizer step counts, queue cursor
};

// Writes into a sibling temp directory and renames it over `dir`.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// FNV-1a of the compact JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);

}  // namespace dira::ckpt
