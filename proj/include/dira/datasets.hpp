#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dira/geometry.hpp"
#include "dira/image.hpp"

namespace dira::data {

// Parameters of the synthetic anatomy-phantom generator.
struct PhantomParams {
  std::size_t size = 64;
  std::size_t k_templates = 4;
  double lesion_probability = 0.5;
  std::size_t n_lesion_classes = 2;
  double jitter = 1.0;             // scale of per-sample geometric jitter; 0 disables it
  double noise_amplitude = 0.03;   // per-sample fine noise; 0 disables it
  double texture_amplitude = 0.08; // template-fixed multi-scale texture
  double lesion_contrast = 0.28;
  std::string generator_version = "phantom-v1";

  void validate() const;
};

struct SampleRecord {
  std::string image_id;
  Image image;
  bool lesion_present = false;
  std::optional<int> lesion_class;
  std::vector<std::uint8_t> mask;  // [H * W] of {0, 1}; empty when no lesion
  std::vector<BBox> boxes;
  int pseudo_class = 0;
};

SampleRecord generate_phantom(std::uint64_t seed, const PhantomParams& params);

// Manifest entry; the pixels live on disk.
struct RecordMeta {
  std::string image_id;
  std::string image_file;
  std::optional<std::string> mask_file;
  bool lesion_present = false;
  std::optional<int> lesion_class;
  int pseudo_class = 0;
  std::vector<BBox> boxes;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  std::size_t k_templates = 0;
  double lesion_probability = 0.0;
  std::string generator_version;
  PhantomParams params;
  std::vector<RecordMeta> records;
};

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
DatasetManifest read_manifest(const std::filesystem::path& dir);

// Writes images/<id>.png, masks/<id>.png (lesion samples only) and manifest.json under `out_dir`.
DatasetManifest build_dataset(std::uint64_t seed, std::size_t n, const PhantomParams& params,
                              const std::filesystem::path& out_dir);

// A record with its pixels loaded; `mask` is all zeros for lesion-free samples.
struct LoadedSample {
  RecordMeta meta;
  Image image;
  std::vector<std::uint8_t> mask;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<LoadedSample> samples;
};

Dataset load_dataset(const std::filesystem::path& dir);

enum class Stratify { lesion_present, none };

struct SplitSpec {
  double fraction = 1.0;
  std::uint64_t seed = 0;
  Stratify stratify_on = Stratify::lesion_present;
};

// Deterministic subset of max(1, round(fraction * n)) ids, returned in manifest order.
std::vector<std::string> split_label_fraction(std::span<const RecordMeta> records, const SplitSpec& spec);
inline std::vector<std::string> split_label_fraction(const DatasetManifest& manifest, const SplitSpec& spec) {
  return split_label_fraction(std::span<const RecordMeta>(manifest.records), spec);
}

}  // namespace dira::data
