#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>

#include "uwseg/model.hpp"
#include "uwseg/train.hpp"

namespace uwseg {

struct DataConfig {
  /// Dataset root with images/ and masks/; empty selects synthetic scenes.
  std::string root;
  /// Held-out split root for eval; empty reuses `root`.
  std::string val_root;
  /// Palette JSON; empty with synthetic data uses the synthetic palette.
  std::string palette;
  int64_t crop = 128;
  double scale_lo = 0.5;
  double scale_hi = 2.0;
  double hflip = 0.5;
  bool augment = true;
  /// Seed for synthetic scene generation.
  uint64_t seed = 0;
  int64_t synthetic_count = 8;
  int64_t synthetic_size = 128;
};

/// Everything one run needs. Loaded from a JSON file whose sections are
/// model, optim, schedule, data, loss plus a top-level seed.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  uint64_t seed = 0;

  /// Copies `seed` into the model and the batch stream.
  void apply_seed(uint64_t s);
  void validate() const;
};

/// Throws ConfigError naming the key and the expected type, or the unknown key.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);
/// Throws IngestionError when the file cannot be read or parsed.
RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& cfg);

std::string version_string();

/// Written once before training starts; completion goes to a separate file.
struct RunManifest {
  nlohmann::json config;
  uint64_t seed = 0;
  std::string version;
  std::string started;
  std::map<std::string, std::string> outputs;

  nlohmann::json to_json() const;
  /// Refuses to overwrite an existing manifest.
  void write(const std::string& path) const;
};

/// UTC ISO-8601 timestamp.
std::string utc_timestamp();

}  // namespace uwseg
