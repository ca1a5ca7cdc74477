#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "ivqa/model.hpp"
#include "ivqa/training.hpp"

namespace ivqa::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerificationFailed = 1;
inline constexpr int kExitUsage = 2;

/// Model, training and path settings for one run. Flat key=value view:
/// see config_keys() for the schema.
struct RunConfig {
  std::string preset = "full";
  model::ModelConfig model;
  training::TrainConfig train;
  double init_scale = 0.08;
  int precision = 32;
  std::string data, features, vocab, emb, out;
};

/// "full" keeps the published sizes (H = N_h = 1280, N = 512, k = 36,
/// batch 1000, 14 epochs, lr 9.9e-4 then 9.9e-5 after epoch 5). "desk" is a
/// small CPU configuration whose k and d_v (0) are taken from the features.
RunConfig preset_config(const std::string& name);

/// Known keys in output order.
const std::vector<std::string>& config_keys();

/// Throws ConfigError for unknown keys or unparsable values.
void set_key(RunConfig& cfg, const std::string& key, const std::string& value);
std::string get_key(const RunConfig& cfg, const std::string& key);

struct ConfigEntry {
  std::string key, value;
  std::size_t line = 0;
};

/// Reads a key=value file ('#' starts a comment). Errors carry file:line.
std::vector<ConfigEntry> read_config_file(const std::string& path);

/// Builds a config: the preset (flag, else the file's "preset" key, else
/// "full"), then the file's other keys in order, then `overrides`.
RunConfig resolve_config(const std::string& config_path, const std::string& preset_flag,
                         const std::vector<std::pair<std::string, std::string>>& overrides);
std::string format_config(const RunConfig& cfg);

/// Entry point. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ivqa::cli
