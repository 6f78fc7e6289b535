#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sptnet/data.hpp"
#include "sptnet/losses.hpp"
#include "sptnet/prompts.hpp"
#include "sptnet/schedule.hpp"
#include "sptnet/vit.hpp"

namespace sptnet {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string doc;
};

/// Every accepted key with its default and a one-line description.
const std::vector<ConfigKey>& config_schema();

/// Flat dotted-key configuration (`prompt.m = 1`). Unknown keys are rejected on insertion.
class ConfigValues {
 public:
  ConfigValues();  // all defaults

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool is_known(const std::string& key) const;

  /// Applies `key = value` lines; `#` starts a comment.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  void merge_file(const std::filesystem::path& path);

  /// Resolved document, one `key = value` per line in schema order.
  std::string dump() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct ExperimentConfig {
  std::string run_id;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;

  std::filesystem::path manifest;  // empty: generate the synthetic dataset
  SyntheticSpec synthetic;
  int num_old = 4;
  double rho = 0.5;
  std::uint64_t split_seed = 0;

  AugmentConfig augment;
  PromptConfig prompt;
  PromptViews views = PromptViews::one;
  TinyViTConfig model;
  LossConfig loss;
  ScheduleConfig schedule;

  int eval_every = 1;
  int checkpoint_every = 50;
  bool log_steps = true;

  std::optional<int> attn_query;  // nullopt: CLS
  double attn_top_fraction = 0.1;
  int attn_images = 4;
};

/// Typed view of the values; throws ConfigError on any invalid field.
ExperimentConfig resolve(const ConfigValues& values);

}  // namespace sptnet
