#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sptnet/checkpoint.hpp"
#include "sptnet/config.hpp"
#include "sptnet/data.hpp"
#include "sptnet/eval.hpp"
#include "sptnet/schedule.hpp"

namespace sptnet {

/// Dataset and split named by the config: the manifest if set, otherwise the synthetic generator.
StoredDataset load_data(const ExperimentConfig& config);

/// Model geometry follows the data (image size, class count when model.num_prototypes = 0).
void bind_to_data(ExperimentConfig& config, const ConfigValues& values, const Dataset& data);

/// Freshly initialised parameters and zero momentum.
TrainState build_state(const ExperimentConfig& config);

/// Writes the synthetic dataset and its split to `dir`.
void cmd_split(const ConfigValues& values, const std::filesystem::path& dir);

/// Resolved config stored in a checkpoint.
ConfigValues checkpoint_config(const std::filesystem::path& dir);

struct TrainResult {
  std::filesystem::path run_dir;
  History history;
  TrainState state;
};

/// Trains and writes <output_dir>/<id>/{config.txt, metrics.jsonl, checkpoints/epoch_NNNN/}.
/// With `resume`, the state is restored from that checkpoint first.
TrainResult cmd_train(const ConfigValues& values, const std::optional<std::filesystem::path>& resume = std::nullopt,
                      std::ostream* log = nullptr);

std::filesystem::path checkpoint_dir(const std::filesystem::path& run_dir, int epoch);

/// ACC of a checkpoint on D_u of its dataset (or of `manifest` when given).
AccReport cmd_eval(const std::filesystem::path& checkpoint,
                   const std::optional<std::filesystem::path>& manifest = std::nullopt);

/// ACC of a predictions file: one cluster id per line, aligned with the D_u rows of the manifest.
AccReport eval_predictions(const std::filesystem::path& predictions, const std::filesystem::path& manifest);

std::string acc_json(const AccReport& report);

/// Final-layer attention of the first `images` D_u rows as JSON.
std::string cmd_attn(const std::filesystem::path& checkpoint, AttentionQuery query, double top_fraction, int images);

struct ParamReport {
  PromptVariant variant;
  PromptParamCount prompts;
  Index model_trainable = 0;
  Index model_total = 0;

  std::string text() const;
};

ParamReport cmd_count_params(const ConfigValues& values);

}  // namespace sptnet
