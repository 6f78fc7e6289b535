#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sptnet/core.hpp"
#include "sptnet/patch_geometry.hpp"

namespace sptnet {

/// Images with their true labels. Row i is image i, channel-major.
struct Dataset {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  Matrix<float> images;
  std::vector<int> labels;

  Index size() const { return images.rows(); }
  ImageBatch<float> gather(const std::vector<std::size_t>& indices) const;
};

struct SyntheticSpec {
  int height = 32;
  int width = 32;
  int num_classes = 8;
  int per_class = 40;
  double noise = 0.3;         // per-pixel Gaussian sigma
  int max_frequency = 3;      // highest spatial frequency in the class templates
  int components = 6;         // sinusoids per channel per template
  double template_rms = 1.0;  // RMS of each template
  std::uint64_t seed = 0;
};

/// Class templates (num_classes x 3HW) of the generator, for oracles.
Matrix<float> synthetic_templates(const SyntheticSpec& spec);

/// Template plus i.i.d. noise, per_class instances per class, ordered by class.
Dataset gen_synthetic(const SyntheticSpec& spec);

/// Unlabelled-side ground truth. Only evaluation code reads this.
struct HiddenLabels {
  std::vector<std::size_t> indices;  // dataset rows of D_u
  std::vector<int> labels;
  std::vector<bool> is_old;
};

/// What the training loop sees: every training row with its label or kUnlabelled.
struct TrainingSet {
  std::vector<std::size_t> indices;
  std::vector<int> labels;
  Index labelled_count() const;
};

struct GCDSplit {
  std::vector<int> old_classes;
  std::vector<int> new_classes;
  double rho = 0.5;
  std::vector<std::pair<std::size_t, int>> labelled;  // (dataset row, label), labels in old_classes
  std::vector<std::size_t> unlabelled;                // dataset rows of D_u
  bool degenerate = false;                            // D_u empty

  TrainingSet training_set() const;
  HiddenLabels hidden_labels(const Dataset& data) const;
};

/// Old classes are ids [0, old_class_count). A rho fraction of each old class is labelled.
GCDSplit make_split(const Dataset& data, int old_class_count, double rho, std::uint64_t seed);

struct AugmentConfig {
  bool enabled = true;
  double crop_min = 0.7;  // area fraction bounds of the kept window
  double crop_max = 1.0;
  bool flip = true;
  double jitter = 0.1;  // per-channel contrast factor drawn from [1 - jitter, 1]

  void validate() const;
};

/// Two independent augmentations of one image, deterministic per (seed, instance, epoch).
/// The crop window keeps its position and everything outside it is set to zero, so the shape never changes.
std::pair<RowVector<float>, RowVector<float>> two_views(const Eigen::Ref<const RowVector<float>>& image, int height,
                                                        int width, const AugmentConfig& config, std::uint64_t seed,
                                                        std::uint64_t instance, std::uint64_t epoch);

/// Mini-batches over a training set (positions into it), each holding labelled and unlabelled rows at the
/// global ratio.
std::vector<std::vector<std::size_t>> stratified_batches(const TrainingSet& set, int batch_size, std::uint64_t seed,
                                                         std::uint64_t epoch);

// ---- on-disk format --------------------------------------------------------------
// <dir>/manifest.txt + <dir>/images.bin (little-endian float32, channel-major rows).

void write_dataset(const std::filesystem::path& dir, const Dataset& data, const GCDSplit& split);

struct StoredDataset {
  Dataset data;
  GCDSplit split;
};

StoredDataset read_dataset(const std::filesystem::path& manifest);

}  // namespace sptnet
