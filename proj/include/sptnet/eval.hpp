#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "sptnet/core.hpp"
#include "sptnet/data.hpp"

namespace sptnet {

struct PredictionSet {
  std::vector<int> predicted;  // cluster id in [0, K_pred)
  std::vector<int> truth;      // hidden label in [0, K_true)
  std::vector<bool> is_old;
};

struct AccReport {
  double acc_all = 0.0;
  std::optional<double> acc_old;  // nullopt when the subset is empty
  std::optional<double> acc_new;
  std::int64_t total = 0, count_old = 0, count_new = 0;
  std::int64_t matched_all = 0, matched_old = 0, matched_new = 0;
  std::vector<int> matching;  // predicted cluster -> true class, -1 if matched to padding
};

/// Maximum-weight one-to-one assignment of rows to columns (rectangular input is zero-padded).
/// Returns the column for each row, -1 when the row is matched to padding.
std::vector<int> max_weight_assignment(const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& weights);

/// Clustering accuracy under one global optimal matching; Old/New accuracies reuse that matching.
AccReport hungarian_acc(const PredictionSet& preds, int k_pred, int k_true);

/// Argmax over prototype cosines; ties go to the lowest index.
template <typename Scalar>
std::vector<int> assign_clusters(const Matrix<Scalar>& logits);

PredictionSet make_prediction_set(const std::vector<int>& predicted, const HiddenLabels& hidden);

}  // namespace sptnet
