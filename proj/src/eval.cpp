#include "sptnet/eval.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace sptnet {

std::vector<int> max_weight_assignment(const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& weights) {
  const Index rows = weights.rows(), cols = weights.cols();
  const Index n = std::max(rows, cols);
  if (n == 0) return {};
  const std::int64_t top = weights.size() > 0 ? weights.maxCoeff() : 0;
  // Square cost matrix, 1-based, padding cells cost `top` (weight 0).
  auto cost = [&](Index i, Index j) -> std::int64_t {
    return (i <= rows && j <= cols) ? top - weights(i - 1, j - 1) : top;
  };
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  std::vector<std::int64_t> u(static_cast<std::size_t>(n + 1), 0), v(static_cast<std::size_t>(n + 1), 0);
  std::vector<Index> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (Index i = 1; i <= n; ++i) {
    p[0] = i;
    Index j0 = 0;
    std::vector<std::int64_t> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<bool> used(static_cast<std::size_t>(n + 1), false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const Index i0 = p[static_cast<std::size_t>(j0)];
      std::int64_t delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        if (used[uj]) continue;
        const std::int64_t cur = cost(i0, j) - u[static_cast<std::size_t>(i0)] - v[uj];
        if (cur < minv[uj]) {
          minv[uj] = cur;
          way[uj] = j0;
        }
        if (minv[uj] < delta) {
          delta = minv[uj];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        const auto uj = static_cast<std::size_t>(j);
        if (used[uj]) {
          u[static_cast<std::size_t>(p[uj])] += delta;
          v[uj] -= delta;
        } else {
          minv[uj] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const Index j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> match(static_cast<std::size_t>(rows), -1);
  for (Index j = 1; j <= n; ++j) {
    const Index i = p[static_cast<std::size_t>(j)];
    if (i >= 1 && i <= rows && j <= cols) match[static_cast<std::size_t>(i - 1)] = static_cast<int>(j - 1);
  }
  return match;
}

AccReport hungarian_acc(const PredictionSet& preds, int k_pred, int k_true) {
  const std::size_t count = preds.predicted.size();
  if (count == 0) throw std::invalid_argument("hungarian_acc: empty prediction set");
  if (preds.truth.size() != count || preds.is_old.size() != count)
    throw ShapeError("hungarian_acc: prediction, label and membership counts differ");
  if (k_pred < 1 || k_true < 1) throw std::invalid_argument("hungarian_acc: class counts must be positive");
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> contingency =
      Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(k_pred, k_true);
  for (std::size_t i = 0; i < count; ++i) {
    const int p = preds.predicted[i], y = preds.truth[i];
    if (p < 0 || p >= k_pred) throw std::out_of_range("hungarian_acc: predicted id outside [0, K_pred)");
    if (y < 0 || y >= k_true) throw std::out_of_range("hungarian_acc: true label outside [0, K_true)");
    ++contingency(p, y);
  }
  AccReport r;
  r.matching = max_weight_assignment(contingency);
  r.total = static_cast<std::int64_t>(count);
  for (std::size_t i = 0; i < count; ++i) {
    const bool hit = r.matching[static_cast<std::size_t>(preds.predicted[i])] == preds.truth[i];
    if (preds.is_old[i]) {
      ++r.count_old;
      r.matched_old += hit;
    } else {
      ++r.count_new;
      r.matched_new += hit;
    }
  }
  r.matched_all = r.matched_old + r.matched_new;
  r.acc_all = static_cast<double>(r.matched_all) / static_cast<double>(r.total);
  if (r.count_old > 0) r.acc_old = static_cast<double>(r.matched_old) / static_cast<double>(r.count_old);
  if (r.count_new > 0) r.acc_new = static_cast<double>(r.matched_new) / static_cast<double>(r.count_new);
  return r;
}

template <typename Scalar>
std::vector<int> assign_clusters(const Matrix<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()), 0);
  for (Index r = 0; r < logits.rows(); ++r) {
    Index best = 0;
    for (Index k = 1; k < logits.cols(); ++k)
      if (logits(r, k) > logits(r, best)) best = k;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

PredictionSet make_prediction_set(const std::vector<int>& predicted, const HiddenLabels& hidden) {
  if (predicted.size() != hidden.labels.size()) throw ShapeError("prediction count differs from D_u size");
  return {predicted, hidden.labels, hidden.is_old};
}

template std::vector<int> assign_clusters<float>(const Matrix<float>&);
template std::vector<int> assign_clusters<double>(const Matrix<double>&);

}  // namespace sptnet
