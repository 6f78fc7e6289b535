#pragma once

// Independent reference implementations and helpers shared by the unit tests and the acceptance binary.
// The oracles materialise every quantity explicitly and share no code with the library under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "sptnet/core.hpp"
#include "sptnet/schedule.hpp"

namespace oracle {

using Mat = sptnet::Matrix<double>;

inline Mat random_unit_rows(sptnet::Rng& rng, sptnet::Index rows, sptnet::Index cols) {
  Mat m(rows, cols);
  for (sptnet::Index r = 0; r < rows; ++r) {
    double norm = 0;
    for (sptnet::Index c = 0; c < cols; ++c) {
      m(r, c) = rng.normal();
      norm += m(r, c) * m(r, c);
    }
    for (sptnet::Index c = 0; c < cols; ++c) m(r, c) /= std::sqrt(norm);
  }
  return m;
}

inline Mat random_matrix(sptnet::Rng& rng, sptnet::Index rows, sptnet::Index cols, double lo, double hi) {
  Mat m(rows, cols);
  for (sptnet::Index r = 0; r < rows; ++r)
    for (sptnet::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(lo, hi);
  return m;
}

// Rows of view a then view b.
inline std::vector<std::vector<double>> rows_of(const Mat& a, const Mat& b) {
  std::vector<std::vector<double>> out;
  for (const Mat* m : {&a, &b})
    for (sptnet::Index r = 0; r < m->rows(); ++r) {
      std::vector<double> row;
      for (sptnet::Index c = 0; c < m->cols(); ++c) row.push_back((*m)(r, c));
      out.push_back(row);
    }
  return out;
}

inline double dot(const std::vector<double>& x, const std::vector<double>& y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

inline std::vector<double> softmax(const std::vector<double>& z, double tau) {
  std::vector<double> e;
  double sum = 0;
  for (double v : z) {
    e.push_back(std::exp(v / tau));
    sum += e.back();
  }
  for (double& v : e) v /= sum;
  return e;
}

inline double info_nce(const Mat& a, const Mat& b, double tau, bool negatives_only = false) {
  const auto f = rows_of(a, b);
  const std::size_t n = f.size(), half = n / 2;
  std::vector<std::vector<double>> sim(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sim[i][j] = dot(f[i], f[j]);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = (i + half) % n;
    double denom = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && !(negatives_only && j == pos)) denom += std::exp(sim[i][j] / tau);
    total += -std::log(std::exp(sim[i][pos] / tau) / denom);
  }
  return total / static_cast<double>(n);
}

inline double sup_con(const Mat& a, const Mat& b, const std::vector<int>& labels, double tau, bool* degenerate) {
  const auto f = rows_of(a, b);
  std::vector<std::size_t> rows;
  std::vector<int> lab;
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] != sptnet::kUnlabelled) {
        rows.push_back(v * labels.size() + i);
        lab.push_back(labels[i]);
      }
  double total = 0;
  int anchors = 0;
  bool cross_instance_pair = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double denom = 0;
    std::vector<std::size_t> positives;
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (j == i) continue;
      denom += std::exp(dot(f[rows[i]], f[rows[j]]) / tau);
      if (lab[j] == lab[i]) {
        positives.push_back(j);
        if (rows[j] % labels.size() != rows[i] % labels.size()) cross_instance_pair = true;
      }
    }
    if (positives.empty()) continue;
    double li = 0;
    for (std::size_t p : positives) li += -std::log(std::exp(dot(f[rows[i]], f[rows[p]]) / tau) / denom);
    total += li / static_cast<double>(positives.size());
    ++anchors;
  }
  *degenerate = !cross_instance_pair;
  return cross_instance_pair ? total / anchors : 0.0;
}

inline double cls_sup(const Mat& la, const Mat& lb, const std::vector<int>& labels, double tau) {
  const auto z = rows_of(la, lb);
  double total = 0;
  int count = 0;
  for (std::size_t r = 0; r < z.size(); ++r) {
    const int y = labels[r % labels.size()];
    if (y == sptnet::kUnlabelled) continue;
    total += -std::log(softmax(z[r], tau)[static_cast<std::size_t>(y)]);
    ++count;
  }
  return count == 0 ? 0.0 : total / count;
}

inline double selfdistill(const Mat& la, const Mat& lb, double tau_s, double tau_t) {
  const auto z = rows_of(la, lb);
  const std::size_t b = z.size() / 2;
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    for (int swap = 0; swap < 2; ++swap) {
      const auto& student = z[swap ? b + i : i];
      const auto& teacher = z[swap ? i : b + i];
      const auto q = softmax(teacher, tau_t);
      const auto p = softmax(student, tau_s);
      for (std::size_t k = 0; k < p.size(); ++k) total += -q[k] * std::log(p[k]);
    }
  }
  return total / (2.0 * static_cast<double>(b));
}

inline double mean_entropy(const Mat& la, const Mat& lb, double tau) {
  const auto z = rows_of(la, lb);
  std::vector<double> mean(z.front().size(), 0.0);
  for (const auto& row : z) {
    const auto p = softmax(row, tau);
    for (std::size_t k = 0; k < p.size(); ++k) mean[k] += p[k] / static_cast<double>(z.size());
  }
  double h = 0;
  for (double p : mean)
    if (p > 0) h -= p * std::log(p);
  return h;
}

// Best accuracy over every one-to-one map from predicted ids to true ids.
inline double brute_force_acc(const std::vector<int>& pred, const std::vector<int>& truth, int k_pred, int k_true) {
  const int k = std::max(k_pred, k_true);
  std::vector<int> perm(static_cast<std::size_t>(k));
  std::iota(perm.begin(), perm.end(), 0);
  std::int64_t best = 0;
  do {
    std::int64_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += perm[static_cast<std::size_t>(pred[i])] == truth[i];
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return static_cast<double>(best) / static_cast<double>(pred.size());
}

inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Named pointers to every tensor of a parameter set.
template <typename Params>
std::vector<std::pair<std::string, Mat*>> tensors(Params& p) {
  std::vector<std::pair<std::string, Mat*>> out;
  p.visit([&](const std::string& name, Mat& t) { out.emplace_back(name, &t); });
  return out;
}

struct GradCheck {
  std::string tensor;
  int checked = 0;
  double worst = 0.0;
};

// Central differences of `loss` on up to `samples` coordinates of `param`, compared with `analytic`.
inline GradCheck check_tensor(const std::string& name, Mat& param, const Mat& analytic,
                              const std::function<double()>& loss, int samples, sptnet::Rng& rng, double step,
                              double floor) {
  GradCheck out{name, 0, 0.0};
  const auto size = static_cast<std::uint64_t>(param.size());
  const int count = static_cast<int>(std::min<std::uint64_t>(size, static_cast<std::uint64_t>(samples)));
  for (int s = 0; s < count; ++s) {
    const auto idx = static_cast<sptnet::Index>(size <= static_cast<std::uint64_t>(samples) ? s : rng.below(size));
    double& x = param.data()[idx];
    const double saved = x;
    x = saved + step;
    const double up = loss();
    x = saved - step;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2 * step);
    out.worst = std::max(out.worst, relative_error(numeric, analytic.data()[idx], floor));
    ++out.checked;
  }
  return out;
}

}  // namespace oracle
