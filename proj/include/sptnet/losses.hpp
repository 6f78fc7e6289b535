#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sptnet/core.hpp"

namespace sptnet {

enum class NceDenominator {
  standard,        // positive pair included in the denominator
  paper_verbatim,  // negatives only
};

struct LossConfig {
  double lambda = 0.35;
  double epsilon = 1.0;
  double tau_u = 0.07;
  double tau_c = 1.0;
  double tau_s = 0.1;
  double tau_t = 0.07;
  NceDenominator denominator = NceDenominator::standard;

  void validate() const;
};

/// Features and cosine logits of two views of the same B instances.
/// labels[i] is a class id for labelled rows and kUnlabelled otherwise.
template <typename Scalar>
struct ViewBatch {
  Matrix<Scalar> features_a, features_b;  // B x p, unit rows
  Matrix<Scalar> logits_a, logits_b;      // B x |C|, cosines
  std::vector<int> labels;

  Index size() const { return features_a.rows(); }
  void validate() const;
};

/// A loss value with gradients w.r.t. both view inputs.
template <typename Scalar>
struct LossTerm {
  Scalar value = 0;
  Matrix<Scalar> grad_a, grad_b;
  bool degenerate = false;
};

template <typename Scalar>
LossTerm<Scalar> info_nce(const Matrix<Scalar>& features_a, const Matrix<Scalar>& features_b, Scalar tau,
                          NceDenominator denominator = NceDenominator::standard);

/// Supervised contrastive loss over labelled rows of both views. Flags the batch degenerate (value 0) when
/// no two labelled instances share a class.
template <typename Scalar>
LossTerm<Scalar> sup_con(const Matrix<Scalar>& features_a, const Matrix<Scalar>& features_b,
                         std::span<const int> labels, Scalar tau);

/// Cosine-softmax cross-entropy on labelled rows of both views.
template <typename Scalar>
LossTerm<Scalar> cls_sup(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, std::span<const int> labels,
                         Scalar tau_s);

/// Sharpened teacher targets (rows of softmax(cos/tau_t)) of each view, treated as constants.
template <typename Scalar>
struct TeacherTargets {
  Matrix<Scalar> from_a, from_b;
};

template <typename Scalar>
TeacherTargets<Scalar> teacher_targets(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, Scalar tau_t);

/// Symmetric self-distillation: student of view a against teacher of view b, averaged with the swap.
/// The teacher branch carries no gradient. Pass fixed targets to evaluate the surrogate at a frozen teacher.
template <typename Scalar>
LossTerm<Scalar> cls_selfdistill(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, Scalar tau_s,
                                 Scalar tau_t, const TeacherTargets<Scalar>* fixed = nullptr);

/// Entropy of the mean prediction over all rows of both views. Gradient is of +entropy.
template <typename Scalar>
LossTerm<Scalar> mean_entropy(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, Scalar tau_s);

template <typename Scalar>
struct LossBreakdown {
  Scalar total = 0;
  Scalar nce_un = 0, cls_un = 0, nce_sup = 0, cls_sup = 0, entropy = 0;
  bool sup_nce_degenerate = false;
  bool cls_sup_degenerate = false;
  Matrix<Scalar> d_features_a, d_features_b, d_logits_a, d_logits_b;

  std::vector<std::pair<std::string, double>> terms() const;
};

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const ViewBatch<Scalar>& batch, const LossConfig& config,
                                 const TeacherTargets<Scalar>* fixed_teacher = nullptr);

}  // namespace sptnet
