#include "sptnet/losses.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

namespace sptnet {

void LossConfig::validate() const {
  std::ostringstream os;
  if (!(lambda >= 0.0 && lambda <= 1.0)) os << "lambda must lie in [0, 1]; ";
  if (!(epsilon >= 0.0)) os << "epsilon must be >= 0; ";
  if (!(tau_u > 0.0 && tau_c > 0.0 && tau_s > 0.0 && tau_t > 0.0)) os << "temperatures must be > 0; ";
  if (!os.str().empty()) throw ConfigError("loss config: " + os.str());
}

template <typename Scalar>
void ViewBatch<Scalar>::validate() const {
  const Index b = features_a.rows();
  if (features_b.rows() != b || logits_a.rows() != b || logits_b.rows() != b ||
      static_cast<Index>(labels.size()) != b)
    throw ShapeError("view batch: row counts differ between views");
  if (features_a.cols() != features_b.cols() || logits_a.cols() != logits_b.cols())
    throw ShapeError("view batch: column counts differ between views");
}

namespace {

template <typename Scalar>
Scalar unit_tolerance() {
  return std::max(Scalar(1e-6), Scalar(100) * std::numeric_limits<Scalar>::epsilon());
}

template <typename Scalar>
void require_unit_rows(const Matrix<Scalar>& f, const char* what) {
  const Scalar tol = unit_tolerance<Scalar>();
  for (Index r = 0; r < f.rows(); ++r)
    if (std::abs(f.row(r).norm() - Scalar(1)) > tol)
      throw std::invalid_argument(std::string(what) + ": features must be l2-normalised");
}

template <typename Scalar>
Matrix<Scalar> stack(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  Matrix<Scalar> s(a.rows() + b.rows(), a.cols());
  s << a, b;
  return s;
}

template <typename Scalar>
RowVector<Scalar> softmax(const Eigen::Ref<const RowVector<Scalar>>& z) {
  const Scalar mx = z.maxCoeff();
  RowVector<Scalar> e = (z.array() - mx).exp();
  return e / e.sum();
}

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& z) {
  Matrix<Scalar> out(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) out.row(r) = softmax<Scalar>(z.row(r));
  return out;
}

template <typename Scalar>
LossTerm<Scalar> split(Scalar value, const Matrix<Scalar>& grad, Index b) {
  LossTerm<Scalar> t;
  t.value = value;
  t.grad_a = grad.topRows(b);
  t.grad_b = grad.bottomRows(b);
  return t;
}

template <typename Scalar>
LossTerm<Scalar> zero_term(Index rows_a, Index rows_b, Index cols) {
  LossTerm<Scalar> t;
  t.grad_a = Matrix<Scalar>::Zero(rows_a, cols);
  t.grad_b = Matrix<Scalar>::Zero(rows_b, cols);
  return t;
}

}  // namespace

template <typename Scalar>
LossTerm<Scalar> info_nce(const Matrix<Scalar>& features_a, const Matrix<Scalar>& features_b, Scalar tau,
                          NceDenominator denominator) {
  const Index b = features_a.rows();
  if (features_b.rows() != b || features_a.cols() != features_b.cols())
    throw ShapeError("info_nce: view shapes differ");
  if (b < 2) throw std::invalid_argument("info_nce: batch needs at least two instances for negatives");
  require_unit_rows(features_a, "info_nce");
  require_unit_rows(features_b, "info_nce");

  const Matrix<Scalar> f = stack(features_a, features_b);
  const Index rows = 2 * b;
  const Matrix<Scalar> sim = (f * f.transpose()) / tau;
  Matrix<Scalar> dsim = Matrix<Scalar>::Zero(rows, rows);
  Scalar total = 0;
  for (Index i = 0; i < rows; ++i) {
    const Index pos = i < b ? i + b : i - b;
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < rows; ++j) {
      if (j == i || (denominator == NceDenominator::paper_verbatim && j == pos)) continue;
      mx = std::max(mx, sim(i, j));
    }
    Scalar z = 0;
    for (Index j = 0; j < rows; ++j) {
      if (j == i || (denominator == NceDenominator::paper_verbatim && j == pos)) continue;
      z += std::exp(sim(i, j) - mx);
    }
    total += -sim(i, pos) + mx + std::log(z);
    for (Index j = 0; j < rows; ++j) {
      if (j == i || (denominator == NceDenominator::paper_verbatim && j == pos)) continue;
      dsim(i, j) += std::exp(sim(i, j) - mx) / z;
    }
    dsim(i, pos) -= Scalar(1);
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(rows);
  const Matrix<Scalar> grad = ((dsim + dsim.transpose()) * f) * (inv / tau);
  return split<Scalar>(total * inv, grad, b);
}

template <typename Scalar>
LossTerm<Scalar> sup_con(const Matrix<Scalar>& features_a, const Matrix<Scalar>& features_b,
                         std::span<const int> labels, Scalar tau) {
  const Index b = features_a.rows();
  if (features_b.rows() != b || static_cast<Index>(labels.size()) != b)
    throw ShapeError("sup_con: view or label counts differ");
  require_unit_rows(features_a, "sup_con");
  require_unit_rows(features_b, "sup_con");

  LossTerm<Scalar> out = zero_term<Scalar>(b, b, features_a.cols());
  std::vector<Index> rows;  // indices into the stacked 2B rows
  std::map<int, int> class_count;
  for (Index i = 0; i < b; ++i)
    if (labels[static_cast<std::size_t>(i)] != kUnlabelled) {
      rows.push_back(i);
      ++class_count[labels[static_cast<std::size_t>(i)]];
    }
  bool has_pair = false;
  for (const auto& [cls, count] : class_count) has_pair = has_pair || count >= 2;
  if (!has_pair) {
    out.degenerate = true;
    return out;
  }
  const std::size_t half = rows.size();
  for (std::size_t k = 0; k < half; ++k) rows.push_back(rows[k] + b);
  auto label_of = [&](Index stacked) { return labels[static_cast<std::size_t>(stacked % b)]; };

  const Matrix<Scalar> f = stack(features_a, features_b);
  const Index m = static_cast<Index>(rows.size());
  Matrix<Scalar> sub(m, f.cols());
  for (Index r = 0; r < m; ++r) sub.row(r) = f.row(rows[static_cast<std::size_t>(r)]);
  const Matrix<Scalar> sim = (sub * sub.transpose()) / tau;
  Matrix<Scalar> dsim = Matrix<Scalar>::Zero(m, m);
  Scalar total = 0;
  Index anchors = 0;
  for (Index i = 0; i < m; ++i) {
    const int yi = label_of(rows[static_cast<std::size_t>(i)]);
    Index npos = 0;
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < m; ++j) {
      if (j == i) continue;
      mx = std::max(mx, sim(i, j));
      if (label_of(rows[static_cast<std::size_t>(j)]) == yi) ++npos;
    }
    if (npos == 0) continue;
    Scalar z = 0;
    for (Index j = 0; j < m; ++j)
      if (j != i) z += std::exp(sim(i, j) - mx);
    const Scalar lse = mx + std::log(z);
    const Scalar inv_pos = Scalar(1) / static_cast<Scalar>(npos);
    Scalar li = 0;
    for (Index j = 0; j < m; ++j) {
      if (j == i) continue;
      dsim(i, j) += std::exp(sim(i, j) - mx) / z;
      if (label_of(rows[static_cast<std::size_t>(j)]) == yi) {
        li -= (sim(i, j) - lse) * inv_pos;
        dsim(i, j) -= inv_pos;
      }
    }
    total += li;
    ++anchors;
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(anchors);
  const Matrix<Scalar> dsub = ((dsim + dsim.transpose()) * sub) * (inv / tau);
  for (Index r = 0; r < m; ++r) {
    const Index s = rows[static_cast<std::size_t>(r)];
    if (s < b)
      out.grad_a.row(s) += dsub.row(r);
    else
      out.grad_b.row(s - b) += dsub.row(r);
  }
  out.value = total * inv;
  return out;
}

template <typename Scalar>
LossTerm<Scalar> cls_sup(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, std::span<const int> labels,
                         Scalar tau_s) {
  const Index b = logits_a.rows(), classes = logits_a.cols();
  if (logits_b.rows() != b || logits_b.cols() != classes || static_cast<Index>(labels.size()) != b)
    throw ShapeError("cls_sup: view or label counts differ");
  LossTerm<Scalar> out = zero_term<Scalar>(b, b, classes);
  Index count = 0;
  for (int y : labels) {
    if (y == kUnlabelled) continue;
    if (y < 0 || y >= classes) throw std::out_of_range("cls_sup: label outside the prototype range");
    count += 2;
  }
  if (count == 0) {
    out.degenerate = true;
    return out;
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(count);
  Scalar total = 0;
  for (Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y == kUnlabelled) continue;
    for (int view = 0; view < 2; ++view) {
      const Matrix<Scalar>& z = view == 0 ? logits_a : logits_b;
      Matrix<Scalar>& g = view == 0 ? out.grad_a : out.grad_b;
      const RowVector<Scalar> scaled = z.row(i) / tau_s;
      const Scalar mx = scaled.maxCoeff();
      const Scalar lse = mx + std::log((scaled.array() - mx).exp().sum());
      total += lse - scaled(y);
      RowVector<Scalar> p = (scaled.array() - lse).exp();
      p(y) -= Scalar(1);
      g.row(i) = p * (inv / tau_s);
    }
  }
  out.value = total * inv;
  return out;
}

template <typename Scalar>
TeacherTargets<Scalar> teacher_targets(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, Scalar tau_t) {
  return {softmax_rows<Scalar>(logits_a / tau_t), softmax_rows<Scalar>(logits_b / tau_t)};
}

template <typename Scalar>
LossTerm<Scalar> cls_selfdistill(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, Scalar tau_s,
                                 Scalar tau_t, const TeacherTargets<Scalar>* fixed) {
  const Index b = logits_a.rows(), classes = logits_a.cols();
  if (logits_b.rows() != b || logits_b.cols() != classes) throw ShapeError("cls_selfdistill: view shapes differ");
  if (b == 0) throw ShapeError("cls_selfdistill: empty batch");
  const TeacherTargets<Scalar> computed = fixed ? TeacherTargets<Scalar>{} : teacher_targets(logits_a, logits_b, tau_t);
  const TeacherTargets<Scalar>& teacher = fixed ? *fixed : computed;
  if (teacher.from_a.rows() != b || teacher.from_b.rows() != b || teacher.from_a.cols() != classes)
    throw ShapeError("cls_selfdistill: teacher target shape mismatch");

  LossTerm<Scalar> out = zero_term<Scalar>(b, b, classes);
  const Scalar scale = Scalar(0.5) / static_cast<Scalar>(b);
  Scalar total = 0;
  for (int view = 0; view < 2; ++view) {
    const Matrix<Scalar>& student = view == 0 ? logits_a : logits_b;
    const Matrix<Scalar>& target = view == 0 ? teacher.from_b : teacher.from_a;
    Matrix<Scalar>& g = view == 0 ? out.grad_a : out.grad_b;
    for (Index i = 0; i < b; ++i) {
      const RowVector<Scalar> scaled = student.row(i) / tau_s;
      const Scalar mx = scaled.maxCoeff();
      const Scalar lse = mx + std::log((scaled.array() - mx).exp().sum());
      const RowVector<Scalar> logp = scaled.array() - lse;
      total -= target.row(i).dot(logp);
      g.row(i) = (logp.array().exp().matrix() - target.row(i)) * (scale / tau_s);
    }
  }
  out.value = total * scale;
  return out;
}

template <typename Scalar>
LossTerm<Scalar> mean_entropy(const Matrix<Scalar>& logits_a, const Matrix<Scalar>& logits_b, Scalar tau_s) {
  const Index b = logits_a.rows(), classes = logits_a.cols();
  if (logits_b.rows() != b || logits_b.cols() != classes) throw ShapeError("mean_entropy: view shapes differ");
  if (b == 0) throw ShapeError("mean_entropy: empty batch");
  const Matrix<Scalar> p = softmax_rows<Scalar>(stack(logits_a, logits_b) / tau_s);
  const RowVector<Scalar> mean = p.colwise().mean();
  Scalar entropy = 0;
  RowVector<Scalar> dmean(classes);
  for (Index k = 0; k < classes; ++k) {
    const Scalar pk = mean(k);
    if (pk > 0) entropy -= pk * std::log(pk);
    dmean(k) = -(std::log(std::max(pk, std::numeric_limits<Scalar>::min())) + Scalar(1));
  }
  const Scalar inv = Scalar(1) / (static_cast<Scalar>(p.rows()) * tau_s);
  Matrix<Scalar> grad(p.rows(), classes);
  for (Index r = 0; r < p.rows(); ++r) {
    const Scalar inner = p.row(r).dot(dmean);
    grad.row(r) = (p.row(r).array() * (dmean.array() - inner)).matrix() * inv;
  }
  return split<Scalar>(std::max(entropy, Scalar(0)), grad, b);
}

template <typename Scalar>
std::vector<std::pair<std::string, double>> LossBreakdown<Scalar>::terms() const {
  return {{"total", static_cast<double>(total)},     {"nce_un", static_cast<double>(nce_un)},
          {"cls_un", static_cast<double>(cls_un)},   {"nce_sup", static_cast<double>(nce_sup)},
          {"cls_sup", static_cast<double>(cls_sup)}, {"entropy", static_cast<double>(entropy)}};
}

template <typename Scalar>
LossBreakdown<Scalar> total_loss(const ViewBatch<Scalar>& batch, const LossConfig& config,
                                 const TeacherTargets<Scalar>* fixed_teacher) {
  batch.validate();
  config.validate();
  const auto lam = static_cast<Scalar>(config.lambda);
  const auto eps = static_cast<Scalar>(config.epsilon);
  const auto un = Scalar(1) - lam;

  const LossTerm<Scalar> nce = info_nce(batch.features_a, batch.features_b, static_cast<Scalar>(config.tau_u),
                                        config.denominator);
  const LossTerm<Scalar> distill = cls_selfdistill(batch.logits_a, batch.logits_b, static_cast<Scalar>(config.tau_s),
                                                   static_cast<Scalar>(config.tau_t), fixed_teacher);
  const LossTerm<Scalar> supcon =
      sup_con(batch.features_a, batch.features_b, std::span<const int>(batch.labels), static_cast<Scalar>(config.tau_c));
  const LossTerm<Scalar> ce =
      cls_sup(batch.logits_a, batch.logits_b, std::span<const int>(batch.labels), static_cast<Scalar>(config.tau_s));
  const LossTerm<Scalar> ent = mean_entropy(batch.logits_a, batch.logits_b, static_cast<Scalar>(config.tau_s));

  LossBreakdown<Scalar> out;
  out.nce_un = nce.value;
  out.cls_un = distill.value;
  out.nce_sup = supcon.value;
  out.cls_sup = ce.value;
  out.entropy = ent.value;
  out.sup_nce_degenerate = supcon.degenerate;
  out.cls_sup_degenerate = ce.degenerate;
  out.total = un * (nce.value + distill.value) + lam * (supcon.value + ce.value) - eps * ent.value;
  out.d_features_a = un * nce.grad_a + lam * supcon.grad_a;
  out.d_features_b = un * nce.grad_b + lam * supcon.grad_b;
  out.d_logits_a = un * distill.grad_a + lam * ce.grad_a - eps * ent.grad_a;
  out.d_logits_b = un * distill.grad_b + lam * ce.grad_b - eps * ent.grad_b;
  return out;
}

#define SPTNET_INSTANTIATE(S)                                                                                     \
  template struct ViewBatch<S>;                                                                                 \
  template struct LossBreakdown<S>;                                                                             \
  template LossTerm<S> info_nce<S>(const Matrix<S>&, const Matrix<S>&, S, NceDenominator);                      \
  template LossTerm<S> sup_con<S>(const Matrix<S>&, const Matrix<S>&, std::span<const int>, S);                 \
  template LossTerm<S> cls_sup<S>(const Matrix<S>&, const Matrix<S>&, std::span<const int>, S);                 \
  template TeacherTargets<S> teacher_targets<S>(const Matrix<S>&, const Matrix<S>&, S);                         \
  template LossTerm<S> cls_selfdistill<S>(const Matrix<S>&, const Matrix<S>&, S, S, const TeacherTargets<S>*);  \
  template LossTerm<S> mean_entropy<S>(const Matrix<S>&, const Matrix<S>&, S);                                  \
  template LossBreakdown<S> total_loss<S>(const ViewBatch<S>&, const LossConfig&, const TeacherTargets<S>*);

SPTNET_INSTANTIATE(float)
SPTNET_INSTANTIATE(double)
#undef SPTNET_INSTANTIATE

}  // namespace sptnet
