#include <doctest.h>

#include <cmath>

#include "sptnet/losses.hpp"
#include "support.hpp"

using namespace sptnet;
using oracle::Mat;

namespace {

struct RandomBatch {
  Mat fa, fb, la, lb;
  std::vector<int> labels;
};

RandomBatch random_batch(Rng& rng, Index b, Index classes, Index dim, double labelled_fraction = 0.5) {
  RandomBatch r;
  r.fa = oracle::random_unit_rows(rng, b, dim);
  r.fb = oracle::random_unit_rows(rng, b, dim);
  r.la = oracle::random_matrix(rng, b, classes, -1, 1);
  r.lb = oracle::random_matrix(rng, b, classes, -1, 1);
  for (Index i = 0; i < b; ++i)
    r.labels.push_back(rng.uniform() < labelled_fraction ? static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)))
                                                         : kUnlabelled);
  return r;
}

// Orthonormal rows e_0, e_1, ... of length dim.
Mat basis(Index rows, Index dim, Index offset = 0) {
  Mat m = Mat::Zero(rows, dim);
  for (Index r = 0; r < rows; ++r) m(r, r + offset) = 1.0;
  return m;
}

Mat random_rotation(Rng& rng, Index dim) {
  const Mat g = oracle::random_matrix(rng, dim, dim, -1, 1);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return Mat(qr.householderQ());
}

}  // namespace

TEST_CASE("every term matches its brute-force oracle") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const Index b = 2 + static_cast<Index>(rng.below(7));
    const Index classes = 2 + static_cast<Index>(rng.below(4));
    const double tau = rng.uniform(0.05, 1.5), tau2 = rng.uniform(0.05, 1.5);
    RandomBatch r = random_batch(rng, b, classes, 5, 0.7);
    std::span<const int> labels(r.labels);

    CHECK(std::abs(info_nce(r.fa, r.fb, tau).value - oracle::info_nce(r.fa, r.fb, tau)) < 1e-10);
    CHECK(std::abs(info_nce(r.fa, r.fb, tau, NceDenominator::paper_verbatim).value -
                   oracle::info_nce(r.fa, r.fb, tau, true)) < 1e-10);
    bool degenerate = false;
    const double sc = oracle::sup_con(r.fa, r.fb, r.labels, tau, &degenerate);
    const auto term = sup_con(r.fa, r.fb, labels, tau);
    CHECK(term.degenerate == degenerate);
    CHECK(std::abs(term.value - sc) < 1e-10);
    CHECK(std::abs(cls_sup(r.la, r.lb, labels, tau).value - oracle::cls_sup(r.la, r.lb, r.labels, tau)) < 1e-10);
    CHECK(std::abs(cls_selfdistill(r.la, r.lb, tau, tau2).value - oracle::selfdistill(r.la, r.lb, tau, tau2)) < 1e-10);
    CHECK(std::abs(mean_entropy(r.la, r.lb, tau).value - oracle::mean_entropy(r.la, r.lb, tau)) < 1e-10);
  }
}

TEST_CASE("closed-form values") {
  const double ln3 = std::log(3.0);
  SUBCASE("orthogonal features: InfoNCE is the log of the candidate count") {
    for (Index b = 2; b <= 5; ++b) {
      const Mat all = basis(2 * b, 2 * b);
      CHECK(std::abs(info_nce<double>(all.topRows(b), all.bottomRows(b), 1.0).value - std::log(2.0 * b - 1)) < 1e-9);
    }
  }
  SUBCASE("positive similarity 1, negatives -1") {
    Mat a(2, 1), b(2, 1);
    a << 1, -1;
    b << 1, -1;
    // anchor a0: positive b0 (+1), candidates a1 (-1), b1 (-1)
    const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2 * std::exp(-1.0)));
    CHECK(std::abs(info_nce<double>(a, b, 1.0).value - expect) < 1e-12);
    CHECK(expect == doctest::Approx(0.2395).epsilon(1e-3));
  }
  SUBCASE("sup_con with two same-label orthogonal instances") {
    const Mat all = basis(4, 4);
    const std::vector<int> labels = {0, 0};
    const auto t = sup_con<double>(all.topRows(2), all.bottomRows(2), labels, 1.0);
    CHECK_FALSE(t.degenerate);
    CHECK(std::abs(t.value - ln3) < 1e-12);
  }
  SUBCASE("sup_con is degenerate when labels are all distinct") {
    const Mat all = basis(6, 6);
    const std::vector<int> labels = {0, 1, kUnlabelled};
    const auto t = sup_con<double>(all.topRows(3), all.bottomRows(3), labels, 1.0);
    CHECK(t.degenerate);
    CHECK(t.value == 0.0);
    CHECK(t.grad_a.norm() == 0.0);
  }
  SUBCASE("cls_sup aligned prototype and uniform cosines") {
    Mat z(1, 2);
    z << 1, 0;
    const std::vector<int> y = {0};
    CHECK(std::abs(cls_sup<double>(z, z, y, 1.0).value - 0.31326168751822286) < 1e-12);
    for (Index c = 2; c <= 6; ++c) {
      const Mat u = Mat::Constant(3, c, 0.3);
      const std::vector<int> labels = {0, kUnlabelled, static_cast<int>(c - 1)};
      CHECK(std::abs(cls_sup<double>(u, u, labels, 0.1).value - std::log(static_cast<double>(c))) < 1e-9);
    }
  }
  SUBCASE("self-distillation") {
    Rng rng(3);
    const Mat z = oracle::random_matrix(rng, 4, 5, -1, 1);
    const auto p = oracle::softmax({z(0, 0), z(0, 1), z(0, 2), z(0, 3), z(0, 4)}, 0.5);
    double h0 = 0;
    for (double v : p) h0 -= v * std::log(v);
    // identical views and equal temperatures: mean entropy of the rows
    double mean_h = 0;
    for (Index r = 0; r < 4; ++r) {
      const auto q = oracle::softmax({z(r, 0), z(r, 1), z(r, 2), z(r, 3), z(r, 4)}, 0.5);
      for (double v : q) mean_h -= v * std::log(v) / 4;
    }
    CHECK(std::abs(cls_selfdistill<double>(z, z, 0.5, 0.5).value - mean_h) < 1e-12);
    CHECK(h0 > 0);
    // one-hot teacher against a uniform student
    TeacherTargets<double> onehot{Mat::Zero(4, 5), Mat::Zero(4, 5)};
    for (Index r = 0; r < 4; ++r) onehot.from_a(r, r % 5) = onehot.from_b(r, (r + 1) % 5) = 1.0;
    const Mat u = Mat::Constant(4, 5, 0.2);
    CHECK(std::abs(cls_selfdistill<double>(u, u, 0.1, 0.1, &onehot).value - std::log(5.0)) < 1e-12);
  }
  SUBCASE("mean entropy") {
    for (Index c = 2; c <= 6; ++c) {
      const Mat u = Mat::Constant(3, c, -0.4);
      CHECK(std::abs(mean_entropy<double>(u, u, 0.1).value - std::log(static_cast<double>(c))) < 1e-9);
    }
    Mat peaked = Mat::Constant(2, 3, -1.0);
    peaked.col(1).setConstant(1.0);
    CHECK(mean_entropy<double>(peaked, peaked, 1e-3).value < 1e-12);
    Mat two = Mat::Constant(1, 3, -1.0), other = Mat::Constant(1, 3, -1.0);
    two(0, 0) = 1.0;
    other(0, 2) = 1.0;
    CHECK(std::abs(mean_entropy<double>(two, other, 1e-3).value - std::log(2.0)) < 1e-12);
  }
}

TEST_CASE("terms are invariant to rotations and to batch order") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Index b = 3 + static_cast<Index>(rng.below(5));
    RandomBatch r = random_batch(rng, b, 4, 6, 0.8);
    const Mat rot = random_rotation(rng, 6);
    const Mat ra = r.fa * rot, rb = r.fb * rot;
    std::span<const int> labels(r.labels);
    CHECK(std::abs(info_nce(r.fa, r.fb, 0.2).value - info_nce(ra, rb, 0.2).value) < 1e-8);
    CHECK(std::abs(sup_con(r.fa, r.fb, labels, 0.3).value - sup_con(ra, rb, labels, 0.3).value) < 1e-8);

    std::vector<Index> perm(static_cast<std::size_t>(b));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    RandomBatch p = r;
    for (Index i = 0; i < b; ++i) {
      const Index s = perm[static_cast<std::size_t>(i)];
      p.fa.row(i) = r.fa.row(s);
      p.fb.row(i) = r.fb.row(s);
      p.la.row(i) = r.la.row(s);
      p.lb.row(i) = r.lb.row(s);
      p.labels[static_cast<std::size_t>(i)] = r.labels[static_cast<std::size_t>(s)];
    }
    const LossConfig cfg;
    ViewBatch<double> vb{r.fa, r.fb, r.la, r.lb, r.labels}, vp{p.fa, p.fb, p.la, p.lb, p.labels};
    const auto x = total_loss(vb, cfg), y = total_loss(vp, cfg);
    CHECK(std::abs(x.total - y.total) < 1e-10);
    CHECK(std::abs(x.nce_sup - y.nce_sup) < 1e-10);
    CHECK(std::abs(x.entropy - y.entropy) < 1e-10);
  }
}

TEST_CASE("term gradients match central differences") {
  Rng rng(11);
  RandomBatch r = random_batch(rng, 5, 4, 6, 0.8);
  r.labels = {0, 1, 0, kUnlabelled, 1};
  std::span<const int> labels(r.labels);
  const double h = 1e-6;

  // Features move along the tangent of the sphere only, so the unit-norm precondition holds at every probe.
  auto feature_check = [&](auto&& fn, const LossTerm<double>& t) {
    double worst = 0;
    for (int view = 0; view < 2; ++view)
      for (Index i = 0; i < 5; ++i) {
        Mat& f = view == 0 ? r.fa : r.fb;
        const RowVector<double> saved = f.row(i);
        RowVector<double> dir = oracle::random_matrix(rng, 1, 6, -1, 1);
        dir -= dir.dot(saved) * saved;
        dir.normalize();
        auto at = [&](double s) {
          f.row(i) = (saved + s * dir).normalized();
          return fn();
        };
        const double numeric = (at(h) - at(-h)) / (2 * h);
        f.row(i) = saved;
        const double analytic = (view == 0 ? t.grad_a : t.grad_b).row(i).dot(dir);
        worst = std::max(worst, oracle::relative_error(numeric, analytic, 1e-4));
      }
    return worst;
  };
  CHECK(feature_check([&] { return info_nce(r.fa, r.fb, 0.3).value; }, info_nce(r.fa, r.fb, 0.3)) < 1e-5);
  CHECK(feature_check([&] { return info_nce(r.fa, r.fb, 0.3, NceDenominator::paper_verbatim).value; },
                      info_nce(r.fa, r.fb, 0.3, NceDenominator::paper_verbatim)) < 1e-5);
  CHECK(feature_check([&] { return sup_con(r.fa, r.fb, labels, 0.4).value; }, sup_con(r.fa, r.fb, labels, 0.4)) <
        1e-5);

  auto logit_check = [&](auto&& fn, const LossTerm<double>& t) {
    double worst = 0;
    for (int view = 0; view < 2; ++view) {
      Mat& z = view == 0 ? r.la : r.lb;
      const auto res = oracle::check_tensor("logits", z, view == 0 ? t.grad_a : t.grad_b, fn, 40, rng, h, 1e-4);
      worst = std::max(worst, res.worst);
    }
    return worst;
  };
  CHECK(logit_check([&] { return cls_sup(r.la, r.lb, labels, 0.2).value; }, cls_sup(r.la, r.lb, labels, 0.2)) < 1e-5);
  CHECK(logit_check([&] { return mean_entropy(r.la, r.lb, 0.2).value; }, mean_entropy(r.la, r.lb, 0.2)) < 1e-5);
  const TeacherTargets<double> frozen = teacher_targets(r.la, r.lb, 0.1);
  CHECK(logit_check([&] { return cls_selfdistill(r.la, r.lb, 0.2, 0.1, &frozen).value; },
                    cls_selfdistill(r.la, r.lb, 0.2, 0.1)) < 1e-5);
}

TEST_CASE("self-distillation teacher branch carries no gradient") {
  Rng rng(12);
  RandomBatch r = random_batch(rng, 4, 3, 4);
  const TeacherTargets<double> base = teacher_targets(r.la, r.lb, 0.1);
  const auto term = cls_selfdistill(r.la, r.lb, 0.2, 0.1);
  // Moving only the teacher inputs changes the value...
  Mat ta = r.la;
  ta(0, 0) += 0.05;
  const TeacherTargets<double> moved = teacher_targets(ta, r.lb, 0.1);
  const double before = cls_selfdistill(r.la, r.lb, 0.2, 0.1, &base).value;
  const double after = cls_selfdistill(r.la, r.lb, 0.2, 0.1, &moved).value;
  CHECK(before != after);
  // ...but the reported gradient is exactly the student-only gradient at a frozen teacher.
  const auto frozen = cls_selfdistill(r.la, r.lb, 0.2, 0.1, &base);
  CHECK(term.grad_a == frozen.grad_a);
  CHECK(term.grad_b == frozen.grad_b);
  // The full (non-detached) derivative differs, so the detachment is observable.
  const double h = 1e-6;
  Mat up = r.la, down = r.la;
  up(1, 2) += h;
  down(1, 2) -= h;
  const double full = (cls_selfdistill(up, r.lb, 0.2, 0.1).value - cls_selfdistill(down, r.lb, 0.2, 0.1).value) / (2 * h);
  CHECK(std::abs(full - term.grad_a(1, 2)) > 1e-4);
}

TEST_CASE("total loss composition") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    RandomBatch r = random_batch(rng, 6, 4, 5, 0.6);
    ViewBatch<double> vb{r.fa, r.fb, r.la, r.lb, r.labels};
    LossConfig cfg;
    cfg.epsilon = 0.7;
    const auto out = total_loss(vb, cfg);
    bool deg = false;
    const double nce = oracle::info_nce(r.fa, r.fb, cfg.tau_u);
    const double dist = oracle::selfdistill(r.la, r.lb, cfg.tau_s, cfg.tau_t);
    const double sc = oracle::sup_con(r.fa, r.fb, r.labels, cfg.tau_c, &deg);
    const double ce = oracle::cls_sup(r.la, r.lb, r.labels, cfg.tau_s);
    const double ent = oracle::mean_entropy(r.la, r.lb, cfg.tau_s);
    CHECK(std::abs(out.total - (0.65 * (nce + dist) + 0.35 * (sc + ce) - 0.7 * ent)) < 1e-10);
    CHECK(std::abs(out.total - (0.65 * (out.nce_un + out.cls_un) + 0.35 * (out.nce_sup + out.cls_sup) -
                                0.7 * out.entropy)) < 1e-12);
    CHECK(out.entropy >= 0.0);
    CHECK(out.entropy <= std::log(4.0) + 1e-12);

    cfg.lambda = 0.0;
    const auto un = total_loss(vb, cfg);
    CHECK(std::abs(un.total - (un.nce_un + un.cls_un - 0.7 * un.entropy)) < 1e-12);
    cfg.lambda = 1.0;
    cfg.epsilon = 0.0;
    const auto sup = total_loss(vb, cfg);
    CHECK(sup.total == sup.nce_sup + sup.cls_sup);
  }
}

TEST_CASE("loss preconditions") {
  Rng rng(14);
  const Mat one = oracle::random_unit_rows(rng, 1, 4);
  CHECK_THROWS_AS(info_nce<double>(one, one, 0.1), std::invalid_argument);
  Mat bad = oracle::random_unit_rows(rng, 3, 4);
  bad(0, 0) += 0.1;
  CHECK_THROWS_AS(info_nce<double>(bad, bad, 0.1), std::invalid_argument);
  const Mat z = oracle::random_matrix(rng, 2, 3, -1, 1);
  const std::vector<int> labels = {0, 3};
  CHECK_THROWS_AS(cls_sup<double>(z, z, labels, 0.1), std::out_of_range);
  LossConfig cfg;
  cfg.tau_s = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.lambda = 1.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
