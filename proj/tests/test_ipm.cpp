#include <cmath>
#include <random>
#include <sstream>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "mlopt/ipm.hpp"

using namespace mlopt;

namespace {

KktMatrix dense_kkt(const Eigen::MatrixXd& h, const Eigen::MatrixXd& j) {
  KktMatrix k;
  k.n = static_cast<std::size_t>(h.rows());
  k.m = static_cast<std::size_t>(j.rows());
  const auto N = h.rows() + j.rows();
  k.dense_lower = Eigen::MatrixXd::Zero(N, N);
  k.dense_lower.topLeftCorner(h.rows(), h.rows()) = h.triangularView<Eigen::Lower>();
  k.dense_lower.bottomLeftCorner(j.rows(), j.cols()) = j;
  return k;
}

KktMatrix as_sparse(const KktMatrix& d) {
  KktMatrix k = d;
  k.dense = false;
  const auto N = static_cast<Eigen::Index>(d.dim());
  std::vector<Eigen::Triplet<double>> t;
  for (Eigen::Index j = 0; j < N; ++j) {
    t.emplace_back(j, j, d.dense_lower(j, j));
    for (Eigen::Index i = j + 1; i < N; ++i) {
      if (d.dense_lower(i, j) != 0.0) t.emplace_back(i, j, d.dense_lower(i, j));
    }
  }
  k.sparse_lower.resize(N, N);
  k.sparse_lower.setFromTriplets(t.begin(), t.end());
  k.dense_lower.resize(0, 0);
  return k;
}

// min x^2 s.t. x >= 1, written as the row x in [1, inf).
CanonicalModel bound_row_problem() {
  NlpModel m;
  const auto x = m.add_variable(-10.0, 10.0, 3.0);
  m.set_objective(square(m.var(x)));
  m.add_constraint(m.var(x) + 0.0, 1.0, kInf, "row");
  m.seal();
  return canonicalize(m);
}

// min x1 + x2 s.t. x1 x2 = 1, x >= 0.
NlpModel hyperbola_problem() {
  NlpModel m;
  const auto a = m.add_variable(0.0, kInf, 2.0);
  const auto b = m.add_variable(0.0, kInf, 0.7);
  m.set_objective(m.var(a) + m.var(b));
  m.add_constraint(m.var(a) * m.var(b), 1.0, 1.0, "product");
  m.seal();
  return m;
}

// Nonconvex problem with several rows and bounds.
NlpModel rosen_problem(std::size_t n) {
  NlpModel m;
  for (std::size_t i = 0; i < n; ++i) m.add_variable(-2.0, 2.0, -0.5 + 0.1 * static_cast<double>(i));
  Expr obj = m.var(0) * 0.0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    obj = obj + 100.0 * square(m.var(i + 1) - square(m.var(i))) + square(1.0 - m.var(i));
  }
  m.set_objective(obj);
  for (std::size_t i = 0; i + 2 < n; i += 2) {
    m.add_constraint(square(m.var(i)) + m.var(i + 1) - m.var(i + 2), 0.5, 0.5, "link");
  }
  m.seal();
  return m;
}

// Strictly convex objective, one linear row and one convex inequality row.
CanonicalModel convex_problem(std::size_t n) {
  NlpModel m;
  for (std::size_t i = 0; i < n; ++i) m.add_variable(-3.0, 3.0, 0.0);
  Expr obj = m.var(0) * 0.0;
  Expr sum = m.var(0) * 0.0;
  Expr norm = m.var(0) * 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = 1.0 + 0.3 * static_cast<double>(i);
    obj = obj + exp(0.5 * m.var(i)) + square(m.var(i) - c);
    sum = sum + m.var(i);
    norm = norm + square(m.var(i));
  }
  m.set_objective(obj);
  m.add_constraint(sum, 1.0, 1.0, "sum");
  m.add_constraint(norm, -kInf, 2.0, "ball");
  m.seal();
  return canonicalize(m);
}

IpmOptions quiet() {
  IpmOptions o;
  o.max_iter = 500;
  return o;
}

}  // namespace

TEST(Factorization, IdentityInertia) {
  DenseBunchKaufman f;
  ASSERT_TRUE(f.factorize(Eigen::MatrixXd::Identity(3, 3)));
  EXPECT_EQ(f.inertia(), (Inertia{3, 0, 0}));
}

TEST(Factorization, IndefiniteDiagonal) {
  Eigen::MatrixXd a(2, 2);
  a << 1, 0, 0, -1;
  DenseBunchKaufman f;
  f.factorize(a);
  EXPECT_EQ(f.inertia(), (Inertia{1, 1, 0}));
}

TEST(Factorization, SingularMatrixReportsZero) {
  Eigen::MatrixXd a(2, 2);
  a << 1, 1, 1, 1;
  DenseBunchKaufman f;
  f.factorize(a);
  EXPECT_EQ(f.inertia().zero, 1u);
}

TEST(Factorization, InertiaMatchesEigenvalues) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd a(12, 12);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = g(rng);
    a = (a + a.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    Inertia ref;
    for (double ev : es.eigenvalues()) (ev > 0 ? ref.positive : ref.negative)++;
    DenseBunchKaufman f;
    f.factorize(a);
    EXPECT_EQ(f.inertia(), ref);
  }
}

TEST(Factorization, RandomKktResidual) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  Eigen::MatrixXd h(14, 14), j(6, 14);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < j.size(); ++i) j.data()[i] = g(rng);
  h = (h * h.transpose()).eval();
  const auto k = dense_kkt(h, j);
  Eigen::VectorXd rhs(20);
  for (auto& v : rhs) v = g(rng);
  for (int path = 0; path < 2; ++path) {
    std::unique_ptr<SymmetricFactor> f;
    const KktMatrix kk = path ? as_sparse(k) : k;
    if (path) {
      f = std::make_unique<SparseLdlt>();
    } else {
      f = std::make_unique<DenseBunchKaufman>();
    }
    // The unpivoted sparse factorization needs a quasi-definite matrix.
    const double dc = path ? 1e-12 : 0.0;
    ASSERT_TRUE(f->factorize(kk, 0.0, dc)) << "path " << path;
    EXPECT_EQ(f->inertia(), (Inertia{14, 6, 0}));
    Eigen::VectorXd sol;
    solve_refined(kk, *f, 0.0, dc, rhs, sol);
    const Eigen::VectorXd r = k.to_dense() * sol - rhs;
    EXPECT_LT(r.norm() / rhs.norm(), 1e-10) << "path " << path;
  }
}

TEST(Factorization, DenseAndSparseAgreeUnderRegularization) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  Eigen::MatrixXd h(8, 8), j(3, 8);
  for (Eigen::Index i = 0; i < h.size(); ++i) h.data()[i] = g(rng);
  for (Eigen::Index i = 0; i < j.size(); ++i) j.data()[i] = g(rng);
  h = (h * h.transpose()).eval();
  const auto k = dense_kkt(h, j);
  const auto ks = as_sparse(k);
  DenseBunchKaufman fd;
  SparseLdlt fs;
  fd.factorize(k, 0.3, 1e-6);
  fs.factorize(ks, 0.3, 1e-6);
  EXPECT_EQ(fd.inertia(), fs.inertia());
  Eigen::VectorXd rhs = Eigen::VectorXd::LinSpaced(11, -1, 1);
  Eigen::VectorXd a, b;
  solve_refined(k, fd, 0.3, 1e-6, rhs, a);
  solve_refined(ks, fs, 0.3, 1e-6, rhs, b);
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Kkt, HandBuiltQuadraticProgram) {
  // min 1/2 (x1^2 + 2 x2^2) s.t. x1 + x2 = 1: x = (2/3, 1/3), lambda = -2/3.
  Eigen::MatrixXd h(2, 2), j(1, 2);
  h << 1, 0, 0, 2;
  j << 1, 1;
  const auto k = dense_kkt(h, j);
  Eigen::VectorXd rhs(3);
  rhs << 0, 0, 1;
  DenseBunchKaufman f;
  f.factorize(k, 0.0, 0.0);
  Eigen::VectorXd sol;
  solve_refined(k, f, 0.0, 0.0, rhs, sol);
  EXPECT_NEAR(sol[0], 2.0 / 3.0, 1e-14);
  EXPECT_NEAR(sol[1], 1.0 / 3.0, 1e-14);
  EXPECT_NEAR(sol[2], -2.0 / 3.0, 1e-14);
}

TEST(Kkt, AssembledMatrixHasExpectedBlocks) {
  auto m = hyperbola_problem();
  IpmOptions o;
  o.least_squares_multipliers = false;
  IpmSolver s(m, o);
  s.initialize();
  auto [k, rhs] = s.assemble_kkt();
  ASSERT_EQ(k.n, 2u);
  ASSERT_EQ(k.m, 1u);
  const auto x = s.x();
  const Eigen::MatrixXd a = k.to_dense();
  // Jacobian of x1 x2 is (x2, x1); the Hessian block has lambda = 0 so only Sigma remains.
  EXPECT_NEAR(a(2, 0), x[1], 1e-14);
  EXPECT_NEAR(a(2, 1), x[0], 1e-14);
  EXPECT_NEAR(a(0, 0), 1.0 / x[0], 1e-14);
  EXPECT_NEAR(a(1, 1), 1.0 / x[1], 1e-14);
  EXPECT_EQ(a(0, 1), 0.0);
  EXPECT_NEAR(rhs[2], -(x[0] * x[1] - 1.0), 1e-14);
  const double sf = s.objective_scale();
  EXPECT_NEAR(rhs[0], -(sf - s.mu() / x[0]), 1e-14);
}

TEST(InertiaCorrection, NegativeDefiniteHessian) {
  const auto k = dense_kkt(-Eigen::MatrixXd::Identity(3, 3), Eigen::MatrixXd(0, 3));
  DenseBunchKaufman f;
  double last = 0.0;
  const auto reg = correct_inertia(k, f, 0.1, IpmOptions{}, last);
  EXPECT_GE(reg.delta_w, 1.0);
  EXPECT_EQ(f.inertia(), (Inertia{3, 0, 0}));
  EXPECT_EQ(last, reg.delta_w);
}

TEST(InertiaCorrection, RankDeficientJacobianEngagesDeltaC) {
  Eigen::MatrixXd j(2, 3);
  j << 1, 1, 0, 2, 2, 0;
  const auto k = dense_kkt(Eigen::MatrixXd::Identity(3, 3), j);
  DenseBunchKaufman f;
  double last = 0.0;
  const auto reg = correct_inertia(k, f, 0.1, IpmOptions{}, last);
  EXPECT_GT(reg.delta_c, 0.0);
  EXPECT_EQ(f.inertia(), (Inertia{3, 2, 0}));
}

TEST(InertiaCorrection, CorrectMatrixNeedsNoRegularization) {
  Eigen::MatrixXd j(1, 2);
  j << 1, 1;
  const auto k = dense_kkt(Eigen::MatrixXd::Identity(2, 2), j);
  DenseBunchKaufman f;
  double last = 0.0;
  const auto reg = correct_inertia(k, f, 0.1, IpmOptions{}, last);
  EXPECT_EQ(reg.delta_w, 0.0);
  EXPECT_EQ(reg.delta_c, 0.0);
  EXPECT_EQ(reg.trials, 1u);
}

TEST(Lbfgs, InitialScalingFromNewestPair) {
  LbfgsHistory h(3, 4);
  Eigen::Vector3d s(1, 0, 0), y(2, 0, 0);
  ASSERT_TRUE(h.update(s, y));
  // gamma = s^T y / y^T y = 0.5, so H_0 = 0.5 I and B_0 = 2 I.
  EXPECT_DOUBLE_EQ(h.delta(), 2.0);
  const Eigen::Vector3d e2(0, 1, 0);
  EXPECT_NEAR((h.apply_inverse(e2) - 0.5 * e2).norm(), 0.0, 1e-15);
  EXPECT_NEAR((h.apply(s) - y).norm(), 0.0, 1e-14);
}

TEST(Lbfgs, RecoversQuadraticWithConjugateSteps) {
  // With n conjugate pairs on a quadratic, BFGS reproduces A exactly.
  const std::size_t n = 5;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  Eigen::MatrixXd r(n, n);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = g(rng);
  const Eigen::MatrixXd a = r * r.transpose() + Eigen::MatrixXd::Identity(n, n);
  LbfgsHistory h(n, n);
  // A-conjugate directions via Gram-Schmidt in the A inner product.
  std::vector<Eigen::VectorXd> dirs;
  for (std::size_t k = 0; k < n; ++k) {
    Eigen::VectorXd d = Eigen::VectorXd::Unit(n, static_cast<Eigen::Index>(k));
    for (const auto& p : dirs) d -= (p.dot(a * d) / p.dot(a * p)) * p;
    dirs.push_back(d);
    ASSERT_TRUE(h.update(d, a * d));
  }
  EXPECT_EQ(h.damped(), 0u);
  EXPECT_LT((h.dense() - a).cwiseAbs().maxCoeff(), 1e-8 * a.cwiseAbs().maxCoeff());
  const Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(n, -1, 2);
  EXPECT_LT((h.apply_inverse(a * v) - v).norm(), 1e-8);
}

TEST(Lbfgs, SecantConditionHolds) {
  LbfgsHistory h(4, 3);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  Eigen::VectorXd s(4), y(4);
  for (int k = 0; k < 6; ++k) {
    for (Eigen::Index i = 0; i < 4; ++i) {
      s[i] = g(rng);
      y[i] = 2.0 * s[i] + 0.1 * g(rng);
    }
    if (h.update(s, y) && h.damped() == 0) EXPECT_LT((h.apply(s) - y).norm(), 1e-10 * y.norm());
  }
  EXPECT_EQ(h.size(), 3u);
}

TEST(Lbfgs, DampingKeepsCurvaturePositive) {
  LbfgsHistory h(2, 3);
  Eigen::Vector2d s(1, 0), y(-1, 0);
  ASSERT_TRUE(h.update(s, y));
  EXPECT_EQ(h.damped(), 1u);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h.dense());
  EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
  EXPECT_GT(s.dot(h.apply(s)), 0.0);
}

TEST(Lbfgs, ZeroStepIsSkipped) {
  LbfgsHistory h(2, 3);
  EXPECT_FALSE(h.update(Eigen::Vector2d::Zero(), Eigen::Vector2d(1, 1)));
  EXPECT_EQ(h.skipped(), 1u);
}

TEST(Solve, BoundedQuadratic) {
  const auto c = bound_row_problem();
  const auto r = solve_nlp(c.model, quiet());
  ASSERT_EQ(r.stats.status, SolveStatus::Optimal) << r.stats.message;
  EXPECT_NEAR(c.recover_variables(r.x)[0], 1.0, 1e-8);
  EXPECT_NEAR(r.stats.objective, 1.0, 1e-8);
}

TEST(Solve, Hyperbola) {
  const auto m = hyperbola_problem();
  const auto r = solve_nlp(m, quiet());
  ASSERT_EQ(r.stats.status, SolveStatus::Optimal) << r.stats.message;
  EXPECT_NEAR(r.x[0], 1.0, 1e-8);
  EXPECT_NEAR(r.x[1], 1.0, 1e-8);
  // Stationarity: 1 + lambda x2 = 0.
  EXPECT_NEAR(r.lambda[0], -1.0, 1e-6);
}

TEST(Solve, FixedVariablesAreRespected) {
  NlpModel m;
  const auto a = m.add_variable(2.0, 2.0, 2.0);
  const auto b = m.add_variable(-5.0, 5.0, 0.0);
  m.set_objective(square(m.var(b) - m.var(a)));
  m.seal();
  const auto r = solve_nlp(m, quiet());
  ASSERT_EQ(r.stats.status, SolveStatus::Optimal);
  EXPECT_EQ(r.x[0], 2.0);
  EXPECT_NEAR(r.x[1], 2.0, 1e-8);
}

TEST(Solve, RejectsNonCanonicalModel) {
  NlpModel m;
  m.add_variable(0, 1);
  m.add_constraint(m.var(0) + 0.0, 0.0, 0.5);
  m.seal();
  EXPECT_THROW(IpmSolver(m, {}), std::invalid_argument);
}

TEST(Solve, ExactAndLbfgsAgree) {
  const auto c = convex_problem(8);
  const auto& m = c.model;
  const auto exact = solve_nlp(m, quiet());
  IpmOptions o = quiet();
  o.hessian = HessianMode::Lbfgs;
  o.max_iter = 3000;
  const auto lb = solve_nlp(m, o);
  ASSERT_EQ(exact.stats.status, SolveStatus::Optimal) << exact.stats.message;
  ASSERT_EQ(lb.stats.status, SolveStatus::Optimal) << lb.stats.message;
  EXPECT_NEAR(exact.stats.objective, lb.stats.objective,
              1e-5 * std::max(1.0, std::abs(exact.stats.objective)));
  EXPECT_EQ(lb.stats.hessian_evals, 0u);
}

TEST(Solve, DenseAndSparsePathsAgree) {
  const auto m = rosen_problem(9);
  IpmOptions od = quiet();
  IpmOptions os = quiet();
  os.dense_threshold = 0;
  const auto d = solve_nlp(m, od);
  const auto s = solve_nlp(m, os);
  ASSERT_EQ(d.stats.status, SolveStatus::Optimal);
  ASSERT_EQ(s.stats.status, SolveStatus::Optimal);
  EXPECT_TRUE(d.stats.dense_linear_algebra);
  EXPECT_FALSE(s.stats.dense_linear_algebra);
  EXPECT_NEAR(d.stats.objective, s.stats.objective, 1e-7);
}

TEST(Solve, TimersCoverWallClock) {
  const auto m = rosen_problem(9);
  const auto r = solve_nlp(m, quiet());
  double sum = 0.0;
  for (double s : r.stats.seconds) {
    EXPECT_GE(s, 0.0);
    sum += s;
  }
  EXPECT_GE(sum, 0.99 * r.stats.wall_seconds);
  EXPECT_LE(sum, 1.01 * r.stats.wall_seconds + 1e-9);
  double pct = 0.0;
  for (double p : r.stats.percentages()) pct += p;
  EXPECT_NEAR(pct, 100.0, 1e-9);
}

TEST(Solve, Deterministic) {
  const auto m = rosen_problem(7);
  const auto a = solve_nlp(m, quiet());
  const auto b = solve_nlp(m, quiet());
  EXPECT_EQ(a.x, b.x);
  EXPECT_EQ(a.stats.iterations, b.stats.iterations);
}

TEST(Solve, IteratesStayInsideBounds) {
  // Tight box with the unconstrained optimum outside it.
  NlpModel m;
  for (int i = 0; i < 4; ++i) m.add_variable(0.0, 1.0, 0.5);
  Expr obj = m.var(0) * 0.0;
  const double target[] = {3.0, 2.0, -1.0, 0.5};
  for (std::size_t i = 0; i < 4; ++i) obj = obj + square(m.var(i) - target[i]);
  m.set_objective(obj);
  m.seal();
  IpmOptions o = quiet();
  for (std::size_t limit = 1; limit < 12; ++limit) {
    o.max_iter = limit;
    const auto r = solve_nlp(m, o);
    for (double v : r.x) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
  const auto r = solve_nlp(m, quiet());
  ASSERT_EQ(r.stats.status, SolveStatus::Optimal);
  EXPECT_NEAR(r.x[0], 1.0, 1e-7);
  EXPECT_NEAR(r.x[1], 1.0, 1e-7);
  EXPECT_NEAR(r.x[2], 0.0, 1e-7);
  EXPECT_NEAR(r.x[3], 0.5, 1e-7);
}

TEST(Solve, IterationLimit) {
  const auto m = rosen_problem(9);
  IpmOptions o;
  o.max_iter = 2;
  const auto r = solve_nlp(m, o);
  EXPECT_EQ(r.stats.status, SolveStatus::MaxIter);
  EXPECT_EQ(r.stats.iterations, 2u);
}

TEST(Solve, LogHasOneLinePerIteration) {
  const auto m = hyperbola_problem();
  std::ostringstream out;
  IpmOptions o = quiet();
  o.log = &out;
  const auto r = solve_nlp(m, o);
  std::size_t lines = 0;
  std::istringstream in(out.str());
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, r.stats.iterations + 1 + 3);
  EXPECT_NE(out.str().find("inf_pr"), std::string::npos);
}

TEST(Options, Validation) {
  IpmOptions o;
  o.tol = 0.0;
  EXPECT_THROW(o.validate(), std::invalid_argument);
  EXPECT_EQ(parse_hessian_mode("lbfgs"), HessianMode::Lbfgs);
  EXPECT_THROW(parse_hessian_mode("bfgs"), std::invalid_argument);
}
