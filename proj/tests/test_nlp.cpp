#include <cmath>
#include <random>

#include <Eigen/Core>
#include <gtest/gtest.h>

#include "mlopt/nlp.hpp"

using namespace mlopt;

namespace {

// F(x) = (x0*x1, sin(x2), x0^2 + x2) with closed-form derivatives.
ExternalOperator test_operator() {
  ExternalOperator op;
  op.name = "poly";
  op.input_dim = 3;
  op.output_dim = 3;
  op.eval = [](std::span<const double> x, std::span<double> y) {
    y[0] = x[0] * x[1];
    y[1] = std::sin(x[2]);
    y[2] = x[0] * x[0] + x[2];
  };
  op.jacobian = [](std::span<const double> x, std::span<double> J) {
    const double v[9] = {x[1], x[0], 0, 0, 0, std::cos(x[2]), 2 * x[0], 0, 1};
    std::copy(v, v + 9, J.begin());
  };
  op.hessian = [](std::span<const double> x, std::span<const double> w, std::span<double> H) {
    std::fill(H.begin(), H.end(), 0.0);
    H[0] = 2.0 * w[2];             // (0,0)
    H[1] = w[0];                   // (1,0)
    H[5] = -std::sin(x[2]) * w[1];  // (2,2)
  };
  return op;
}

// Objective, one graph equality, one graph inequality, one operator block.
NlpModel mixed_model() {
  NlpModel m;
  for (int i = 0; i < 6; ++i) m.add_variable(-3.0, 3.0, 0.1 * (i + 1));
  m.set_objective(square(m.var(0)) + m.var(1) * m.var(2) + exp(0.2 * m.var(4)));
  m.add_constraint(m.var(0) * m.var(3) + tanh(m.var(1)), 0.5, 0.5, "eq");
  m.add_constraint(square(m.var(2)) - m.var(4), -1.0, 2.0, "ineq");
  const auto op = m.add_operator(test_operator());
  m.add_operator_rows(op, {1, 3, 4}, {5, 0, 2}, 0.0, 0.0, "op");
  m.seal();
  return m;
}

std::vector<double> rand_point(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  std::vector<double> x(n);
  for (auto& v : x) v = u(rng);
  return x;
}

Eigen::MatrixXd dense_from(const SparsityPattern& p, const std::vector<double>& v) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(p.rows, p.cols);
  for (std::size_t e = 0; e < p.nnz(); ++e) d(p.row[e], p.col[e]) += v[e];
  return d;
}

}  // namespace

TEST(NlpModel, AddVariableIndicesAndBounds) {
  NlpModel m;
  EXPECT_EQ(m.add_variable(0.0, kInf, 1.0), 0u);
  EXPECT_THROW(m.add_variable(-1.0, -2.0), std::invalid_argument);
  NlpModel big;
  for (std::size_t i = 0; i < 1000; ++i) EXPECT_EQ(big.add_variable(-1.0, 1.0), i);
}

TEST(NlpModel, DefaultStartValues) {
  NlpModel m;
  m.add_variable(2.0, 4.0);
  m.add_variable(1.0, kInf);
  m.add_variable(-kInf, -2.0);
  m.add_variable(-kInf, kInf);
  m.add_variable(0.0, 1.0, 7.0);
  const auto x = m.start_point();
  EXPECT_EQ(x, (std::vector<double>{3.0, 1.0, -2.0, 0.0, 1.0}));
}

TEST(NlpModel, RowKindsAndCounts) {
  NlpModel m;
  for (int i = 0; i < 5; ++i) m.add_variable(-kInf, kInf);
  const auto eq = m.add_constraint(m.var(0) + m.var(1), 0.0, 0.0);
  EXPECT_TRUE(m.row(eq.first).equality());
  EXPECT_EQ(m.row(eq.first).lower, 0.0);

  ExternalOperator op = test_operator();
  op.output_dim = 2;
  const auto id = m.add_operator(op);
  const auto rows = m.add_operator_rows(id, {0, 1, 2}, {3, 4}, 0.0, 0.0);
  EXPECT_EQ(rows.count, 2u);

  const auto stab = m.add_constraint(m.var(4) + 0.0, 59.4, kInf, "stability");
  EXPECT_EQ(m.row(stab.first).lower, 59.4);
  EXPECT_TRUE(std::isinf(m.row(stab.first).upper));
  EXPECT_EQ(m.num_rows(), 4u);

  EXPECT_THROW(m.add_constraint(m.var(0) + 0.0, 1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(m.add_operator_rows(9, {0, 1, 2}, {}, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(m.add_operator_rows(id, {0, 1, 2}, {2, 3}, 0.0, 0.0), std::invalid_argument);
}

TEST(NlpModel, SealedModelRejectsEdits) {
  NlpModel m;
  m.add_variable(0, 1);
  m.seal();
  EXPECT_THROW(m.add_variable(0, 1), std::logic_error);
  EXPECT_THROW(m.var(0), std::logic_error);
}

TEST(Canonicalize, SlackCounts) {
  NlpModel m;
  for (int i = 0; i < 3; ++i) m.add_variable(-1, 1);
  for (int i = 0; i < 3; ++i) m.add_constraint(square(m.var(i)), -kInf, 0.5);
  m.seal();
  auto c = canonicalize(m);
  EXPECT_EQ(c.model.num_variables(), 6u);
  EXPECT_TRUE(c.model.canonical());

  NlpModel e;
  e.add_variable(-1, 1);
  e.add_variable(-1, 1);
  e.add_constraint(e.var(0) * e.var(1), 0.25, 0.25);
  e.seal();
  auto ce = canonicalize(e);
  EXPECT_EQ(ce.model.num_variables(), 2u);
  EXPECT_EQ(ce.model.num_rows(), 1u);
  auto twice = canonicalize(c.model);
  EXPECT_EQ(twice.model.num_variables(), c.model.num_variables());

  NlpModel mixed;
  for (int i = 0; i < 4; ++i) mixed.add_variable(-2, 2);
  mixed.add_constraint(mixed.var(0) + mixed.var(1), 0, 0);
  mixed.add_constraint(mixed.var(1) * mixed.var(2), 1, 1);
  mixed.add_constraint(mixed.var(2) - mixed.var(3), 0, kInf);
  mixed.add_constraint(square(mixed.var(3)), -kInf, 1);
  mixed.seal();
  auto cm = canonicalize(mixed);
  EXPECT_EQ(cm.model.num_variables(), 6u);
  EXPECT_EQ(cm.model.num_rows(), 4u);
  EXPECT_TRUE(cm.model.canonical());
}

TEST(Canonicalize, PreservesFeasibleSet) {
  NlpModel m;
  for (int i = 0; i < 3; ++i) m.add_variable(-2, 2);
  m.add_constraint(m.var(0) + m.var(1) - m.var(2), 0, 0);
  m.add_constraint(m.var(0) * m.var(1), -kInf, 1.0);
  m.add_constraint(square(m.var(2)), 0.1, 3.0);
  m.seal();
  auto c = canonicalize(m);
  NlpEvaluator orig(m), canon(c.model);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  int tested = 0;
  for (int k = 0; k < 200 && tested < 30; ++k) {
    const double a = u(rng), b = u(rng);
    const std::vector<double> x{a, b, a + b};
    std::vector<double> g(3);
    orig.constraints(x, g);
    bool feasible = true;
    for (std::size_t r = 0; r < 3; ++r) {
      feasible = feasible && g[r] >= m.row(r).lower - 1e-12 && g[r] <= m.row(r).upper + 1e-12;
    }
    if (!feasible) continue;
    ++tested;
    const auto xc = c.lift(x);
    std::vector<double> gc(3);
    canon.constraints(xc, gc);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(gc[r], 0.0, 1e-14);
    for (std::size_t i = 0; i < xc.size(); ++i) {
      EXPECT_GE(xc[i], c.model.variable(i).lower);
      EXPECT_LE(xc[i], c.model.variable(i).upper);
    }
    EXPECT_EQ(c.recover_variables(xc), x);
    const auto act = c.row_activities(xc);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(act[r], g[r], 1e-14);
  }
  EXPECT_GT(tested, 10);
}

TEST(Structure, EmptyModelIsZero) {
  NlpModel m;
  m.seal();
  const auto r = structure_report(m);
  EXPECT_EQ(r.variables, 0u);
  EXPECT_EQ(r.constraints, 0u);
  EXPECT_EQ(r.jacobian_nnz, 0u);
  EXPECT_EQ(r.hessian_nnz, 0u);
}

TEST(Structure, OperatorBlockCounts) {
  NlpModel m;
  for (int i = 0; i < 6; ++i) m.add_variable(-1, 1);
  ExternalOperator op;
  op.input_dim = 4;
  op.output_dim = 2;
  op.eval = [](auto, auto) {};
  op.jacobian = [](auto, auto) {};
  op.hessian = [](auto, auto, auto) {};
  const auto id = m.add_operator(op);
  m.add_operator_rows(id, {0, 1, 2, 3}, {4, 5}, 0, 0, "nn");
  m.seal();
  const auto r = structure_report(m);
  EXPECT_EQ(r.jacobian_nnz, 10u);
  EXPECT_EQ(r.hessian_nnz, 10u);
  EXPECT_EQ(r.constraints, 2u);
}

TEST(Structure, TagTotalsAndRowOrderInvariance) {
  auto build = [](bool reversed) {
    NlpModel m;
    for (int i = 0; i < 4; ++i) m.add_variable(-1, 1);
    std::vector<std::function<void()>> adds{
        [&] { m.add_constraint(m.var(0) * m.var(1), 0, 0, "a"); },
        [&] { m.add_constraint(tanh(m.var(2)) + m.var(3), 0, 1, "b"); },
        [&] { m.add_constraint(m.var(1) + m.var(2) + m.var(3), 0, 0); },
        [&] { m.add_constraint(square(m.var(3)), 0, 0, "a"); }};
    if (reversed) std::reverse(adds.begin(), adds.end());
    for (auto& f : adds) f();
    m.seal();
    return structure_report(m);
  };
  const auto a = build(false), b = build(true);
  EXPECT_EQ(a.jacobian_nnz, b.jacobian_nnz);
  EXPECT_EQ(a.hessian_nnz, b.hessian_nnz);
  EXPECT_EQ(a.constraints, b.constraints);
  std::size_t rows = 0, nnz = 0;
  for (const auto& t : a.tags) {
    rows += t.constraints;
    nnz += t.jacobian_nnz;
  }
  EXPECT_EQ(rows, a.constraints);
  EXPECT_EQ(nnz, a.jacobian_nnz);
  ASSERT_EQ(a.tags.size(), 3u);
  EXPECT_EQ(a.tags[0].tag, "");
  EXPECT_EQ(a.tags[1].constraints, 2u);
}

TEST(Structure, TableRendering) {
  StructureRow row{"--", "No surrogate", StructureReport{1155, 1497, 4920, 3500, {}}};
  const std::vector<StructureRow> rows{row};
  EXPECT_EQ(structure_table_csv(rows),
            "Parameters,Formulation,N. Variables,N. Constraints,Jacobian NNZ,Hessian NNZ\n"
            "--,No surrogate,1155,1497,4920,3500\n");
  const auto md = structure_table_markdown(rows);
  EXPECT_NE(md.find("| Parameters | Formulation  | N. Variables |"), std::string::npos);
  EXPECT_NE(md.find("| --         | No surrogate | 1155         |"), std::string::npos);
}

TEST(Evaluator, DerivativesMatchFiniteDifferences) {
  auto m = mixed_model();
  NlpEvaluator ev(m);
  const auto n = m.num_variables(), rows = m.num_rows();
  std::mt19937_64 rng(11);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = rand_point(rng, n);
    const auto lambda = rand_point(rng, rows);
    const double sigma = 0.7;

    std::vector<double> jv(m.jacobian_pattern().nnz());
    ev.jacobian(x, jv);
    const auto J = dense_from(m.jacobian_pattern(), jv);
    std::vector<double> grad(n);
    ev.gradient(x, grad);

    Eigen::MatrixXd Jfd(rows, n);
    for (std::size_t j = 0; j < n; ++j) {
      auto xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      std::vector<double> gp(rows), gm(rows);
      ev.constraints(xp, gp);
      ev.constraints(xm, gm);
      for (std::size_t r = 0; r < rows; ++r) Jfd(r, j) = (gp[r] - gm[r]) / (2 * h);
      EXPECT_NEAR(grad[j], (ev.objective(xp) - ev.objective(xm)) / (2 * h), 1e-6);
    }
    EXPECT_LT((J - Jfd).cwiseAbs().maxCoeff(), 1e-6);

    // Lagrangian gradient for the Hessian check.
    auto lag_grad = [&](const std::vector<double>& p) {
      std::vector<double> gr(n), val(m.jacobian_pattern().nnz());
      ev.gradient(p, gr);
      ev.jacobian(p, val);
      Eigen::VectorXd out = sigma * Eigen::Map<Eigen::VectorXd>(gr.data(), n);
      const auto& jp = m.jacobian_pattern();
      for (std::size_t e = 0; e < jp.nnz(); ++e) out[jp.col[e]] += lambda[jp.row[e]] * val[e];
      return out;
    };
    std::vector<double> hv(m.hessian_pattern().nnz());
    ev.hessian(x, sigma, lambda, hv);
    Eigen::MatrixXd H = dense_from(m.hessian_pattern(), hv);
    Eigen::MatrixXd Hs = H + H.transpose();
    Hs.diagonal() = H.diagonal();
    Eigen::MatrixXd Hfd(n, n);
    for (std::size_t j = 0; j < n; ++j) {
      auto xp = x, xm = x;
      xp[j] += 1e-5;
      xm[j] -= 1e-5;
      Hfd.col(j) = (lag_grad(xp) - lag_grad(xm)) / 2e-5;
    }
    EXPECT_LT((Hs - Hfd).cwiseAbs().maxCoeff(), 1e-5);
  }
}

TEST(Evaluator, PatternsIgnoreUnreferencedRoots) {
  NlpModel m;
  m.add_variable(-1, 1);
  m.add_variable(-1, 1);
  m.graph().add_root(square(m.var(0)) * m.var(1));
  m.add_constraint(m.var(0) + m.var(1), 0, 0);
  m.seal();
  EXPECT_EQ(m.hessian_pattern().nnz(), 0u);
  EXPECT_EQ(m.jacobian_pattern().nnz(), 2u);
}

TEST(Evaluator, CanonicalSlackColumns) {
  auto m = mixed_model();
  auto c = canonicalize(m);
  ASSERT_EQ(c.model.num_variables(), m.num_variables() + 1);
  NlpEvaluator ev(c.model);
  const auto x = c.model.start_point();
  std::vector<double> jv(c.model.jacobian_pattern().nnz());
  ev.jacobian(x, jv);
  const auto J = dense_from(c.model.jacobian_pattern(), jv);
  EXPECT_EQ(J(1, static_cast<Eigen::Index>(m.num_variables())), -1.0);
  EXPECT_EQ(c.model.hessian_pattern().nnz(), m.hessian_pattern().nnz());
}
