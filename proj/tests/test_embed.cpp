#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mlopt/embed.hpp"

using namespace mlopt;

namespace {

MlpNetwork make_net(std::vector<std::size_t> widths, Activation hidden, std::uint64_t seed,
                    Activation output = Activation::Identity) {
  auto net = MlpNetwork::glorot(widths, hidden, output, seed);
  auto layers = net.layers();
  std::mt19937_64 rng(seed + 1);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto& L : layers) {
    for (Eigen::Index i = 0; i < L.bias.size(); ++i) L.bias[i] = u(rng);
  }
  return MlpNetwork(std::move(layers));
}

// Base model: n inputs in [-1, 1], a linear objective and one linear row.
NlpModel base_model(std::size_t n) {
  NlpModel m;
  for (std::size_t i = 0; i < n; ++i) m.add_variable(-1.0, 1.0, 0.1 * static_cast<double>(i) - 0.2);
  Expr obj = m.var(0) + 0.0;
  for (std::size_t i = 1; i < n; ++i) obj = obj + m.var(i);
  m.set_objective(obj);
  m.add_constraint(m.var(0) - m.var(n - 1), -0.5, 0.5, "base");
  return m;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

StructureDelta measured(const StructureReport& before, const StructureReport& after) {
  return {static_cast<std::int64_t>(after.variables) - static_cast<std::int64_t>(before.variables),
          static_cast<std::int64_t>(after.constraints) - static_cast<std::int64_t>(before.constraints),
          static_cast<std::int64_t>(after.jacobian_nnz) - static_cast<std::int64_t>(before.jacobian_nnz),
          static_cast<std::int64_t>(after.hessian_nnz) - static_cast<std::int64_t>(before.hessian_nnz)};
}

StructureReport base_report(std::size_t n) {
  auto m = base_model(n);
  m.seal();
  return structure_report(m);
}

struct Embedded {
  NlpModel model;
  EmbeddingHandle handle;
};

Embedded embed_on_base(const MlpNetwork& net, Formulation f) {
  Embedded e{base_model(net.input_dim()), {}};
  const auto x = iota(net.input_dim());
  e.handle = embed(e.model, net, x, f);
  e.model.seal();
  return e;
}

}  // namespace

TEST(FullSpace, CountsFor432) {
  auto net = make_net({4, 3, 2}, Activation::Tanh, 1);
  auto e = embed_on_base(net, Formulation::FullSpace);
  EXPECT_EQ(e.handle.predicted.variables, 10);
  EXPECT_EQ(e.handle.predicted.constraints, 10);
  EXPECT_EQ(e.handle.predicted.jacobian_nnz, 33);
  EXPECT_EQ(e.handle.predicted.hessian_nnz, 3);
  EXPECT_EQ(measured(base_report(4), structure_report(e.model)), e.handle.predicted);
}

TEST(FullSpace, IdentityLayerHasNoHessian) {
  auto net = make_net({3, 2}, Activation::Identity, 2);
  auto e = embed_on_base(net, Formulation::FullSpace);
  EXPECT_EQ(e.handle.predicted.hessian_nnz, 0);
  EXPECT_EQ(measured(base_report(3), structure_report(e.model)).hessian_nnz, 0);
}

TEST(FullSpace, ForwardPropagatedStartIsFeasible) {
  auto net = make_net({5, 6, 4, 3}, Activation::Sigmoid, 3, Activation::Tanh);
  auto e = embed_on_base(net, Formulation::FullSpace);
  NlpEvaluator ev(e.model);
  const auto x = e.model.start_point();
  std::vector<double> g(e.model.num_rows());
  ev.constraints(x, g);
  for (std::size_t r = e.handle.rows.first; r < e.handle.rows.first + e.handle.rows.count; ++r) {
    EXPECT_NEAR(g[r], e.model.row(r).lower, 1e-12) << "row " << r;
  }
  const auto y = net.forward(std::vector<double>(x.begin(), x.begin() + 5));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x[e.handle.output_vars[i]], y[i], 1e-15);
  // Tanh output range bounds.
  EXPECT_EQ(e.model.variable(e.handle.output_vars[0]).lower, -1.0);
}

TEST(ReducedSpace, NoVariablesAndForwardEquivalence) {
  Eigen::MatrixXd W(2, 2);
  W << 0.3, -1.2, 2.5, 0.7;
  Layer L{W, Eigen::Vector2d(0.1, -0.4), Activation::Identity};
  MlpNetwork net({L});
  NlpModel m = base_model(2);
  const auto before = m.num_variables();
  auto h = embed_reduced_space(m, net, iota(2));
  EXPECT_EQ(m.num_variables(), before);
  EXPECT_EQ(h.predicted, StructureDelta{});
  m.seal();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int k = 0; k < 20; ++k) {
    const std::vector<double> x{u(rng), u(rng)};
    const auto roots = m.graph().evaluate(x);
    const auto ref = net.forward(x);
    for (int i = 0; i < 2; ++i) EXPECT_NEAR(roots[h.output_roots[i]], ref[i], 1e-12);
  }
}

TEST(ReducedSpace, ProductNodeCount) {
  auto net = make_net({4, 3, 2}, Activation::Tanh, 5);
  NlpModel m = base_model(4);
  const auto nodes_before = m.graph().node_count();
  embed_reduced_space(m, net, iota(4));
  std::size_t muls = 0;
  for (std::size_t i = nodes_before; i < m.graph().node_count(); ++i) {
    if (m.graph().node(i).op == OpKind::Mul) ++muls;
  }
  EXPECT_GE(muls, 3u * 4u + 2u * 3u);
}

TEST(ReducedSpace, RootsMatchForwardAndJacobian) {
  auto net = make_net({10, 20, 20, 5}, Activation::Tanh, 6);
  NlpModel m = base_model(10);
  auto h = embed_reduced_space(m, net, iota(10));
  m.seal();
  const auto& g = m.graph();
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1, 1);
  GraphWorkspace ws;
  for (int k = 0; k < 10; ++k) {
    std::vector<double> x(10);
    for (auto& v : x) v = u(rng);
    const auto vals = g.evaluate(x);
    const auto y = net.forward(x);
    const auto J = net.jacobian(x);
    g.forward(x, ws);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_NEAR(vals[h.output_roots[i]], y[static_cast<Eigen::Index>(i)], 1e-9);
      const auto r = h.output_roots[i];
      const auto vars = g.root_variables(r);
      ASSERT_EQ(vars.size(), 10u);
      std::vector<double> grad(vars.size());
      g.gradient(r, x, ws, grad, false);
      for (std::size_t j = 0; j < vars.size(); ++j) {
        const double ref = J(static_cast<Eigen::Index>(i), vars[j]);
        EXPECT_LE(std::abs(grad[j] - ref), 1e-8 * std::max(1.0, std::abs(ref)));
      }
    }
  }
}

TEST(GrayBox, PaperDimensions) {
  for (std::size_t hidden : {1u, 3u, 6u}) {
    std::vector<std::size_t> widths{117};
    for (std::size_t l = 0; l < hidden; ++l) widths.push_back(8);
    widths.push_back(37);
    auto net = make_net(widths, Activation::Tanh, 8);
    NlpModel m = base_model(117);
    auto h = embed_gray_box(m, std::make_shared<const MlpNetwork>(net), iota(117));
    EXPECT_EQ(h.predicted.variables, 37);
    EXPECT_EQ(h.predicted.constraints, 37);
    EXPECT_EQ(h.predicted.jacobian_nnz, 37 * 118);
    EXPECT_EQ(h.predicted.hessian_nnz, 117 * 118 / 2);
  }
}

TEST(GrayBox, SmallBlockDeltasMatchReport) {
  auto net = make_net({4, 5, 2}, Activation::Tanh, 9);
  auto e = embed_on_base(net, Formulation::GrayBox);
  EXPECT_EQ(e.handle.predicted.jacobian_nnz, 10);
  EXPECT_EQ(measured(base_report(4), structure_report(e.model)), e.handle.predicted);
}

TEST(GrayBox, ForwardOutputsSatisfyRows) {
  auto net = make_net({3, 4, 2}, Activation::Tanh, 10);
  auto e = embed_on_base(net, Formulation::GrayBox);
  NlpEvaluator ev(e.model);
  auto x = e.model.start_point();
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int k = 0; k < 10; ++k) {
    for (std::size_t i = 0; i < 3; ++i) x[i] = u(rng);
    const auto y = net.forward(std::vector<double>(x.begin(), x.begin() + 3));
    for (std::size_t i = 0; i < 2; ++i) x[e.handle.output_vars[i]] = y[static_cast<Eigen::Index>(i)];
    std::vector<double> g(e.model.num_rows());
    ev.constraints(x, g);
    for (std::size_t r = e.handle.rows.first; r < e.handle.rows.first + 2; ++r) EXPECT_EQ(g[r], 0.0);
  }
}

TEST(Embed, RandomizedDeltasMatchReport) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> width(1, 7), depth(1, 4);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> widths(depth(rng) + 1);
    for (auto& w : widths) w = width(rng);
    const Activation act = trial % 2 ? Activation::Sigmoid : Activation::Tanh;
    auto net = make_net(widths, act, 100 + trial);
    const auto base = base_report(widths.front());
    for (auto f : {Formulation::FullSpace, Formulation::GrayBox, Formulation::ReducedSpace}) {
      auto e = embed_on_base(net, f);
      EXPECT_EQ(measured(base, structure_report(e.model)), e.handle.predicted)
          << formulation_name(f) << " trial " << trial;
    }
  }
}

TEST(Embed, DepthIndependence) {
  const std::size_t n0 = 4, nl = 3;
  StructureDelta gray_ref, red_ref;
  for (std::size_t depth = 2; depth <= 20; ++depth) {
    std::vector<std::size_t> widths{n0};
    for (std::size_t l = 1; l < depth; ++l) widths.push_back(5);
    widths.push_back(nl);
    auto net = make_net(widths, Activation::Tanh, depth);
    const auto base = base_report(n0);

    auto g = embed_on_base(net, Formulation::GrayBox);
    const auto gd = measured(base, structure_report(g.model));

    NlpModel r = base_model(n0);
    auto h = embed_reduced_space(r, net, iota(n0));
    for (std::size_t i = 0; i < nl; ++i) h.constrain_output(r, i, -0.5, kInf, "stability");
    r.seal();
    const auto rd = measured(base, structure_report(r));
    EXPECT_EQ(rd.variables, 0);
    if (depth == 2) {
      gray_ref = gd;
      red_ref = rd;
    }
    EXPECT_EQ(gd, gray_ref) << "depth " << depth;
    EXPECT_EQ(rd, red_ref) << "depth " << depth;
  }
}

TEST(Embed, FormulationNames) {
  EXPECT_EQ(parse_formulation("graybox"), Formulation::GrayBox);
  EXPECT_THROW(parse_formulation("dense"), std::invalid_argument);
  NlpModel m = base_model(2);
  m.seal();
  auto net = make_net({2, 1}, Activation::Tanh, 1);
  EXPECT_THROW(embed(m, net, iota(2), Formulation::FullSpace), std::logic_error);
  NlpModel m2 = base_model(2);
  EXPECT_THROW(embed(m2, net, iota(1), Formulation::GrayBox), std::invalid_argument);
}
