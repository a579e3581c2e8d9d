#include "mlopt/embed.hpp"

#include <cmath>
#include <stdexcept>

#include <fmt/format.h>

namespace mlopt {

const char* formulation_name(Formulation f) {
  switch (f) {
    case Formulation::FullSpace: return "full";
    case Formulation::ReducedSpace: return "reduced";
    case Formulation::GrayBox: return "graybox";
  }
  return "?";
}

const char* formulation_label(Formulation f) {
  switch (f) {
    case Formulation::FullSpace: return "Full-space";
    case Formulation::ReducedSpace: return "Reduced-space";
    case Formulation::GrayBox: return "Gray-box";
  }
  return "?";
}

Formulation parse_formulation(const std::string& name) {
  if (name == "full") return Formulation::FullSpace;
  if (name == "reduced") return Formulation::ReducedSpace;
  if (name == "graybox") return Formulation::GrayBox;
  throw std::invalid_argument("unknown formulation '" + name + "' (full|reduced|graybox)");
}

std::pair<double, double> activation_range(Activation a) {
  switch (a) {
    case Activation::Tanh: return {-1.0, 1.0};
    case Activation::Sigmoid: return {0.0, 1.0};
    case Activation::Identity: break;
  }
  return {-kInf, kInf};
}

RowRange EmbeddingHandle::constrain_output(NlpModel& model, std::size_t i, double lower,
                                           double upper, const std::string& tag) const {
  if (i >= output_dim()) throw std::out_of_range("embedding output index out of range");
  if (kind == Formulation::ReducedSpace) {
    return model.add_constraint_root(output_roots[i], lower, upper, tag);
  }
  return model.add_constraint(model.var(output_vars[i]) + 0.0, lower, upper, tag);
}

namespace {

void check_inputs(const NlpModel& model, const MlpNetwork& net,
                  std::span<const std::size_t> x_vars) {
  if (model.sealed()) throw std::logic_error("cannot embed into a sealed model");
  if (net.depth() == 0) throw std::invalid_argument("network has no layers");
  if (x_vars.size() != net.input_dim()) {
    throw std::invalid_argument(fmt::format("network takes {} inputs, {} variables given",
                                            net.input_dim(), x_vars.size()));
  }
  for (auto v : x_vars) {
    if (v >= model.num_variables()) {
      throw std::out_of_range(fmt::format("input variable {} not registered", v));
    }
  }
}

Expr apply_activation(Activation a, Expr z) {
  switch (a) {
    case Activation::Tanh: return tanh(z);
    case Activation::Sigmoid: return sigmoid(z);
    case Activation::Identity: break;
  }
  return z;
}

std::vector<double> input_start(const NlpModel& model, std::span<const std::size_t> x_vars) {
  std::vector<double> x(x_vars.size());
  for (std::size_t k = 0; k < x_vars.size(); ++k) x[k] = model.variable(x_vars[k]).start;
  return x;
}

}  // namespace

EmbeddingHandle embed_full_space(NlpModel& model, const MlpNetwork& net,
                                 std::span<const std::size_t> x_vars, const std::string& tag) {
  check_inputs(model, net, x_vars);
  EmbeddingHandle h;
  h.kind = Formulation::FullSpace;
  h.inputs.assign(x_vars.begin(), x_vars.end());
  h.first_variable = model.num_variables();
  h.rows.first = model.num_rows();

  MlpWorkspace ws;
  net.forward(input_start(model, x_vars), ws);

  std::vector<std::size_t> prev(x_vars.begin(), x_vars.end());
  for (std::size_t l = 0; l < net.depth(); ++l) {
    const auto& L = net.layers()[l];
    const auto n = static_cast<std::size_t>(L.weight.rows());
    const auto [lo, hi] = activation_range(L.activation);
    std::vector<std::size_t> z(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = model.add_variable(-kInf, kInf, ws.z[l][static_cast<Eigen::Index>(i)],
                                fmt::format("{}_z{}_{}", tag, l + 1, i));
    }
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = model.add_variable(lo, hi, ws.y[l][static_cast<Eigen::Index>(i)],
                                fmt::format("{}_y{}_{}", tag, l + 1, i));
    }
    // W_l y_{l-1} - z_l = -b_l
    for (std::size_t i = 0; i < n; ++i) {
      Expr sum = L.weight(static_cast<Eigen::Index>(i), 0) * model.var(prev[0]);
      for (std::size_t j = 1; j < prev.size(); ++j) {
        sum = sum + L.weight(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
                        model.var(prev[j]);
      }
      const double rhs = -L.bias[static_cast<Eigen::Index>(i)];
      model.add_constraint(sum - model.var(z[i]), rhs, rhs, tag + "-affine");
    }
    // y_l - act(z_l) = 0
    for (std::size_t i = 0; i < n; ++i) {
      model.add_constraint(model.var(y[i]) - apply_activation(L.activation, model.var(z[i])),
                           0.0, 0.0, tag + "-activation");
    }
    h.predicted.variables += static_cast<std::int64_t>(2 * n);
    h.predicted.constraints += static_cast<std::int64_t>(2 * n);
    h.predicted.jacobian_nnz += static_cast<std::int64_t>(n * (prev.size() + 1) + 2 * n);
    if (L.activation != Activation::Identity) h.predicted.hessian_nnz += static_cast<std::int64_t>(n);
    prev = y;
  }
  h.output_vars = prev;
  h.variable_count = model.num_variables() - h.first_variable;
  h.rows.count = model.num_rows() - h.rows.first;
  return h;
}

EmbeddingHandle embed_reduced_space(NlpModel& model, const MlpNetwork& net,
                                    std::span<const std::size_t> x_vars) {
  check_inputs(model, net, x_vars);
  EmbeddingHandle h;
  h.kind = Formulation::ReducedSpace;
  h.inputs.assign(x_vars.begin(), x_vars.end());
  h.first_variable = model.num_variables();
  h.rows.first = model.num_rows();

  std::vector<Expr> prev;
  for (auto v : x_vars) prev.push_back(model.var(v));
  for (const auto& L : net.layers()) {
    const auto n = L.weight.rows();
    std::vector<Expr> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      Expr sum = L.weight(i, 0) * prev[0];
      for (std::size_t j = 1; j < prev.size(); ++j) {
        sum = sum + L.weight(i, static_cast<Eigen::Index>(j)) * prev[j];
      }
      out.push_back(apply_activation(L.activation, sum + L.bias[i]));
    }
    prev = std::move(out);
  }
  for (const auto& e : prev) h.output_roots.push_back(model.graph().add_root(e));
  return h;
}

ExternalOperator network_operator(std::shared_ptr<const MlpNetwork> net, bool with_hessian) {
  if (!net) throw std::invalid_argument("null network");
  ExternalOperator op;
  op.name = fmt::format("mlp{}", net->parameter_count());
  op.input_dim = net->input_dim();
  op.output_dim = net->output_dim();
  op.eval = [net](std::span<const double> x, std::span<double> y) {
    MlpWorkspace ws;
    const Eigen::VectorXd v = net->forward(x, ws);
    std::copy(v.data(), v.data() + v.size(), y.begin());
  };
  op.jacobian = [net](std::span<const double> x, std::span<double> jac) {
    MlpWorkspace ws;
    const Eigen::MatrixXd J = net->jacobian(x, ws);
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < J.rows(); ++i) {
      for (Eigen::Index j = 0; j < J.cols(); ++j) jac[k++] = J(i, j);
    }
  };
  if (with_hessian) {
    op.hessian = [net](std::span<const double> x, std::span<const double> w,
                       std::span<double> hess) {
      MlpWorkspace ws;
      const Eigen::MatrixXd H = net->weighted_hessian(x, w, ws);
      std::size_t k = 0;
      for (Eigen::Index i = 0; i < H.rows(); ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) hess[k++] = H(i, j);
      }
    };
  }
  return op;
}

EmbeddingHandle embed_gray_box(NlpModel& model, std::shared_ptr<const MlpNetwork> net,
                               std::span<const std::size_t> x_vars, const std::string& tag,
                               bool with_hessian) {
  if (!net) throw std::invalid_argument("null network");
  check_inputs(model, *net, x_vars);
  EmbeddingHandle h;
  h.kind = Formulation::GrayBox;
  h.inputs.assign(x_vars.begin(), x_vars.end());
  h.first_variable = model.num_variables();

  const Eigen::VectorXd y0 = net->forward(input_start(model, x_vars));
  const auto [lo, hi] = activation_range(net->layers().back().activation);
  for (std::size_t i = 0; i < net->output_dim(); ++i) {
    h.output_vars.push_back(model.add_variable(lo, hi, y0[static_cast<Eigen::Index>(i)],
                                               fmt::format("{}_out{}", tag, i)));
  }
  const auto n0 = static_cast<std::int64_t>(net->input_dim());
  const auto nl = static_cast<std::int64_t>(net->output_dim());
  h.op = model.add_operator(network_operator(std::move(net), with_hessian));
  h.rows = model.add_operator_rows(h.op, h.inputs, h.output_vars, 0.0, 0.0, tag);
  h.variable_count = h.output_vars.size();
  h.predicted.variables = nl;
  h.predicted.constraints = nl;
  h.predicted.jacobian_nnz = nl * (n0 + 1);
  h.predicted.hessian_nnz = with_hessian ? n0 * (n0 + 1) / 2 : 0;
  return h;
}

EmbeddingHandle embed(NlpModel& model, const MlpNetwork& net,
                      std::span<const std::size_t> x_vars, Formulation f,
                      const std::string& tag, bool with_hessian) {
  switch (f) {
    case Formulation::FullSpace: return embed_full_space(model, net, x_vars, tag);
    case Formulation::ReducedSpace: return embed_reduced_space(model, net, x_vars);
    case Formulation::GrayBox:
      return embed_gray_box(model, std::make_shared<const MlpNetwork>(net), x_vars, tag,
                            with_hessian);
  }
  throw std::invalid_argument("unknown formulation");
}

}  // namespace mlopt
