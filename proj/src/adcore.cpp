#include "mlopt/adcore.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

namespace mlopt {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Constant: return "const";
    case OpKind::Variable: return "var";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::PowInt: return "pow";
    case OpKind::Square: return "square";
    case OpKind::Neg: return "neg";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sin: return "sin";
    case OpKind::Cos: return "cos";
  }
  return "?";
}

namespace {

bool is_unary(OpKind op) {
  switch (op) {
    case OpKind::PowInt:
    case OpKind::Square:
    case OpKind::Neg:
    case OpKind::Tanh:
    case OpKind::Sigmoid:
    case OpKind::Exp:
    case OpKind::Log:
    case OpKind::Sin:
    case OpKind::Cos:
      return true;
    default:
      return false;
  }
}

bool is_binary(OpKind op) {
  return op == OpKind::Add || op == OpKind::Sub || op == OpKind::Mul ||
         op == OpKind::Div;
}

double sigmoid_value(double u) {
  if (u >= 0.0) return 1.0 / (1.0 + std::exp(-u));
  const double e = std::exp(u);
  return e / (1.0 + e);
}

double ipow(double u, int n) {
  if (n < 0) return 1.0 / ipow(u, -n);
  double r = 1.0;
  double base = u;
  while (n > 0) {
    if (n & 1) r *= base;
    base *= base;
    n >>= 1;
  }
  return r;
}

// First and second derivative of a unary node, given its argument u and
// its value v.
struct UnaryDerivs {
  double d1;
  double d2;
};

UnaryDerivs unary_derivs(const ExprGraph::Node& n, double u, double v) {
  switch (n.op) {
    case OpKind::Neg: return {-1.0, 0.0};
    case OpKind::Square: return {2.0 * u, 2.0};
    case OpKind::PowInt: {
      const int k = static_cast<int>(n.value);
      return {k * ipow(u, k - 1), static_cast<double>(k) * (k - 1) * ipow(u, k - 2)};
    }
    case OpKind::Tanh: {
      const double s = 1.0 - v * v;
      return {s, -2.0 * v * s};
    }
    case OpKind::Sigmoid: {
      const double s = v * (1.0 - v);
      return {s, s * (1.0 - 2.0 * v)};
    }
    case OpKind::Exp: return {v, v};
    case OpKind::Log: return {1.0 / u, -1.0 / (u * u)};
    case OpKind::Sin: return {std::cos(u), -v};
    case OpKind::Cos: return {-std::sin(u), -v};
    default: return {0.0, 0.0};
  }
}

// Interned sorted variable sets, so that the per-node sets of large graphs
// (where most nodes share a handful of distinct sets) stay small.
class SetTable {
 public:
  SetTable() { intern({}); }

  std::int32_t intern(std::vector<std::int32_t> s) {
    auto it = index_.find(s);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(sets_.size());
    sets_.push_back(s);
    index_.emplace(std::move(s), id);
    return id;
  }

  std::int32_t unite(std::int32_t a, std::int32_t b) {
    if (a == b || b == 0) return a;
    if (a == 0) return b;
    const auto key = a < b ? pack(a, b) : pack(b, a);
    auto it = unions_.find(key);
    if (it != unions_.end()) return it->second;
    std::vector<std::int32_t> out;
    std::set_union(sets_[a].begin(), sets_[a].end(), sets_[b].begin(),
                   sets_[b].end(), std::back_inserter(out));
    const auto id = intern(std::move(out));
    unions_.emplace(key, id);
    return id;
  }

  const std::vector<std::int32_t>& get(std::int32_t id) const { return sets_[id]; }

  static std::uint64_t pack(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

 private:
  struct VecHash {
    std::size_t operator()(const std::vector<std::int32_t>& v) const {
      std::size_t h = v.size();
      for (auto x : v) h ^= std::hash<std::int32_t>{}(x) + 0x9e3779b9 + (h << 6) + (h >> 2);
      return h;
    }
  };
  std::vector<std::vector<std::int32_t>> sets_;
  std::unordered_map<std::vector<std::int32_t>, std::int32_t, VecHash> index_;
  std::unordered_map<std::uint64_t, std::int32_t> unions_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Expr operators

namespace {

ExprGraph& owner(Expr a, Expr b) {
  if (!a.valid() || !b.valid() || a.graph() != b.graph()) {
    throw std::invalid_argument("expressions belong to different graphs");
  }
  return *a.graph();
}

Expr unary(OpKind op, Expr a, double value = 0.0) {
  if (!a.valid()) throw std::invalid_argument("invalid expression");
  return Expr(a.graph(), a.graph()->push(op, a.id(), {}, value));
}

Expr binary(OpKind op, Expr a, Expr b) {
  auto& g = owner(a, b);
  return Expr(&g, g.push(op, a.id(), b.id()));
}

Expr lift(Expr like, double v) {
  if (!like.valid()) throw std::invalid_argument("invalid expression");
  return like.graph()->constant(v);
}

}  // namespace

Expr operator+(Expr a, Expr b) { return binary(OpKind::Add, a, b); }
Expr operator-(Expr a, Expr b) { return binary(OpKind::Sub, a, b); }
Expr operator*(Expr a, Expr b) { return binary(OpKind::Mul, a, b); }
Expr operator/(Expr a, Expr b) { return binary(OpKind::Div, a, b); }
Expr operator-(Expr a) { return unary(OpKind::Neg, a); }
Expr operator+(Expr a, double b) { return a + lift(a, b); }
Expr operator+(double a, Expr b) { return lift(b, a) + b; }
Expr operator-(Expr a, double b) { return a - lift(a, b); }
Expr operator-(double a, Expr b) { return lift(b, a) - b; }
Expr operator*(Expr a, double b) { return a * lift(a, b); }
Expr operator*(double a, Expr b) { return lift(b, a) * b; }
Expr operator/(Expr a, double b) { return a / lift(a, b); }
Expr operator/(double a, Expr b) { return lift(b, a) / b; }
Expr& operator+=(Expr& a, Expr b) { return a = a + b; }
Expr& operator-=(Expr& a, Expr b) { return a = a - b; }

Expr square(Expr a) { return unary(OpKind::Square, a); }
Expr pow(Expr a, int exponent) {
  return unary(OpKind::PowInt, a, static_cast<double>(exponent));
}
Expr tanh(Expr a) { return unary(OpKind::Tanh, a); }
Expr sigmoid(Expr a) { return unary(OpKind::Sigmoid, a); }
Expr exp(Expr a) { return unary(OpKind::Exp, a); }
Expr log(Expr a) { return unary(OpKind::Log, a); }
Expr sin(Expr a) { return unary(OpKind::Sin, a); }
Expr cos(Expr a) { return unary(OpKind::Cos, a); }

// ---------------------------------------------------------------------------
// Construction

ExprGraph::ExprGraph(std::size_t num_variables) { set_num_variables(num_variables); }

void ExprGraph::require_open() const {
  if (sealed_) throw std::logic_error("expression graph is sealed");
}

void ExprGraph::require_sealed() const {
  if (!sealed_) throw std::logic_error("expression graph is not sealed");
}

void ExprGraph::set_num_variables(std::size_t n) {
  require_open();
  if (n < num_variables_) {
    throw std::invalid_argument("variable count cannot shrink");
  }
  num_variables_ = n;
  var_node_.resize(n, -1);
}

Expr ExprGraph::constant(double v) {
  return Expr(this, push(OpKind::Constant, {}, {}, v));
}

Expr ExprGraph::variable(std::size_t index) {
  require_open();
  if (index >= num_variables_) {
    throw std::out_of_range(fmt::format("variable {} not registered ({} known)",
                                        index, num_variables_));
  }
  if (var_node_[index] < 0) {
    var_node_[index] =
        push(OpKind::Variable, {}, {}, static_cast<double>(index)).value;
  }
  return Expr(this, NodeId{var_node_[index]});
}

NodeId ExprGraph::push(OpKind op, NodeId a, NodeId b, double value) {
  require_open();
  const auto next = static_cast<std::int32_t>(nodes_.size());
  auto check = [&](NodeId c) {
    if (!c.valid() || c.value >= next) {
      throw std::invalid_argument("child node must precede its parent");
    }
  };
  if (is_unary(op)) check(a);
  if (is_binary(op)) {
    check(a);
    check(b);
  }
  if (op == OpKind::PowInt && value != std::floor(value)) {
    throw std::invalid_argument("pow exponent must be an integer");
  }
  nodes_.push_back(Node{op, a.value, b.value, value});
  return NodeId{next};
}

std::size_t ExprGraph::add_root(Expr e) {
  require_open();
  if (!e.valid() || e.graph() != this) {
    throw std::invalid_argument("root does not belong to this graph");
  }
  roots_.push_back(e.id().value);
  return roots_.size() - 1;
}

void ExprGraph::set_root(std::size_t root, Expr e) {
  require_open();
  if (!e.valid() || e.graph() != this) {
    throw std::invalid_argument("root does not belong to this graph");
  }
  roots_.at(root) = e.id().value;
}

// ---------------------------------------------------------------------------
// Structure

void ExprGraph::seal() {
  require_open();
  const std::size_t n = nodes_.size();
  for (auto r : roots_) {
    if (r < 0 || static_cast<std::size_t>(r) >= n) {
      throw std::logic_error("root references a missing node");
    }
  }

  // Variable set per node by symbolic propagation.
  SetTable table;
  std::vector<std::int32_t> set_of(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& nd = nodes_[i];
    if (nd.op == OpKind::Variable) {
      set_of[i] = table.intern({static_cast<std::int32_t>(nd.value)});
    } else if (is_unary(nd.op)) {
      set_of[i] = set_of[nd.a];
    } else if (is_binary(nd.op)) {
      set_of[i] = table.unite(set_of[nd.a], set_of[nd.b]);
    }
  }

  // Nonlinear interaction sets of a node: pairs of variable sets whose cross
  // product may carry second derivatives.
  auto interactions = [&](std::size_t i, auto&& emit) {
    const auto& nd = nodes_[i];
    switch (nd.op) {
      case OpKind::Mul:
        emit(set_of[nd.a], set_of[nd.b]);
        break;
      case OpKind::Div:
        emit(set_of[nd.a], set_of[nd.b]);
        emit(set_of[nd.b], set_of[nd.b]);
        break;
      case OpKind::PowInt:
        if (nd.value != 0.0 && nd.value != 1.0) emit(set_of[nd.a], set_of[nd.a]);
        break;
      case OpKind::Square:
      case OpKind::Tanh:
      case OpKind::Sigmoid:
      case OpKind::Exp:
      case OpKind::Log:
      case OpKind::Sin:
      case OpKind::Cos:
        emit(set_of[nd.a], set_of[nd.a]);
        break;
      default:
        break;
    }
  };

  const std::size_t nroots = roots_.size();
  root_vars_.assign(nroots, {});
  root_hess_.assign(nroots, {});
  root_group_.assign(nroots, -1);
  groups_.clear();

  std::vector<std::int32_t> stamp(n, -1);
  std::vector<std::int32_t> stack;
  std::unordered_map<std::int32_t, std::int32_t> group_of_set;

  auto visit = [&](std::int32_t start, std::int32_t tag, auto&& on_node) {
    stack.clear();
    if (stamp[start] != tag) {
      stamp[start] = tag;
      stack.push_back(start);
    }
    while (!stack.empty()) {
      const auto i = stack.back();
      stack.pop_back();
      on_node(i);
      const auto& nd = nodes_[i];
      for (auto c : {nd.a, nd.b}) {
        if (c >= 0 && stamp[c] != tag) {
          stamp[c] = tag;
          stack.push_back(c);
        }
      }
    }
  };

  // Per-root exact Hessian structure.
  int tag = 0;
  for (std::size_t r = 0; r < nroots; ++r) {
    const auto sid = set_of[roots_[r]];
    root_vars_[r] = table.get(sid);
    std::unordered_set<std::uint64_t> pairs;
    visit(roots_[r], tag++, [&](std::int32_t i) {
      interactions(i, [&](std::int32_t sa, std::int32_t sb) {
        if (sa == 0 || sb == 0) return;
        pairs.insert(sa <= sb ? SetTable::pack(sa, sb) : SetTable::pack(sb, sa));
      });
    });
    std::vector<std::pair<std::int32_t, std::int32_t>> entries;
    for (auto key : pairs) {
      const auto& A = table.get(static_cast<std::int32_t>(key >> 32));
      const auto& B = table.get(static_cast<std::int32_t>(key & 0xffffffffu));
      for (auto p : A) {
        for (auto q : B) entries.emplace_back(std::max(p, q), std::min(p, q));
      }
    }
    std::sort(entries.begin(), entries.end());
    entries.erase(std::unique(entries.begin(), entries.end()), entries.end());
    root_hess_[r] = std::move(entries);

    auto [it, inserted] =
        group_of_set.emplace(sid, static_cast<std::int32_t>(groups_.size()));
    if (inserted) {
      groups_.push_back({});
      groups_.back().vars = table.get(sid);
    }
    root_group_[r] = it->second;
    groups_[it->second].roots.push_back(static_cast<std::int32_t>(r));
  }

  // Group node lists (union of the groups' root subgraphs).
  for (auto& g : groups_) {
    const int gtag = tag++;
    for (auto r : g.roots) {
      // visit() resets its stack but keeps the stamp, so shared subgraphs
      // are collected once.
      if (stamp[roots_[r]] == gtag) continue;
      stack.clear();
      stamp[roots_[r]] = gtag;
      stack.push_back(roots_[r]);
      while (!stack.empty()) {
        const auto i = stack.back();
        stack.pop_back();
        g.nodes.push_back(i);
        for (auto c : {nodes_[i].a, nodes_[i].b}) {
          if (c >= 0 && stamp[c] != gtag) {
            stamp[c] = gtag;
            stack.push_back(c);
          }
        }
      }
    }
    std::sort(g.nodes.begin(), g.nodes.end());
  }

  // Jacobian pattern: root-major, columns sorted.
  jac_pattern_ = {};
  jac_pattern_.rows = nroots;
  jac_pattern_.cols = num_variables_;
  jac_offset_.assign(nroots, 0);
  for (std::size_t r = 0; r < nroots; ++r) {
    jac_offset_[r] = jac_pattern_.row.size();
    for (auto v : root_vars_[r]) {
      if (static_cast<std::size_t>(v) >= num_variables_) {
        throw std::logic_error("variable reference out of range");
      }
      jac_pattern_.row.push_back(static_cast<std::int32_t>(r));
      jac_pattern_.col.push_back(v);
    }
  }

  // Hessian pattern: merged lower triangle over all roots.
  std::vector<std::pair<std::int32_t, std::int32_t>> all;
  for (const auto& e : root_hess_) all.insert(all.end(), e.begin(), e.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  hess_pattern_ = {};
  hess_pattern_.rows = hess_pattern_.cols = num_variables_;
  for (auto [i, j] : all) {
    hess_pattern_.row.push_back(i);
    hess_pattern_.col.push_back(j);
  }
  auto slot_of = [&](std::pair<std::int32_t, std::int32_t> e) {
    auto it = std::lower_bound(all.begin(), all.end(), e);
    return static_cast<std::int32_t>(it - all.begin());
  };
  root_hess_slot_.assign(nroots, {});
  for (std::size_t r = 0; r < nroots; ++r) {
    for (auto e : root_hess_[r]) root_hess_slot_[r].push_back(slot_of(e));
  }
  for (auto& g : groups_) {
    std::vector<std::pair<std::int32_t, std::int32_t>> ge;
    for (auto r : g.roots) ge.insert(ge.end(), root_hess_[r].begin(), root_hess_[r].end());
    std::sort(ge.begin(), ge.end());
    ge.erase(std::unique(ge.begin(), ge.end()), ge.end());
    auto local = [&](std::int32_t v) {
      return static_cast<std::int32_t>(
          std::lower_bound(g.vars.begin(), g.vars.end(), v) - g.vars.begin());
    };
    for (auto e : ge) {
      g.hess_i.push_back(local(e.first));
      g.hess_j.push_back(local(e.second));
      g.hess_slot.push_back(slot_of(e));
    }
  }

  sealed_ = true;
}

std::span<const std::int32_t> ExprGraph::root_variables(std::size_t r) const {
  require_sealed();
  return root_vars_.at(r);
}

std::span<const std::pair<std::int32_t, std::int32_t>> ExprGraph::root_hessian(
    std::size_t r) const {
  require_sealed();
  return root_hess_.at(r);
}

std::span<const std::int32_t> ExprGraph::root_hessian_slots(std::size_t r) const {
  require_sealed();
  return root_hess_slot_.at(r);
}

// ---------------------------------------------------------------------------
// Numerics

void ExprGraph::check_point(std::span<const double> x) const {
  require_sealed();
  if (x.size() != num_variables_) {
    throw std::invalid_argument(fmt::format(
        "point has {} entries, graph expects {}", x.size(), num_variables_));
  }
}

void ExprGraph::forward(std::span<const double> x, GraphWorkspace& ws) const {
  check_point(x);
  const std::size_t n = nodes_.size();
  ws.value.resize(n);
  double* v = ws.value.data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& nd = nodes_[i];
    switch (nd.op) {
      case OpKind::Constant: v[i] = nd.value; break;
      case OpKind::Variable: v[i] = x[static_cast<std::size_t>(nd.value)]; break;
      case OpKind::Add: v[i] = v[nd.a] + v[nd.b]; break;
      case OpKind::Sub: v[i] = v[nd.a] - v[nd.b]; break;
      case OpKind::Mul: v[i] = v[nd.a] * v[nd.b]; break;
      case OpKind::Div:
        if (v[nd.b] == 0.0) throw EvaluationError(i, "division by zero");
        v[i] = v[nd.a] / v[nd.b];
        break;
      case OpKind::PowInt: {
        const int k = static_cast<int>(nd.value);
        if (k < 0 && v[nd.a] == 0.0) throw EvaluationError(i, "division by zero");
        v[i] = ipow(v[nd.a], k);
        break;
      }
      case OpKind::Square: v[i] = v[nd.a] * v[nd.a]; break;
      case OpKind::Neg: v[i] = -v[nd.a]; break;
      case OpKind::Tanh: v[i] = std::tanh(v[nd.a]); break;
      case OpKind::Sigmoid: v[i] = sigmoid_value(v[nd.a]); break;
      case OpKind::Exp: v[i] = std::exp(v[nd.a]); break;
      case OpKind::Log:
        if (!(v[nd.a] > 0.0)) throw EvaluationError(i, "log of non-positive value");
        v[i] = std::log(v[nd.a]);
        break;
      case OpKind::Sin: v[i] = std::sin(v[nd.a]); break;
      case OpKind::Cos: v[i] = std::cos(v[nd.a]); break;
    }
  }
}

std::vector<double> ExprGraph::evaluate(std::span<const double> x) const {
  GraphWorkspace ws;
  std::vector<double> out(roots_.size());
  evaluate(x, ws, out);
  return out;
}

void ExprGraph::evaluate(std::span<const double> x, GraphWorkspace& ws,
                         std::span<double> out) const {
  forward(x, ws);
  for (std::size_t r = 0; r < roots_.size(); ++r) out[r] = ws.value[roots_[r]];
}

std::vector<double> ExprGraph::jacobian(std::span<const double> x) const {
  GraphWorkspace ws;
  std::vector<double> out(jac_pattern_.nnz());
  jacobian(x, ws, out);
  return out;
}

void ExprGraph::reverse_root(std::size_t r, GraphWorkspace& ws,
                             std::span<double> grad_out) const {
  const auto& g = groups_[root_group_[r]];
  const auto m = g.nodes.size();
  ws.local.resize(nodes_.size());
  for (std::size_t l = 0; l < m; ++l) ws.local[g.nodes[l]] = static_cast<std::int32_t>(l);
  ws.adjoint.assign(m, 0.0);
  double* adj = ws.adjoint.data();
  const double* v = ws.value.data();
  const auto* loc = ws.local.data();

  const auto top = loc[roots_[r]];
  adj[top] = 1.0;
  for (std::int64_t l = top; l >= 0; --l) {
    const double w = adj[l];
    if (w == 0.0) continue;
    const auto i = g.nodes[l];
    const auto& nd = nodes_[i];
    switch (nd.op) {
      case OpKind::Constant:
      case OpKind::Variable:
        break;
      case OpKind::Add:
        adj[loc[nd.a]] += w;
        adj[loc[nd.b]] += w;
        break;
      case OpKind::Sub:
        adj[loc[nd.a]] += w;
        adj[loc[nd.b]] -= w;
        break;
      case OpKind::Mul:
        adj[loc[nd.a]] += w * v[nd.b];
        adj[loc[nd.b]] += w * v[nd.a];
        break;
      case OpKind::Div: {
        const double q = v[nd.b];
        adj[loc[nd.a]] += w / q;
        adj[loc[nd.b]] -= w * v[nd.a] / (q * q);
        break;
      }
      default:
        adj[loc[nd.a]] += w * unary_derivs(nd, v[nd.a], v[i]).d1;
        break;
    }
  }
  const auto& vars = root_vars_[r];
  for (std::size_t k = 0; k < vars.size(); ++k) {
    grad_out[k] = adj[loc[var_node_[vars[k]]]];
  }
}

void ExprGraph::jacobian(std::span<const double> x, GraphWorkspace& ws,
                         std::span<double> out, bool run_forward) const {
  if (run_forward) {
    forward(x, ws);
  } else {
    check_point(x);
  }
  for (std::size_t r = 0; r < roots_.size(); ++r) {
    reverse_root(r, ws, out.subspan(jac_offset_[r], root_vars_[r].size()));
  }
}

void ExprGraph::gradient(std::size_t r, std::span<const double> x, GraphWorkspace& ws,
                         std::span<double> out, bool run_forward) const {
  if (run_forward) {
    forward(x, ws);
  } else {
    check_point(x);
  }
  if (r >= roots_.size()) throw std::out_of_range("root index out of range");
  reverse_root(r, ws, out.first(root_vars_[r].size()));
}

std::vector<double> ExprGraph::hessian_lagrangian(
    std::span<const double> x, double obj_factor,
    std::span<const double> weights) const {
  GraphWorkspace ws;
  std::vector<double> out(hess_pattern_.nnz());
  hessian_lagrangian(x, obj_factor, weights, ws, out);
  return out;
}

void ExprGraph::hessian_lagrangian(std::span<const double> x, double obj_factor,
                                   std::span<const double> weights,
                                   GraphWorkspace& ws,
                                   std::span<double> out) const {
  if (weights.size() != roots_.size()) {
    throw std::invalid_argument(fmt::format(
        "{} multipliers given for {} roots", weights.size(), roots_.size()));
  }
  forward(x, ws);
  std::fill(out.begin(), out.end(), 0.0);
  ws.local.resize(nodes_.size());
  const double* v = ws.value.data();

  for (const auto& g : groups_) {
    if (g.hess_slot.empty()) continue;
    bool any = false;
    for (auto r : g.roots) {
      const double w = r == 0 ? obj_factor * weights[0] : weights[r];
      if (w != 0.0) any = true;
    }
    if (!any) continue;

    const std::size_t k = g.vars.size();
    const std::size_t m = g.nodes.size();
    auto* loc = ws.local.data();
    for (std::size_t l = 0; l < m; ++l) loc[g.nodes[l]] = static_cast<std::int32_t>(l);

    // Forward tangents along each variable of the group.
    ws.tangent.assign(m * k, 0.0);
    double* tan = ws.tangent.data();
    for (std::size_t l = 0; l < m; ++l) {
      const auto i = g.nodes[l];
      const auto& nd = nodes_[i];
      double* t = tan + l * k;
      switch (nd.op) {
        case OpKind::Constant:
          break;
        case OpKind::Variable: {
          const auto var = static_cast<std::int32_t>(nd.value);
          const auto p = std::lower_bound(g.vars.begin(), g.vars.end(), var) - g.vars.begin();
          t[p] = 1.0;
          break;
        }
        case OpKind::Add: {
          const double* ta = tan + loc[nd.a] * k;
          const double* tb = tan + loc[nd.b] * k;
          for (std::size_t j = 0; j < k; ++j) t[j] = ta[j] + tb[j];
          break;
        }
        case OpKind::Sub: {
          const double* ta = tan + loc[nd.a] * k;
          const double* tb = tan + loc[nd.b] * k;
          for (std::size_t j = 0; j < k; ++j) t[j] = ta[j] - tb[j];
          break;
        }
        case OpKind::Mul: {
          const double* ta = tan + loc[nd.a] * k;
          const double* tb = tan + loc[nd.b] * k;
          const double va = v[nd.a], vb = v[nd.b];
          for (std::size_t j = 0; j < k; ++j) t[j] = ta[j] * vb + va * tb[j];
          break;
        }
        case OpKind::Div: {
          const double* ta = tan + loc[nd.a] * k;
          const double* tb = tan + loc[nd.b] * k;
          const double q = v[nd.b], val = v[i];
          for (std::size_t j = 0; j < k; ++j) t[j] = (ta[j] - val * tb[j]) / q;
          break;
        }
        default: {
          const double* ta = tan + loc[nd.a] * k;
          const double d1 = unary_derivs(nd, v[nd.a], v[i]).d1;
          for (std::size_t j = 0; j < k; ++j) t[j] = d1 * ta[j];
          break;
        }
      }
    }

    // Reverse sweep of adjoints and their tangents.
    ws.adjoint.assign(m, 0.0);
    ws.adjoint_tangent.assign(m * k, 0.0);
    double* adj = ws.adjoint.data();
    double* at = ws.adjoint_tangent.data();
    for (auto r : g.roots) {
      const double w = r == 0 ? obj_factor * weights[0] : weights[r];
      adj[loc[roots_[r]]] += w;
    }
    for (std::int64_t l = static_cast<std::int64_t>(m) - 1; l >= 0; --l) {
      const double w = adj[l];
      double* wt = at + l * k;
      const auto i = g.nodes[l];
      const auto& nd = nodes_[i];
      switch (nd.op) {
        case OpKind::Constant:
        case OpKind::Variable:
          break;
        case OpKind::Add:
        case OpKind::Sub: {
          const double sgn = nd.op == OpKind::Add ? 1.0 : -1.0;
          const auto la = loc[nd.a], lb = loc[nd.b];
          adj[la] += w;
          adj[lb] += sgn * w;
          double* aa = at + la * k;
          double* ab = at + lb * k;
          for (std::size_t j = 0; j < k; ++j) {
            aa[j] += wt[j];
            ab[j] += sgn * wt[j];
          }
          break;
        }
        case OpKind::Mul: {
          const auto la = loc[nd.a], lb = loc[nd.b];
          const double va = v[nd.a], vb = v[nd.b];
          const double* ta = tan + la * k;
          const double* tb = tan + lb * k;
          adj[la] += w * vb;
          adj[lb] += w * va;
          double* aa = at + la * k;
          double* ab = at + lb * k;
          for (std::size_t j = 0; j < k; ++j) {
            const double ra = wt[j] * vb + w * tb[j];
            const double rb = wt[j] * va + w * ta[j];
            aa[j] += ra;
            ab[j] += rb;
          }
          break;
        }
        case OpKind::Div: {
          const auto la = loc[nd.a], lb = loc[nd.b];
          const double u = v[nd.a], q = v[nd.b];
          const double q2 = q * q, q3 = q2 * q;
          const double* ta = tan + la * k;
          const double* tb = tan + lb * k;
          adj[la] += w / q;
          adj[lb] -= w * u / q2;
          double* aa = at + la * k;
          double* ab = at + lb * k;
          for (std::size_t j = 0; j < k; ++j) {
            const double ra = wt[j] / q - w * tb[j] / q2;
            const double rb = -wt[j] * u / q2 + w * (-ta[j] / q2 + 2.0 * u * tb[j] / q3);
            aa[j] += ra;
            ab[j] += rb;
          }
          break;
        }
        default: {
          const auto la = loc[nd.a];
          const auto d = unary_derivs(nd, v[nd.a], v[i]);
          const double* ta = tan + la * k;
          adj[la] += w * d.d1;
          double* aa = at + la * k;
          for (std::size_t j = 0; j < k; ++j) aa[j] += wt[j] * d.d1 + w * d.d2 * ta[j];
          break;
        }
      }
    }

    for (std::size_t e = 0; e < g.hess_slot.size(); ++e) {
      const auto row_var = g.vars[g.hess_i[e]];
      const auto l = loc[var_node_[row_var]];
      out[g.hess_slot[e]] += at[l * k + g.hess_j[e]];
    }
  }
}

void ExprGraph::dump_sexpr(std::ostream& os) const {
  os << fmt::format("(graph (variables {}) (nodes {}) (roots {}))\n",
                    num_variables_, nodes_.size(), roots_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& nd = nodes_[i];
    switch (nd.op) {
      case OpKind::Constant:
        os << fmt::format("(n{} (const {}))\n", i, nd.value);
        break;
      case OpKind::Variable:
        os << fmt::format("(n{} (var {}))\n", i, static_cast<long>(nd.value));
        break;
      case OpKind::PowInt:
        os << fmt::format("(n{} (pow n{} {}))\n", i, nd.a, static_cast<long>(nd.value));
        break;
      default:
        if (is_binary(nd.op)) {
          os << fmt::format("(n{} ({} n{} n{}))\n", i, op_name(nd.op), nd.a, nd.b);
        } else {
          os << fmt::format("(n{} ({} n{}))\n", i, op_name(nd.op), nd.a);
        }
    }
  }
  for (std::size_t r = 0; r < roots_.size(); ++r) {
    os << fmt::format("(root {} n{})\n", r, roots_[r]);
  }
}

// ---------------------------------------------------------------------------

FdReport fd_check(const ExprGraph& graph, std::span<const double> x, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite-difference step must be positive");
  FdReport rep;
  const std::size_t n = graph.num_variables();
  const std::size_t m = graph.root_count();
  const auto& jp = graph.jacobian_pattern();
  const auto& hp = graph.hessian_pattern();

  std::vector<double> jad(m * n, 0.0), had(n * n, 0.0);
  try {
    const auto jv = graph.jacobian(x);
    for (std::size_t e = 0; e < jv.size(); ++e) jad[jp.row[e] * n + jp.col[e]] = jv[e];
    std::vector<double> ones(m, 1.0);
    const auto hv = graph.hessian_lagrangian(x, 1.0, ones);
    for (std::size_t e = 0; e < hv.size(); ++e) had[hp.row[e] * n + hp.col[e]] = hv[e];
  } catch (const EvaluationError&) {
    rep.jacobian_nan = rep.hessian_nan = true;
    return rep;
  }

  auto rel = [](double ad, double fd) { return std::abs(ad - fd) / std::max(1.0, std::abs(fd)); };

  std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
  for (std::size_t j = 0; j < n; ++j) {
    xp[j] = x[j] + step;
    xm[j] = x[j] - step;
    std::vector<double> gp, gm, jp_v, jm_v;
    bool ok = true;
    try {
      gp = graph.evaluate(xp);
      gm = graph.evaluate(xm);
      jp_v = graph.jacobian(xp);
      jm_v = graph.jacobian(xm);
    } catch (const EvaluationError&) {
      ok = false;
    }
    xp[j] = xm[j] = x[j];
    if (!ok) {
      rep.jacobian_nan = rep.hessian_nan = true;
      continue;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double fd = (gp[i] - gm[i]) / (2.0 * step);
      if (!std::isfinite(fd)) {
        rep.jacobian_nan = true;
        continue;
      }
      const double e = rel(jad[i * n + j], fd);
      if (e > rep.max_jacobian_error) {
        rep.max_jacobian_error = e;
        rep.jacobian_worst_row = i;
        rep.jacobian_worst_col = j;
      }
    }
    // Gradient of the unit-weighted Lagrangian at x +/- h e_j.
    std::vector<double> lp(n, 0.0), lm(n, 0.0);
    for (std::size_t e = 0; e < jp_v.size(); ++e) {
      lp[jp.col[e]] += jp_v[e];
      lm[jp.col[e]] += jm_v[e];
    }
    for (std::size_t i = j; i < n; ++i) {
      const double fd = (lp[i] - lm[i]) / (2.0 * step);
      if (!std::isfinite(fd)) {
        rep.hessian_nan = true;
        continue;
      }
      const double e = rel(had[i * n + j], fd);
      if (e > rep.max_hessian_error) {
        rep.max_hessian_error = e;
        rep.hessian_worst_row = i;
        rep.hessian_worst_col = j;
      }
    }
  }
  return rep;
}

}  // namespace mlopt
