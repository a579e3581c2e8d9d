#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlopt {

/// Thrown when a forward sweep hits a domain violation (log of a
/// non-positive value, division by zero).
class EvaluationError : public std::runtime_error {
 public:
  EvaluationError(std::size_t node, const std::string& what)
      : std::runtime_error(what + " at node " + std::to_string(node)),
        node_(node) {}

  std::size_t node() const noexcept { return node_; }

 private:
  std::size_t node_;
};

enum class OpKind : std::uint8_t {
  Constant,
  Variable,
  Add,
  Sub,
  Mul,
  Div,
  PowInt,
  Square,
  Neg,
  Tanh,
  Sigmoid,
  Exp,
  Log,
  Sin,
  Cos,
};

const char* op_name(OpKind op);

struct NodeId {
  std::int32_t value = -1;

  bool valid() const { return value >= 0; }
  friend bool operator==(NodeId, NodeId) = default;
};

/// Coordinate-form sparsity. Entries are unique and sorted by (row, col).
struct SparsityPattern {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> row;
  std::vector<std::int32_t> col;

  std::size_t nnz() const { return row.size(); }
};

class ExprGraph;

/// Lightweight handle used to write expressions with ordinary operators.
/// Every operation appends nodes to the owning graph.
class Expr {
 public:
  Expr() = default;
  Expr(ExprGraph* graph, NodeId id) : graph_(graph), id_(id) {}

  NodeId id() const { return id_; }
  ExprGraph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr && id_.valid(); }

 private:
  ExprGraph* graph_ = nullptr;
  NodeId id_;
};

Expr operator+(Expr a, Expr b);
Expr operator-(Expr a, Expr b);
Expr operator*(Expr a, Expr b);
Expr operator/(Expr a, Expr b);
Expr operator-(Expr a);
Expr operator+(Expr a, double b);
Expr operator+(double a, Expr b);
Expr operator-(Expr a, double b);
Expr operator-(double a, Expr b);
Expr operator*(Expr a, double b);
Expr operator*(double a, Expr b);
Expr operator/(Expr a, double b);
Expr operator/(double a, Expr b);
Expr& operator+=(Expr& a, Expr b);
Expr& operator-=(Expr& a, Expr b);

Expr square(Expr a);
Expr pow(Expr a, int exponent);
Expr tanh(Expr a);
Expr sigmoid(Expr a);
Expr exp(Expr a);
Expr log(Expr a);
Expr sin(Expr a);
Expr cos(Expr a);

/// Scratch buffers for one concurrent evaluator of a sealed graph.
struct GraphWorkspace {
  std::vector<double> value;
  std::vector<double> adjoint;
  std::vector<double> tangent;
  std::vector<double> adjoint_tangent;
  std::vector<std::int32_t> local;
  std::vector<double> dense;
};

/// Expression DAG over scalar decision variables, stored in topological
/// order (children always precede parents). Roots name the scalar
/// functions the graph exposes; root 0 conventionally holds an objective.
class ExprGraph {
 public:
  struct Node {
    OpKind op = OpKind::Constant;
    std::int32_t a = -1;
    std::int32_t b = -1;
    double value = 0.0;  // constant value, variable index, or integer exponent
  };

  ExprGraph() = default;
  explicit ExprGraph(std::size_t num_variables);

  // ---- construction (before seal) ----
  void set_num_variables(std::size_t n);
  std::size_t num_variables() const { return num_variables_; }

  Expr constant(double v);
  Expr variable(std::size_t index);
  NodeId push(OpKind op, NodeId a = {}, NodeId b = {}, double value = 0.0);

  std::size_t add_root(Expr e);
  void set_root(std::size_t root, Expr e);

  /// Freezes the graph and computes the point-independent derivative
  /// structure. Further construction calls throw.
  void seal();
  bool sealed() const { return sealed_; }

  // ---- inspection ----
  std::size_t node_count() const { return nodes_.size(); }
  std::size_t root_count() const { return roots_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }
  NodeId root(std::size_t r) const { return NodeId{roots_[r]}; }

  /// Sorted variable indices a root depends on.
  std::span<const std::int32_t> root_variables(std::size_t r) const;
  /// Lower-triangular (row >= col) Hessian coordinates of a single root.
  std::span<const std::pair<std::int32_t, std::int32_t>> root_hessian(
      std::size_t r) const;

  const SparsityPattern& jacobian_pattern() const { return jac_pattern_; }
  const SparsityPattern& hessian_pattern() const { return hess_pattern_; }

  // ---- numerics (after seal) ----
  void forward(std::span<const double> x, GraphWorkspace& ws) const;

  std::vector<double> evaluate(std::span<const double> x) const;
  void evaluate(std::span<const double> x, GraphWorkspace& ws,
                std::span<double> out) const;

  /// Values aligned with jacobian_pattern().
  std::vector<double> jacobian(std::span<const double> x) const;
  void jacobian(std::span<const double> x, GraphWorkspace& ws,
                std::span<double> out, bool run_forward = true) const;

  /// Gradient of one root, aligned with root_variables(r). With
  /// run_forward false the workspace must hold a forward sweep at x.
  void gradient(std::size_t r, std::span<const double> x, GraphWorkspace& ws,
                std::span<double> out, bool run_forward = true) const;

  /// Values of obj_factor*w0*H(root 0) + sum_{r>0} w_r H(root r), aligned with
  /// hessian_pattern(). Roots with zero weight are skipped.
  std::vector<double> hessian_lagrangian(std::span<const double> x,
                                         double obj_factor,
                                         std::span<const double> weights) const;
  void hessian_lagrangian(std::span<const double> x, double obj_factor,
                          std::span<const double> weights, GraphWorkspace& ws,
                          std::span<double> out) const;

  /// Position of each root's Jacobian entries inside jacobian_pattern().
  std::size_t jacobian_offset(std::size_t r) const { return jac_offset_[r]; }
  /// Maps a root's local hessian entry k to its slot in hessian_pattern().
  std::span<const std::int32_t> root_hessian_slots(std::size_t r) const;

  /// Plain-text S-expression dump: one line per node, then one per root.
  void dump_sexpr(std::ostream& os) const;

 private:
  struct Group {
    std::vector<std::int32_t> roots;
    std::vector<std::int32_t> vars;
    std::vector<std::int32_t> nodes;  // ascending
    // hessian entries local (i >= j in vars ordering) -> global slot
    std::vector<std::int32_t> hess_i, hess_j, hess_slot;
  };

  void require_open() const;
  void require_sealed() const;
  void check_point(std::span<const double> x) const;
  void reverse_root(std::size_t r, GraphWorkspace& ws,
                    std::span<double> grad_out) const;

  std::size_t num_variables_ = 0;
  std::vector<Node> nodes_;
  std::vector<std::int32_t> roots_;
  std::vector<std::int32_t> var_node_;
  bool sealed_ = false;

  // structure computed at seal
  std::vector<std::int32_t> root_group_;
  std::vector<Group> groups_;
  std::vector<std::vector<std::int32_t>> root_vars_;
  std::vector<std::vector<std::pair<std::int32_t, std::int32_t>>> root_hess_;
  std::vector<std::vector<std::int32_t>> root_hess_slot_;
  std::vector<std::size_t> jac_offset_;
  SparsityPattern jac_pattern_;
  SparsityPattern hess_pattern_;
};

/// Result of comparing AD derivatives against central differences.
struct FdReport {
  double max_jacobian_error = 0.0;
  double max_hessian_error = 0.0;
  std::size_t jacobian_worst_row = 0;
  std::size_t jacobian_worst_col = 0;
  std::size_t hessian_worst_row = 0;
  std::size_t hessian_worst_col = 0;
  bool jacobian_nan = false;
  bool hessian_nan = false;
};

/// Central-difference check of jacobian() and hessian_lagrangian() (all root
/// weights 1). Errors are |ad - fd| / max(1, |fd|) over the dense matrices, so
/// entries missing from a pattern are caught too.
FdReport fd_check(const ExprGraph& graph, std::span<const double> x,
                  double step);

}  // namespace mlopt
