#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlopt/adcore.hpp"

namespace mlopt {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Vector-valued callback oracle y = F(x) hidden from the expression graph.
struct ExternalOperator {
  std::string name;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  /// y = F(x); y has output_dim entries.
  std::function<void(std::span<const double> x, std::span<double> y)> eval;
  /// Dense row-major output_dim x input_dim block.
  std::function<void(std::span<const double> x, std::span<double> jac)> jacobian;
  /// Packed lower triangle of sum_i w_i Hess F_i: entry (i, j), j <= i, at
  /// i*(i+1)/2 + j. Optional.
  std::function<void(std::span<const double> x, std::span<const double> w,
                     std::span<double> hess)>
      hessian;

  bool has_hessian() const { return static_cast<bool>(hessian); }
  std::size_t hessian_size() const { return input_dim * (input_dim + 1) / 2; }
  void validate() const;
};

struct Variable {
  std::string name;
  double lower = -kInf;
  double upper = kInf;
  double start = 0.0;
};

enum class RowKind : std::uint8_t { Graph, Operator };

struct ConstraintRow {
  RowKind kind = RowKind::Graph;
  std::size_t root = 0;    // graph rows: root index
  std::size_t block = 0;   // operator rows: block index
  std::size_t output = 0;  // operator rows: output component
  double lower = 0.0;
  double upper = 0.0;
  std::int64_t slack = -1;  // body is g(x) - x[slack] when set
  std::string tag;

  bool equality() const { return lower == upper; }
};

/// One use of an operator: rows y_j - F_j(x) when outputs are given,
/// otherwise F_j(x).
struct OperatorBlock {
  std::size_t op = 0;
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> outputs;
  std::size_t first_row = 0;
};

struct CanonicalModel;
CanonicalModel canonicalize(const class NlpModel& model);

struct RowRange {
  std::size_t first = 0;
  std::size_t count = 0;
};

/// min f(x) s.t. lower <= g(x) <= upper, x_lower <= x <= x_upper.
/// The objective is root 0 of the owned expression graph.
class NlpModel {
 public:
  NlpModel();

  // ---- variables ----
  /// A NaN start picks the midpoint of finite bounds, else 0, projected.
  std::size_t add_variable(double lower, double upper,
                           double start = std::numeric_limits<double>::quiet_NaN(),
                           std::string name = {});
  std::size_t num_variables() const { return vars_.size(); }
  const Variable& variable(std::size_t i) const { return vars_.at(i); }
  const std::vector<Variable>& variables() const { return vars_; }
  void set_start(std::size_t i, double start);
  void set_bounds(std::size_t i, double lower, double upper);
  std::vector<double> start_point() const;

  // ---- expressions ----
  ExprGraph& graph();
  const ExprGraph& graph() const { return *graph_; }
  std::shared_ptr<const ExprGraph> shared_graph() const { return graph_; }
  Expr var(std::size_t i);
  void set_objective(Expr e);

  // ---- constraints ----
  RowRange add_constraint(Expr body, double lower, double upper, std::string tag = {});
  RowRange add_constraint_root(std::size_t root, double lower, double upper,
                               std::string tag = {});
  std::size_t add_operator(ExternalOperator op);
  /// Appends output_dim rows. With outputs given, rows are y_j - F_j(x).
  RowRange add_operator_rows(std::size_t op, std::vector<std::size_t> inputs,
                             std::vector<std::size_t> outputs, double lower,
                             double upper, std::string tag = {});

  std::size_t num_rows() const { return rows_.size(); }
  const ConstraintRow& row(std::size_t i) const { return rows_.at(i); }
  const std::vector<ConstraintRow>& rows() const { return rows_; }
  const std::vector<ExternalOperator>& operators() const { return ops_; }
  const std::vector<OperatorBlock>& blocks() const { return blocks_; }

  // ---- structure ----
  /// Seals the graph (if still open) and builds the derivative patterns.
  void seal();
  bool sealed() const { return sealed_; }
  bool canonical() const;

  const SparsityPattern& jacobian_pattern() const;
  /// Lower triangle over the objective, referenced roots and operator blocks.
  const SparsityPattern& hessian_pattern() const;

  /// Per row: first Jacobian slot (row r spans [offset[r], offset[r+1])).
  std::span<const std::size_t> jacobian_row_offsets() const { return jac_row_ptr_; }

 private:
  friend class NlpEvaluator;
  friend struct CanonicalModel;
  friend CanonicalModel canonicalize(const NlpModel& model);

  void require_open() const;
  void require_sealed() const;
  void check_var(std::size_t i) const;
  void build_structure();

  std::shared_ptr<ExprGraph> graph_;
  std::vector<Variable> vars_;
  std::vector<ConstraintRow> rows_;
  std::vector<ExternalOperator> ops_;
  std::vector<OperatorBlock> blocks_;
  bool sealed_ = false;

  // structure
  SparsityPattern jac_;
  SparsityPattern hess_;
  std::vector<std::size_t> jac_row_ptr_;
  // Source of each Jacobian slot: >= 0 local index into the row's graph
  // gradient or operator Jacobian row; -1 output variable (+1); -2 slack (-1).
  std::vector<std::int32_t> jac_src_;
  std::vector<std::int32_t> graph_hess_map_;             // graph slot -> model slot
  std::vector<std::vector<std::int32_t>> op_hess_map_;   // per block packed -> slot
  std::vector<std::uint8_t> root_used_;
};

/// Evaluates a sealed model. Owns scratch buffers; one per concurrent user.
class NlpEvaluator {
 public:
  explicit NlpEvaluator(const NlpModel& model);

  const NlpModel& model() const { return *model_; }

  double objective(std::span<const double> x);
  /// Dense gradient of the objective.
  void gradient(std::span<const double> x, std::span<double> grad);
  /// Row bodies g(x) (bounds not subtracted).
  void constraints(std::span<const double> x, std::span<double> g);
  /// Values aligned with the model's jacobian_pattern().
  void jacobian(std::span<const double> x, std::span<double> values);
  /// obj_factor * Hess f + sum_r lambda_r Hess g_r, aligned with hessian_pattern().
  void hessian(std::span<const double> x, double obj_factor,
               std::span<const double> lambda, std::span<double> values);

  std::size_t operator_eval_count() const { return op_evals_; }

 private:
  std::span<const double> graph_point(std::span<const double> x) const;
  void ensure_forward(std::span<const double> x);
  void ensure_operators(std::span<const double> x);

  const NlpModel* model_;
  GraphWorkspace ws_;
  std::vector<double> cached_x_;
  bool forward_valid_ = false;
  std::vector<double> op_cached_x_;
  bool op_valid_ = false;
  std::vector<std::vector<double>> op_in_;
  std::vector<std::vector<double>> op_out_;
  std::vector<std::vector<double>> op_jac_;
  std::vector<std::vector<double>> op_hess_;
  std::vector<double> grad_tmp_;
  std::vector<double> root_w_;
  std::vector<double> graph_hess_;
  std::vector<double> w_tmp_;
  std::size_t op_evals_ = 0;
};

/// Equality-only form: each inequality row r gains a slack s_r bounded by the
/// row bounds, and becomes g_r(x) - s_r = 0.
struct CanonicalModel {
  NlpModel model;
  std::size_t original_variables = 0;
  std::vector<std::int64_t> row_slack;  // per row, -1 when already equality

  /// Original variable values from a canonical point.
  std::vector<double> recover_variables(std::span<const double> x) const;
  /// Row activities g(x) of the original model.
  std::vector<double> row_activities(std::span<const double> x) const;
  /// Canonical point for an original point (slacks set to row activities).
  std::vector<double> lift(std::span<const double> x_original) const;
};

CanonicalModel canonicalize(const NlpModel& model);

struct TagCounts {
  std::string tag;
  std::size_t constraints = 0;
  std::size_t jacobian_nnz = 0;
};

struct StructureReport {
  std::size_t variables = 0;
  std::size_t constraints = 0;
  std::size_t jacobian_nnz = 0;
  std::size_t hessian_nnz = 0;
  std::vector<TagCounts> tags;  // sorted by tag; untagged rows under ""
};

StructureReport structure_report(const NlpModel& model);

struct StructureRow {
  std::string parameters;
  std::string formulation;
  StructureReport report;
};

std::string structure_table_csv(std::span<const StructureRow> rows);
std::string structure_table_markdown(std::span<const StructureRow> rows);

}  // namespace mlopt
