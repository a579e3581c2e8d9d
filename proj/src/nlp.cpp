#include "mlopt/nlp.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include <fmt/format.h>

#include "mlopt/table.hpp"

namespace mlopt {

void ExternalOperator::validate() const {
  if (input_dim == 0 || output_dim == 0) {
    throw std::invalid_argument("operator '" + name + "' has a zero dimension");
  }
  if (!eval || !jacobian) {
    throw std::invalid_argument("operator '" + name + "' lacks value or Jacobian callbacks");
  }
}

namespace {

double default_start(double lo, double hi, double start) {
  if (std::isnan(start)) {
    if (std::isfinite(lo) && std::isfinite(hi)) {
      start = 0.5 * (lo + hi);
    } else {
      start = 0.0;
    }
  }
  return std::clamp(start, lo, hi);
}

void check_bounds(double lo, double hi, const char* what) {
  if (std::isnan(lo) || std::isnan(hi) || lo > hi) {
    throw std::invalid_argument(fmt::format("{} bounds inverted or NaN: [{}, {}]", what, lo, hi));
  }
}

}  // namespace

NlpModel::NlpModel() : graph_(std::make_shared<ExprGraph>()) {
  graph_->add_root(graph_->constant(0.0));
}

void NlpModel::require_open() const {
  if (sealed_) throw std::logic_error("model is sealed");
}

void NlpModel::require_sealed() const {
  if (!sealed_) throw std::logic_error("model is not sealed");
}

void NlpModel::check_var(std::size_t i) const {
  if (i >= vars_.size()) {
    throw std::out_of_range(fmt::format("variable {} not registered ({} known)", i, vars_.size()));
  }
}

std::size_t NlpModel::add_variable(double lower, double upper, double start, std::string name) {
  require_open();
  check_bounds(lower, upper, "variable");
  Variable v;
  v.name = name.empty() ? fmt::format("x{}", vars_.size()) : std::move(name);
  v.lower = lower;
  v.upper = upper;
  v.start = default_start(lower, upper, start);
  vars_.push_back(std::move(v));
  if (!graph_->sealed()) graph_->set_num_variables(vars_.size());
  return vars_.size() - 1;
}

void NlpModel::set_start(std::size_t i, double start) {
  check_var(i);
  vars_[i].start = default_start(vars_[i].lower, vars_[i].upper, start);
}

void NlpModel::set_bounds(std::size_t i, double lower, double upper) {
  require_open();
  check_var(i);
  check_bounds(lower, upper, "variable");
  vars_[i].lower = lower;
  vars_[i].upper = upper;
  vars_[i].start = std::clamp(vars_[i].start, lower, upper);
}

std::vector<double> NlpModel::start_point() const {
  std::vector<double> x(vars_.size());
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    x[i] = std::clamp(vars_[i].start, vars_[i].lower, vars_[i].upper);
  }
  return x;
}

ExprGraph& NlpModel::graph() {
  return *graph_;
}

Expr NlpModel::var(std::size_t i) {
  check_var(i);
  return graph().variable(i);
}

void NlpModel::set_objective(Expr e) {
  require_open();
  graph_->set_root(0, e);
}

RowRange NlpModel::add_constraint(Expr body, double lower, double upper, std::string tag) {
  require_open();
  const auto root = graph_->add_root(body);
  return add_constraint_root(root, lower, upper, std::move(tag));
}

RowRange NlpModel::add_constraint_root(std::size_t root, double lower, double upper,
                                       std::string tag) {
  require_open();
  check_bounds(lower, upper, "row");
  if (root == 0 || root >= graph_->root_count()) {
    throw std::invalid_argument(fmt::format("constraint references invalid root {}", root));
  }
  ConstraintRow r;
  r.kind = RowKind::Graph;
  r.root = root;
  r.lower = lower;
  r.upper = upper;
  r.tag = std::move(tag);
  rows_.push_back(std::move(r));
  return {rows_.size() - 1, 1};
}

std::size_t NlpModel::add_operator(ExternalOperator op) {
  require_open();
  op.validate();
  ops_.push_back(std::move(op));
  return ops_.size() - 1;
}

RowRange NlpModel::add_operator_rows(std::size_t op, std::vector<std::size_t> inputs,
                                     std::vector<std::size_t> outputs, double lower,
                                     double upper, std::string tag) {
  require_open();
  check_bounds(lower, upper, "row");
  if (op >= ops_.size()) throw std::invalid_argument(fmt::format("unknown operator {}", op));
  const auto& o = ops_[op];
  if (inputs.size() != o.input_dim) {
    throw std::invalid_argument(fmt::format("operator '{}' takes {} inputs, got {}", o.name,
                                            o.input_dim, inputs.size()));
  }
  if (!outputs.empty() && outputs.size() != o.output_dim) {
    throw std::invalid_argument(fmt::format("operator '{}' has {} outputs, got {}", o.name,
                                            o.output_dim, outputs.size()));
  }
  std::vector<std::size_t> all = inputs;
  all.insert(all.end(), outputs.begin(), outputs.end());
  for (auto v : all) check_var(v);
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end()) {
    throw std::invalid_argument("operator input/output variables must be distinct");
  }
  OperatorBlock b;
  b.op = op;
  b.inputs = std::move(inputs);
  b.outputs = std::move(outputs);
  b.first_row = rows_.size();
  const std::size_t block = blocks_.size();
  for (std::size_t j = 0; j < o.output_dim; ++j) {
    ConstraintRow r;
    r.kind = RowKind::Operator;
    r.block = block;
    r.output = j;
    r.lower = lower;
    r.upper = upper;
    r.tag = tag;
    rows_.push_back(std::move(r));
  }
  blocks_.push_back(std::move(b));
  return {rows_.size() - o.output_dim, o.output_dim};
}

bool NlpModel::canonical() const {
  return std::all_of(rows_.begin(), rows_.end(), [](const auto& r) { return r.equality(); });
}

const SparsityPattern& NlpModel::jacobian_pattern() const {
  require_sealed();
  return jac_;
}

const SparsityPattern& NlpModel::hessian_pattern() const {
  require_sealed();
  return hess_;
}

void NlpModel::seal() {
  require_open();
  if (!graph_->sealed()) {
    graph_->set_num_variables(vars_.size());
    graph_->seal();
  } else if (graph_->num_variables() > vars_.size()) {
    throw std::logic_error("graph references more variables than the model holds");
  }
  build_structure();
  sealed_ = true;
}

void NlpModel::build_structure() {
  const auto& g = *graph_;
  const auto m = rows_.size();
  const auto n = vars_.size();
  root_used_.assign(g.root_count(), 0);
  root_used_[0] = 1;

  jac_ = SparsityPattern{};
  jac_.rows = m;
  jac_.cols = n;
  jac_row_ptr_.assign(m + 1, 0);
  jac_src_.clear();
  std::vector<std::pair<std::int32_t, std::int32_t>> entries;
  for (std::size_t r = 0; r < m; ++r) {
    const auto& row = rows_[r];
    entries.clear();
    if (row.kind == RowKind::Graph) {
      root_used_[row.root] = 1;
      const auto vars = g.root_variables(row.root);
      for (std::size_t k = 0; k < vars.size(); ++k) {
        entries.emplace_back(vars[k], static_cast<std::int32_t>(k));
      }
    } else {
      const auto& b = blocks_[row.block];
      for (std::size_t k = 0; k < b.inputs.size(); ++k) {
        entries.emplace_back(static_cast<std::int32_t>(b.inputs[k]), static_cast<std::int32_t>(k));
      }
      if (!b.outputs.empty()) {
        entries.emplace_back(static_cast<std::int32_t>(b.outputs[row.output]), -1);
      }
    }
    if (row.slack >= 0) entries.emplace_back(static_cast<std::int32_t>(row.slack), -2);
    std::sort(entries.begin(), entries.end());
    for (std::size_t k = 1; k < entries.size(); ++k) {
      if (entries[k].first == entries[k - 1].first) {
        throw std::logic_error(fmt::format("row {} lists variable {} twice", r, entries[k].first));
      }
    }
    for (const auto& [col, src] : entries) {
      jac_.row.push_back(static_cast<std::int32_t>(r));
      jac_.col.push_back(col);
      jac_src_.push_back(src);
    }
    jac_row_ptr_[r + 1] = jac_.row.size();
  }

  std::vector<std::pair<std::int32_t, std::int32_t>> h;
  for (std::size_t r = 0; r < g.root_count(); ++r) {
    if (!root_used_[r]) continue;
    for (const auto& e : g.root_hessian(r)) h.push_back(e);
  }
  for (const auto& b : blocks_) {
    if (!ops_[b.op].has_hessian()) continue;
    for (std::size_t a = 0; a < b.inputs.size(); ++a) {
      for (std::size_t c = 0; c <= a; ++c) {
        const auto i = static_cast<std::int32_t>(b.inputs[a]);
        const auto j = static_cast<std::int32_t>(b.inputs[c]);
        h.emplace_back(std::max(i, j), std::min(i, j));
      }
    }
  }
  std::sort(h.begin(), h.end());
  h.erase(std::unique(h.begin(), h.end()), h.end());
  hess_ = SparsityPattern{};
  hess_.rows = hess_.cols = n;
  hess_.row.reserve(h.size());
  hess_.col.reserve(h.size());
  for (const auto& [i, j] : h) {
    hess_.row.push_back(i);
    hess_.col.push_back(j);
  }
  auto slot_of = [&](std::int32_t i, std::int32_t j) -> std::int32_t {
    const auto it = std::lower_bound(h.begin(), h.end(), std::make_pair(i, j));
    if (it == h.end() || *it != std::make_pair(i, j)) return -1;
    return static_cast<std::int32_t>(it - h.begin());
  };
  const auto& gp = g.hessian_pattern();
  graph_hess_map_.resize(gp.nnz());
  for (std::size_t e = 0; e < gp.nnz(); ++e) graph_hess_map_[e] = slot_of(gp.row[e], gp.col[e]);
  op_hess_map_.assign(blocks_.size(), {});
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const auto& b = blocks_[bi];
    if (!ops_[b.op].has_hessian()) continue;
    auto& map = op_hess_map_[bi];
    for (std::size_t a = 0; a < b.inputs.size(); ++a) {
      for (std::size_t c = 0; c <= a; ++c) {
        const auto i = static_cast<std::int32_t>(b.inputs[a]);
        const auto j = static_cast<std::int32_t>(b.inputs[c]);
        map.push_back(slot_of(std::max(i, j), std::min(i, j)));
      }
    }
  }
}

// ---------------------------------------------------------------------------

NlpEvaluator::NlpEvaluator(const NlpModel& model) : model_(&model) {
  model.require_sealed();
  const auto nb = model.blocks_.size();
  op_in_.resize(nb);
  op_out_.resize(nb);
  op_jac_.resize(nb);
  op_hess_.resize(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& o = model.ops_[model.blocks_[b].op];
    op_in_[b].resize(o.input_dim);
    op_out_[b].resize(o.output_dim);
    op_jac_[b].resize(o.input_dim * o.output_dim);
    if (o.has_hessian()) op_hess_[b].resize(o.hessian_size());
  }
  root_w_.resize(model.graph_->root_count());
  graph_hess_.resize(model.graph_->hessian_pattern().nnz());
}

std::span<const double> NlpEvaluator::graph_point(std::span<const double> x) const {
  if (x.size() != model_->vars_.size()) {
    throw std::invalid_argument(fmt::format("point has {} entries, model expects {}", x.size(),
                                            model_->vars_.size()));
  }
  return x.first(model_->graph_->num_variables());
}

void NlpEvaluator::ensure_forward(std::span<const double> x) {
  const auto gp = graph_point(x);
  if (forward_valid_ && std::equal(gp.begin(), gp.end(), cached_x_.begin(), cached_x_.end())) {
    return;
  }
  forward_valid_ = false;
  model_->graph_->forward(gp, ws_);
  cached_x_.assign(gp.begin(), gp.end());
  forward_valid_ = true;
}

void NlpEvaluator::ensure_operators(std::span<const double> x) {
  if (model_->blocks_.empty()) return;
  if (op_valid_ && std::equal(x.begin(), x.end(), op_cached_x_.begin(), op_cached_x_.end())) {
    return;
  }
  op_valid_ = false;
  for (std::size_t b = 0; b < model_->blocks_.size(); ++b) {
    const auto& blk = model_->blocks_[b];
    for (std::size_t k = 0; k < blk.inputs.size(); ++k) op_in_[b][k] = x[blk.inputs[k]];
    model_->ops_[blk.op].eval(op_in_[b], op_out_[b]);
    ++op_evals_;
  }
  op_cached_x_.assign(x.begin(), x.end());
  op_valid_ = true;
}

double NlpEvaluator::objective(std::span<const double> x) {
  ensure_forward(x);
  return ws_.value[static_cast<std::size_t>(model_->graph_->root(0).value)];
}

void NlpEvaluator::gradient(std::span<const double> x, std::span<double> grad) {
  ensure_forward(x);
  const auto& g = *model_->graph_;
  std::fill(grad.begin(), grad.end(), 0.0);
  const auto vars = g.root_variables(0);
  grad_tmp_.resize(vars.size());
  g.gradient(0, graph_point(x), ws_, grad_tmp_, false);
  for (std::size_t k = 0; k < vars.size(); ++k) grad[vars[k]] = grad_tmp_[k];
}

void NlpEvaluator::constraints(std::span<const double> x, std::span<double> out) {
  ensure_forward(x);
  ensure_operators(x);
  const auto& g = *model_->graph_;
  const auto& rows = model_->rows_;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    double v;
    if (row.kind == RowKind::Graph) {
      v = ws_.value[static_cast<std::size_t>(g.root(row.root).value)];
    } else {
      const auto& blk = model_->blocks_[row.block];
      const double f = op_out_[row.block][row.output];
      v = blk.outputs.empty() ? f : x[blk.outputs[row.output]] - f;
    }
    if (row.slack >= 0) v -= x[static_cast<std::size_t>(row.slack)];
    out[r] = v;
  }
}

void NlpEvaluator::jacobian(std::span<const double> x, std::span<double> values) {
  ensure_forward(x);
  const auto& g = *model_->graph_;
  const auto gp = graph_point(x);
  const auto& rows = model_->rows_;
  const auto& ptr = model_->jac_row_ptr_;
  const auto& src = model_->jac_src_;

  for (std::size_t b = 0; b < model_->blocks_.size(); ++b) {
    const auto& blk = model_->blocks_[b];
    for (std::size_t k = 0; k < blk.inputs.size(); ++k) op_in_[b][k] = x[blk.inputs[k]];
    model_->ops_[blk.op].jacobian(op_in_[b], op_jac_[b]);
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const double* local = nullptr;
    double sign = 1.0;
    if (row.kind == RowKind::Graph) {
      grad_tmp_.resize(g.root_variables(row.root).size());
      g.gradient(row.root, gp, ws_, grad_tmp_, false);
      local = grad_tmp_.data();
    } else {
      const auto& blk = model_->blocks_[row.block];
      local = op_jac_[row.block].data() + row.output * blk.inputs.size();
      if (!blk.outputs.empty()) sign = -1.0;
    }
    for (std::size_t e = ptr[r]; e < ptr[r + 1]; ++e) {
      const auto s = src[e];
      values[e] = s >= 0 ? sign * local[s] : (s == -1 ? 1.0 : -1.0);
    }
  }
}

void NlpEvaluator::hessian(std::span<const double> x, double obj_factor,
                           std::span<const double> lambda, std::span<double> values) {
  const auto& g = *model_->graph_;
  const auto gp = graph_point(x);
  const auto& rows = model_->rows_;
  if (lambda.size() != rows.size()) {
    throw std::invalid_argument(fmt::format("{} multipliers for {} rows", lambda.size(), rows.size()));
  }
  std::fill(values.begin(), values.end(), 0.0);
  std::fill(root_w_.begin(), root_w_.end(), 0.0);
  root_w_[0] = 1.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].kind == RowKind::Graph) root_w_[rows[r].root] += lambda[r];
  }
  forward_valid_ = false;
  g.hessian_lagrangian(gp, obj_factor, root_w_, ws_, graph_hess_);
  cached_x_.assign(gp.begin(), gp.end());
  forward_valid_ = true;
  for (std::size_t e = 0; e < graph_hess_.size(); ++e) {
    const auto s = model_->graph_hess_map_[e];
    if (s >= 0) values[s] += graph_hess_[e];
  }

  for (std::size_t b = 0; b < model_->blocks_.size(); ++b) {
    const auto& blk = model_->blocks_[b];
    const auto& op = model_->ops_[blk.op];
    if (!op.has_hessian()) {
      throw std::logic_error("operator '" + op.name + "' provides no Hessian");
    }
    const double sign = blk.outputs.empty() ? 1.0 : -1.0;
    w_tmp_.resize(op.output_dim);
    bool any = false;
    for (std::size_t j = 0; j < op.output_dim; ++j) {
      w_tmp_[j] = sign * lambda[blk.first_row + j];
      any = any || w_tmp_[j] != 0.0;
    }
    if (!any) continue;
    for (std::size_t k = 0; k < blk.inputs.size(); ++k) op_in_[b][k] = x[blk.inputs[k]];
    op.hessian(op_in_[b], w_tmp_, op_hess_[b]);
    const auto& map = model_->op_hess_map_[b];
    for (std::size_t e = 0; e < map.size(); ++e) values[map[e]] += op_hess_[b][e];
  }
}

// ---------------------------------------------------------------------------

CanonicalModel canonicalize(const NlpModel& model) {
  model.require_sealed();
  CanonicalModel out;
  out.original_variables = model.num_variables();
  out.row_slack.assign(model.num_rows(), -1);

  NlpEvaluator ev(model);
  const auto x0 = model.start_point();
  std::vector<double> act(model.num_rows());
  ev.constraints(x0, act);

  NlpModel& c = out.model;
  c = model;
  c.sealed_ = false;
  for (std::size_t r = 0; r < c.rows_.size(); ++r) {
    auto& row = c.rows_[r];
    if (row.equality()) continue;
    const double lo = row.lower, hi = row.upper;
    const auto s = c.add_variable(lo, hi, std::clamp(act[r], lo, hi),
                                  fmt::format("slack{}", r));
    row.slack = static_cast<std::int64_t>(s);
    row.lower = row.upper = 0.0;
    out.row_slack[r] = static_cast<std::int64_t>(s);
  }
  c.seal();
  return out;
}

std::vector<double> CanonicalModel::recover_variables(std::span<const double> x) const {
  return std::vector<double>(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(original_variables));
}

std::vector<double> CanonicalModel::row_activities(std::span<const double> x) const {
  NlpEvaluator ev(model);
  std::vector<double> g(model.num_rows());
  ev.constraints(x, g);
  for (std::size_t r = 0; r < g.size(); ++r) {
    if (row_slack[r] >= 0) g[r] += x[static_cast<std::size_t>(row_slack[r])];
  }
  return g;
}

std::vector<double> CanonicalModel::lift(std::span<const double> x_original) const {
  if (x_original.size() != original_variables) {
    throw std::invalid_argument("original point has the wrong length");
  }
  std::vector<double> x(model.num_variables(), 0.0);
  std::copy(x_original.begin(), x_original.end(), x.begin());
  const auto act = row_activities(x);
  for (std::size_t r = 0; r < act.size(); ++r) {
    if (row_slack[r] >= 0) x[static_cast<std::size_t>(row_slack[r])] = act[r];
  }
  return x;
}

// ---------------------------------------------------------------------------

StructureReport structure_report(const NlpModel& model) {
  StructureReport rep;
  rep.variables = model.num_variables();
  rep.constraints = model.num_rows();
  rep.jacobian_nnz = model.jacobian_pattern().nnz();
  rep.hessian_nnz = model.hessian_pattern().nnz();
  const auto ptr = model.jacobian_row_offsets();
  std::map<std::string, TagCounts> by_tag;
  for (std::size_t r = 0; r < model.num_rows(); ++r) {
    auto& t = by_tag[model.row(r).tag];
    t.tag = model.row(r).tag;
    t.constraints += 1;
    t.jacobian_nnz += ptr[r + 1] - ptr[r];
  }
  for (auto& [_, t] : by_tag) rep.tags.push_back(std::move(t));
  return rep;
}

namespace {

const TableRow kStructureHeader{"Parameters",   "Formulation",  "N. Variables",
                                "N. Constraints", "Jacobian NNZ", "Hessian NNZ"};

std::vector<TableRow> structure_cells(std::span<const StructureRow> rows) {
  std::vector<TableRow> out;
  for (const auto& r : rows) {
    out.push_back({r.parameters, r.formulation, std::to_string(r.report.variables),
                   std::to_string(r.report.constraints), std::to_string(r.report.jacobian_nnz),
                   std::to_string(r.report.hessian_nnz)});
  }
  return out;
}

}  // namespace

std::string structure_table_csv(std::span<const StructureRow> rows) {
  return render_csv(kStructureHeader, structure_cells(rows));
}

std::string structure_table_markdown(std::span<const StructureRow> rows) {
  return render_markdown(kStructureHeader, structure_cells(rows));
}

}  // namespace mlopt
