#include "mlopt/ipm.hpp"

#include <algorithm>
#include <functional>
#include <chrono>
#include <cmath>
#include <limits>
#include <ostream>
#include <utility>
#include <stdexcept>

#include <Eigen/Dense>
#include <Eigen/OrderingMethods>
#include <Eigen/SparseCholesky>
#include <fmt/format.h>
#include <lapacke.h>

namespace mlopt {

const char* hessian_mode_name(HessianMode m) {
  return m == HessianMode::Exact ? "exact" : "lbfgs";
}

HessianMode parse_hessian_mode(const std::string& name) {
  if (name == "exact") return HessianMode::Exact;
  if (name == "lbfgs") return HessianMode::Lbfgs;
  throw std::invalid_argument("unknown Hessian mode '" + name + "' (exact|lbfgs)");
}

void IpmOptions::validate() const {
  if (!(tol > 0.0)) throw std::invalid_argument("tolerance must be positive");
  if (!(tau_min > 0.0 && tau_min < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
  if (lbfgs_memory < 1) throw std::invalid_argument("L-BFGS memory must be >= 1");
  if (!(mu_init > 0.0)) throw std::invalid_argument("initial mu must be positive");
}

const char* status_name(SolveStatus s) {
  switch (s) {
    case SolveStatus::Optimal: return "optimal";
    case SolveStatus::MaxIter: return "max-iter";
    case SolveStatus::Diverged: return "diverged";
    case SolveStatus::FactorizationFailure: return "factorization-failure";
  }
  return "?";
}

const char* timer_name(TimerCategory c) {
  switch (c) {
    case kFunction: return "Function";
    case kJacobian: return "Jacobian";
    case kHessian: return "Hessian";
    case kSolver: return "Solver";
    case kOther: return "Other";
    default: return "?";
  }
}

double SolveStats::time_per_iteration() const {
  return iterations == 0 ? wall_seconds : wall_seconds / static_cast<double>(iterations);
}

std::array<double, kTimerCount> SolveStats::percentages() const {
  std::array<double, kTimerCount> p{};
  double total = 0.0;
  for (double s : seconds) total += s;
  if (total <= 0.0) return p;
  for (std::size_t i = 0; i < kTimerCount; ++i) p[i] = 100.0 * seconds[i] / total;
  return p;
}

// ---------------------------------------------------------------------------
// KKT matrix

Eigen::MatrixXd KktMatrix::to_dense(double dw, double dc) const {
  Eigen::MatrixXd a;
  if (dense) {
    a = dense_lower.triangularView<Eigen::Lower>();
  } else {
    a = Eigen::MatrixXd(sparse_lower).triangularView<Eigen::Lower>();
  }
  Eigen::MatrixXd full = a + a.transpose();
  full.diagonal() = a.diagonal();
  for (std::size_t i = 0; i < n; ++i) full(i, i) += dw;
  for (std::size_t i = n; i < n + m; ++i) full(i, i) -= dc;
  return full;
}

void KktMatrix::multiply(const Eigen::VectorXd& x, Eigen::VectorXd& y, double dw,
                         double dc) const {
  if (dense) {
    y = dense_lower.selfadjointView<Eigen::Lower>() * x;
  } else {
    y = sparse_lower.selfadjointView<Eigen::Lower>() * x;
  }
  const auto ni = static_cast<Eigen::Index>(n);
  y.head(ni) += dw * x.head(ni);
  y.tail(static_cast<Eigen::Index>(m)) -= dc * x.tail(static_cast<Eigen::Index>(m));
}

namespace {

// Judged against the off-diagonal coupling, not the diagonal, which carries
// barrier terms that can reach 1e10.
double zero_pivot_tolerance(double offdiag_scale) {
  return 50.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, offdiag_scale);
}

double offdiag_scale(const Eigen::MatrixXd& a) {
  double s = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = j + 1; i < a.rows(); ++i) s = std::max(s, std::abs(a(i, j)));
  }
  return s;
}

}  // namespace

bool DenseBunchKaufman::factorize(const KktMatrix& k, double dw, double dc) {
  lu_ = k.dense ? Eigen::MatrixXd(k.dense_lower) : Eigen::MatrixXd(k.sparse_lower);
  const double scale = offdiag_scale(lu_);
  for (std::size_t i = 0; i < k.n; ++i) lu_(i, i) += dw;
  for (std::size_t i = k.n; i < k.n + k.m; ++i) lu_(i, i) -= dc;
  return factor_in_place(scale);
}

bool DenseBunchKaufman::factorize(const Eigen::MatrixXd& a) {
  lu_ = a.triangularView<Eigen::Lower>();
  return factor_in_place(offdiag_scale(lu_));
}

bool DenseBunchKaufman::factor_in_place(double scale) {
  const auto n = static_cast<lapack_int>(lu_.rows());
  inertia_ = Inertia{};
  ipiv_.assign(static_cast<std::size_t>(n), 0);
  if (n == 0) return true;
  const lapack_int info =
      LAPACKE_dsytrf(LAPACK_COL_MAJOR, 'L', n, lu_.data(), n, ipiv_.data());
  if (info < 0) throw std::logic_error("dsytrf argument error");
  const double tiny = zero_pivot_tolerance(scale);
  for (lapack_int k = 0; k < n;) {
    if (ipiv_[static_cast<std::size_t>(k)] > 0) {
      const double d = lu_(k, k);
      if (std::abs(d) <= tiny) {
        ++inertia_.zero;
      } else if (d > 0) {
        ++inertia_.positive;
      } else {
        ++inertia_.negative;
      }
      ++k;
    } else {
      const double a11 = lu_(k, k), a21 = lu_(k + 1, k), a22 = lu_(k + 1, k + 1);
      const double mid = 0.5 * (a11 + a22);
      const double rad = std::hypot(0.5 * (a11 - a22), a21);
      for (double ev : {mid + rad, mid - rad}) {
        if (std::abs(ev) <= tiny) {
          ++inertia_.zero;
        } else if (ev > 0) {
          ++inertia_.positive;
        } else {
          ++inertia_.negative;
        }
      }
      k += 2;
    }
  }
  return info == 0 || inertia_.zero > 0;
}

void DenseBunchKaufman::solve(Eigen::VectorXd& rhs) const {
  const auto n = static_cast<lapack_int>(lu_.rows());
  if (n == 0) return;
  const lapack_int info = LAPACKE_dsytrs(LAPACK_COL_MAJOR, 'L', n, 1, lu_.data(), n,
                                         ipiv_.data(), rhs.data(), n);
  if (info != 0) throw std::logic_error("dsytrs failed");
}

struct SparseLdlt::Impl {
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower,
                        Eigen::AMDOrdering<int>>
      ldlt;
  Eigen::SparseMatrix<double> work;
  bool analyzed = false;
  Eigen::Index nnz = -1;
  Eigen::Index dim = -1;
};

SparseLdlt::SparseLdlt() : impl_(std::make_unique<Impl>()) {}
SparseLdlt::~SparseLdlt() = default;

bool SparseLdlt::factorize(const KktMatrix& k, double dw, double dc) {
  auto& s = *impl_;
  s.work = k.dense ? Eigen::SparseMatrix<double>(k.dense_lower.sparseView())
                   : k.sparse_lower;
  double scale = 0.0;
  for (Eigen::Index j = 0; j < s.work.outerSize(); ++j) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(s.work, j); it; ++it) {
      if (it.row() != it.col()) scale = std::max(scale, std::abs(it.value()));
    }
  }
  for (Eigen::Index j = 0; j < s.work.outerSize(); ++j) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(s.work, j); it; ++it) {
      if (it.row() == it.col()) {
        it.valueRef() += static_cast<std::size_t>(j) < k.n ? dw : -dc;
      }
    }
  }
  if (!s.analyzed || s.nnz != s.work.nonZeros() || s.dim != s.work.rows()) {
    s.ldlt.analyzePattern(s.work);
    s.analyzed = true;
    s.nnz = s.work.nonZeros();
    s.dim = s.work.rows();
  }
  s.ldlt.factorize(s.work);
  inertia_ = Inertia{};
  if (s.ldlt.info() != Eigen::Success) {
    inertia_.zero = 1;
    return false;
  }
  const double tiny = zero_pivot_tolerance(scale);
  const Eigen::VectorXd d = s.ldlt.vectorD();
  for (Eigen::Index i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) {
      inertia_.zero = 1;
      return false;
    }
    if (std::abs(d[i]) <= tiny) {
      ++inertia_.zero;
    } else if (d[i] > 0) {
      ++inertia_.positive;
    } else {
      ++inertia_.negative;
    }
  }
  return true;
}

void SparseLdlt::solve(Eigen::VectorXd& rhs) const {
  rhs = impl_->ldlt.solve(rhs);
}

void solve_refined(const KktMatrix& k, const SymmetricFactor& f, double dw, double dc,
                   const Eigen::VectorXd& rhs, Eigen::VectorXd& sol, int max_steps) {
  sol = rhs;
  f.solve(sol);
  const double ref = std::max(1.0, rhs.cwiseAbs().maxCoeff());
  Eigen::VectorXd r(rhs.size()), d;
  for (int step = 0; step < max_steps; ++step) {
    k.multiply(sol, r, dw, dc);
    r = rhs - r;
    if (step > 0 && r.cwiseAbs().maxCoeff() <= 1e-8 * ref) break;
    d = r;
    f.solve(d);
    sol += d;
  }
}

Regularization correct_inertia(const KktMatrix& k, SymmetricFactor& f, double mu,
                               const IpmOptions& opt, double& last_delta_w) {
  const Inertia want{k.n, k.m, 0};
  Regularization reg;
  auto attempt = [&](double dw, double dc) {
    ++reg.trials;
    const bool ok = f.factorize(k, dw, dc);
    const Inertia in = f.inertia();
    // Under delta_c the constraint block is negative definite, so tiny
    // pivots there are negative rather than zero.
    const bool good = in == want || (dc > 0.0 && in.positive == k.n && in.negative + in.zero == k.m);
    return std::make_pair(ok && good, !ok || in.zero > 0);
  };
  auto [good, singular] = attempt(0.0, 0.0);
  if (good) return reg;

  if (singular && k.m > 0) {
    reg.delta_c = opt.delta_c * std::pow(mu, 0.25);
    auto [good_c, singular_c] = attempt(0.0, reg.delta_c);
    if (good_c) return reg;
    singular = singular_c;
  }
  double dw = last_delta_w == 0.0 ? opt.delta_w_init
                                  : std::max(opt.delta_w_min, opt.delta_w_shrink * last_delta_w);
  const double growth = last_delta_w == 0.0 ? opt.delta_w_first_growth : opt.delta_w_growth;
  while (dw <= opt.delta_w_max) {
    auto [ok, sing] = attempt(dw, reg.delta_c);
    if (ok) {
      reg.delta_w = dw;
      last_delta_w = dw;
      return reg;
    }
    if (sing && reg.delta_c == 0.0 && k.m > 0) reg.delta_c = opt.delta_c * std::pow(mu, 0.25);
    dw *= growth;
  }
  throw FactorizationFailure("inertia correction exhausted the regularization budget");
}

// ---------------------------------------------------------------------------
// L-BFGS

LbfgsHistory::LbfgsHistory(std::size_t n, std::size_t memory) : n_(n), memory_(memory) {
  if (memory_ < 1) throw std::invalid_argument("L-BFGS memory must be >= 1");
}

bool LbfgsHistory::update(const Eigen::VectorXd& s, const Eigen::VectorXd& y_raw) {
  if (static_cast<std::size_t>(s.size()) != n_ || static_cast<std::size_t>(y_raw.size()) != n_) {
    throw std::invalid_argument("L-BFGS pair has the wrong dimension");
  }
  const double ss = s.squaredNorm();
  if (!(ss > 0.0) || !y_raw.allFinite()) {
    ++skipped_;
    return false;
  }
  Eigen::VectorXd y = y_raw;
  const Eigen::VectorXd bs = apply(s);
  const double sbs = s.dot(bs);
  const double sy = s.dot(y);
  if (sy < 0.2 * sbs) {
    const double theta = 0.8 * sbs / (sbs - sy);
    y = theta * y + (1.0 - theta) * bs;
    ++damped_;
  }
  const double sy_d = s.dot(y);
  if (!(sy_d > 1e-14 * ss)) {
    ++skipped_;
    return false;
  }
  s_.push_back(s);
  y_.push_back(y);
  if (s_.size() > memory_) {
    s_.erase(s_.begin());
    y_.erase(y_.begin());
  }
  delta_ = y.squaredNorm() / sy_d;
  rebuild();
  return true;
}

void LbfgsHistory::rebuild() {
  const auto k = static_cast<Eigen::Index>(s_.size());
  const auto n = static_cast<Eigen::Index>(n_);
  Eigen::MatrixXd S(n, k), Y(n, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    S.col(j) = s_[static_cast<std::size_t>(j)];
    Y.col(j) = y_[static_cast<std::size_t>(j)];
  }
  const Eigen::MatrixXd sty = S.transpose() * Y;
  Eigen::MatrixXd m(2 * k, 2 * k);
  m.topLeftCorner(k, k) = delta_ * S.transpose() * S;
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = 0; j < i; ++j) l(i, j) = sty(i, j);
  }
  m.topRightCorner(k, k) = l;
  m.bottomLeftCorner(k, k) = l.transpose();
  m.bottomRightCorner(k, k) = -Eigen::MatrixXd(sty.diagonal().asDiagonal());
  w_.resize(n, 2 * k);
  w_.leftCols(k) = delta_ * S;
  w_.rightCols(k) = Y;
  m_inv_ = m.fullPivLu().inverse();
}

Eigen::VectorXd LbfgsHistory::apply(const Eigen::VectorXd& v) const {
  if (s_.empty()) return delta_ * v;
  return delta_ * v - w_ * (m_inv_ * (w_.transpose() * v));
}

Eigen::VectorXd LbfgsHistory::apply_inverse(const Eigen::VectorXd& v) const {
  const std::size_t k = s_.size();
  Eigen::VectorXd q = v;
  std::vector<double> alpha(k), rho(k);
  for (std::size_t i = k; i-- > 0;) {
    rho[i] = 1.0 / y_[i].dot(s_[i]);
    alpha[i] = rho[i] * s_[i].dot(q);
    q -= alpha[i] * y_[i];
  }
  Eigen::VectorXd r = q / delta_;
  for (std::size_t i = 0; i < k; ++i) {
    const double beta = rho[i] * y_[i].dot(r);
    r += s_[i] * (alpha[i] - beta);
  }
  return r;
}

Eigen::MatrixXd LbfgsHistory::dense() const {
  const auto n = static_cast<Eigen::Index>(n_);
  Eigen::MatrixXd b = delta_ * Eigen::MatrixXd::Identity(n, n);
  if (!s_.empty()) b -= w_ * m_inv_ * w_.transpose();
  return 0.5 * (b + b.transpose());
}

// ---------------------------------------------------------------------------
// Solver

namespace {

using Clock = std::chrono::steady_clock;

class ScopedTimer {
 public:
  explicit ScopedTimer(double& acc) : acc_(acc), start_(Clock::now()) {}
  ~ScopedTimer() {
    acc_ += std::chrono::duration<double>(Clock::now() - start_).count();
  }

 private:
  double& acc_;
  Clock::time_point start_;
};

constexpr double kSmax = 100.0;
constexpr double kKappaSigma = 1e10;
constexpr double kArmijo = 1e-4;
constexpr double kAlphaMin = 1e-12;
// Filter line search.
constexpr double kGammaTheta = 1e-5;
constexpr double kGammaPhi = 1e-8;
constexpr double kGammaAlpha = 0.05;
constexpr double kSwitchDelta = 1.0;
constexpr double kSwitchSTheta = 1.1;
constexpr double kSwitchSPhi = 2.3;
constexpr int kMaxSoc = 4;
constexpr double kSocKappa = 0.99;
constexpr std::size_t kMaxRestorationSteps = 200;

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double d) { return std::isfinite(d); });
}

}  // namespace

struct IpmSolver::State {
  const NlpModel* model;
  IpmOptions opt;
  NlpEvaluator ev;

  std::size_t n = 0, m = 0, nf = 0;
  std::vector<std::size_t> free;   // free variable indices
  std::vector<std::int64_t> pos;   // variable -> free position or -1
  std::vector<double> xl, xu;      // per free position
  std::vector<char> has_l, has_u;

  std::vector<double> x;           // full
  Eigen::VectorXd lambda, zl, zu;  // scaled objective units
  double mu = 0.1, tau = 0.99, obj_scale = 1.0, last_dw = 0.0;
  bool initialized = false;

  double f = 0.0;
  std::vector<double> grad, c, jac, hess;
  std::vector<double> grad_prev, jac_prev;
  std::vector<double> x_prev;

  std::array<double, kTimerCount> t{};
  SolveStats stats;
  LbfgsHistory lbfgs;
  std::unique_ptr<SymmetricFactor> factor;
  bool dense = true;

  State(const NlpModel& mdl, IpmOptions o) : model(&mdl), opt(o), ev(mdl) {}

  // ---- evaluation wrappers ----
  bool eval_fc(std::span<const double> p, double& fv, std::vector<double>& cv) {
    ScopedTimer timer(t[kFunction]);
    ++stats.function_evals;
    try {
      fv = ev.objective(p);
      cv.resize(m);
      ev.constraints(p, cv);
      for (std::size_t r = 0; r < m; ++r) cv[r] -= model->row(r).lower;
    } catch (const EvaluationError&) {
      return false;
    }
    return std::isfinite(fv) && all_finite(cv);
  }

  bool eval_derivs(std::span<const double> p) {
    ScopedTimer timer(t[kJacobian]);
    ++stats.jacobian_evals;
    grad.resize(n);
    jac.resize(model->jacobian_pattern().nnz());
    try {
      ev.gradient(p, grad);
      ev.jacobian(p, jac);
    } catch (const EvaluationError&) {
      return false;
    }
    return all_finite(grad) && all_finite(jac);
  }

  bool eval_hessian() {
    ScopedTimer timer(t[kHessian]);
    ++stats.hessian_evals;
    hess.resize(model->hessian_pattern().nnz());
    try {
      ev.hessian(x, obj_scale, std::span<const double>(lambda.data(), m), hess);
    } catch (const EvaluationError&) {
      return false;
    }
    return all_finite(hess);
  }

  // ---- helpers over free variables ----
  double slack_l(std::size_t k, std::span<const double> p) const { return p[free[k]] - xl[k]; }
  double slack_u(std::size_t k, std::span<const double> p) const { return xu[k] - p[free[k]]; }

  double barrier(std::span<const double> p, double fv) const {
    double phi = obj_scale * fv;
    for (std::size_t k = 0; k < nf; ++k) {
      if (has_l[k]) phi -= mu * std::log(slack_l(k, p));
      if (has_u[k]) phi -= mu * std::log(slack_u(k, p));
    }
    return phi;
  }

  static double l1(const std::vector<double>& v) {
    double s = 0.0;
    for (double e : v) s += std::abs(e);
    return s;
  }

  static double sumsq(const std::vector<double>& v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return s;
  }

  static double linf(const std::vector<double>& v) {
    double s = 0.0;
    for (double e : v) s = std::max(s, std::abs(e));
    return s;
  }

  /// s_f grad f + J^T lambda on free positions, from given gradient/Jacobian.
  Eigen::VectorXd lagrangian_gradient(const std::vector<double>& g, const std::vector<double>& jv,
                                      const Eigen::VectorXd& lam) const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(nf));
    for (std::size_t k = 0; k < nf; ++k) out[static_cast<Eigen::Index>(k)] = obj_scale * g[free[k]];
    const auto& jp = model->jacobian_pattern();
    for (std::size_t e = 0; e < jp.nnz(); ++e) {
      const auto p = pos[static_cast<std::size_t>(jp.col[e])];
      if (p >= 0) out[p] += lam[jp.row[e]] * jv[e];
    }
    return out;
  }

  struct Errors {
    double inf_pr = 0, inf_du = 0, compl_mu = 0, s_d = 1, s_c = 1;
    double scaled(double) const;
  };

  Errors errors(double target_mu) const {
    Errors e;
    e.inf_pr = linf(c);
    const Eigen::VectorXd gl = lagrangian_gradient(grad, jac, lambda) - zl + zu;
    e.inf_du = nf ? gl.cwiseAbs().maxCoeff() : 0.0;
    double zsum = 0.0, lsum = lambda.cwiseAbs().sum();
    std::size_t nz = 0;
    for (std::size_t k = 0; k < nf; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      if (has_l[k]) {
        e.compl_mu = std::max(e.compl_mu, std::abs(slack_l(k, x) * zl[ki] - target_mu));
        zsum += zl[ki];
        ++nz;
      }
      if (has_u[k]) {
        e.compl_mu = std::max(e.compl_mu, std::abs(slack_u(k, x) * zu[ki] - target_mu));
        zsum += zu[ki];
        ++nz;
      }
    }
    const double cnt = static_cast<double>(m + nz);
    e.s_d = cnt > 0 ? std::max(kSmax, (lsum + zsum) / cnt) / kSmax : 1.0;
    e.s_c = nz > 0 ? std::max(kSmax, zsum / static_cast<double>(nz)) / kSmax : 1.0;
    return e;
  }

  static double total(const Errors& e) {
    return std::max({e.inf_du / e.s_d, e.inf_pr, e.compl_mu / e.s_c});
  }

  void initialize();
  /// Without the barrier the primal block is diag(d), or I when d is null.
  std::pair<KktMatrix, Eigen::VectorXd> assemble(bool with_barrier, const Eigen::VectorXd* d = nullptr);
  void estimate_multipliers();
  void clamp_bound_multipliers();
  double fraction_to_boundary(const Eigen::VectorXd& d) const;
  /// Levenberg-Marquardt steps on ||c||^2 inside the bounds until the point
  /// is acceptable to `accept`; false if feasibility cannot be improved.
  bool restore(const std::function<bool(double, double)>& accept);
  IpmResult run();
};

IpmSolver::IpmSolver(const NlpModel& model, IpmOptions options)
    : st_(std::make_unique<State>(model, options)) {
  options.validate();
  if (!model.sealed()) throw std::logic_error("model must be sealed before solving");
  if (!model.canonical()) {
    throw std::invalid_argument("solver requires a canonical model (equality rows only)");
  }
}

IpmSolver::~IpmSolver() = default;

const std::vector<double>& IpmSolver::x() const { return st_->x; }
double IpmSolver::mu() const { return st_->mu; }
double IpmSolver::objective_scale() const { return st_->obj_scale; }

void IpmSolver::initialize() { st_->initialize(); }

std::pair<KktMatrix, Eigen::VectorXd> IpmSolver::assemble_kkt() {
  if (!st_->initialized) st_->initialize();
  if (st_->opt.hessian == HessianMode::Exact) st_->eval_hessian();
  return st_->assemble(true);
}

IpmResult IpmSolver::solve() { return st_->run(); }

void IpmSolver::State::initialize() {
  const auto& vars = model->variables();
  n = vars.size();
  m = model->num_rows();
  free.clear();
  pos.assign(n, -1);
  xl.clear();
  xu.clear();
  has_l.clear();
  has_u.clear();
  x = model->start_point();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& v = vars[i];
    if (v.lower == v.upper) {
      x[i] = v.lower;
      continue;
    }
    pos[i] = static_cast<std::int64_t>(free.size());
    free.push_back(i);
    xl.push_back(v.lower);
    xu.push_back(v.upper);
    has_l.push_back(std::isfinite(v.lower));
    has_u.push_back(std::isfinite(v.upper));
  }
  nf = free.size();

  // Push the start strictly inside the bounds.
  for (std::size_t k = 0; k < nf; ++k) {
    double& xi = x[free[k]];
    const double lo = xl[k], hi = xu[k];
    const double range = hi - lo;
    if (has_l[k]) {
      double p = opt.bound_push * std::max(1.0, std::abs(lo));
      if (has_u[k]) p = std::min(p, opt.bound_frac * range);
      xi = std::max(xi, lo + p);
    }
    if (has_u[k]) {
      double p = opt.bound_push * std::max(1.0, std::abs(hi));
      if (has_l[k]) p = std::min(p, opt.bound_frac * range);
      xi = std::min(xi, hi - p);
    }
  }

  dense = nf + m < opt.dense_threshold;
  if (dense) {
    factor = std::make_unique<DenseBunchKaufman>();
  } else {
    factor = std::make_unique<SparseLdlt>();
  }
  stats.dense_linear_algebra = dense;
  lbfgs = LbfgsHistory(nf, opt.lbfgs_memory);

  mu = opt.mu_init;
  tau = std::max(opt.tau_min, 1.0 - mu);
  lambda = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  zl = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nf));
  zu = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nf));
  for (std::size_t k = 0; k < nf; ++k) {
    if (has_l[k]) zl[static_cast<Eigen::Index>(k)] = 1.0;
    if (has_u[k]) zu[static_cast<Eigen::Index>(k)] = 1.0;
  }

  obj_scale = 1.0;
  if (!eval_fc(x, f, c) || !eval_derivs(x)) {
    throw EvaluationError(0, "non-finite values at the starting point");
  }
  double gmax = 0.0;
  for (std::size_t k = 0; k < nf; ++k) gmax = std::max(gmax, std::abs(grad[free[k]]));
  if (gmax > opt.obj_scaling_max_gradient) obj_scale = opt.obj_scaling_max_gradient / gmax;

  estimate_multipliers();
  last_dw = 0.0;
  initialized = true;
}

// Least-squares multiplier estimate from [[I, J^T], [J, 0]].
void IpmSolver::State::estimate_multipliers() {
  if (!opt.least_squares_multipliers || m == 0 || nf == 0) return;
  lambda.setZero();
  auto [k, rhs] = assemble(false);
  rhs.tail(static_cast<Eigen::Index>(m)).setZero();
  const bool ok = factor->factorize(k, 0.0, 0.0) && factor->inertia() == Inertia{nf, m, 0};
  ++stats.factorizations;
  if (!ok) return;
  Eigen::VectorXd sol;
  solve_refined(k, *factor, 0.0, 0.0, rhs, sol);
  const Eigen::VectorXd lam = sol.tail(static_cast<Eigen::Index>(m));
  if (lam.allFinite() && lam.cwiseAbs().maxCoeff() <= 1e3) lambda = lam;
}

void IpmSolver::State::clamp_bound_multipliers() {
  for (std::size_t k = 0; k < nf; ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    if (has_l[k]) {
      const double sl = slack_l(k, x);
      zl[ki] = std::clamp(zl[ki], mu / (kKappaSigma * sl), kKappaSigma * mu / sl);
    }
    if (has_u[k]) {
      const double su = slack_u(k, x);
      zu[ki] = std::clamp(zu[ki], mu / (kKappaSigma * su), kKappaSigma * mu / su);
    }
  }
}

double IpmSolver::State::fraction_to_boundary(const Eigen::VectorXd& d) const {
  double a = 1.0;
  for (std::size_t k = 0; k < nf; ++k) {
    const double dk = d[static_cast<Eigen::Index>(k)];
    if (has_l[k] && dk < 0) a = std::min(a, -tau * slack_l(k, x) / dk);
    if (has_u[k] && dk > 0) a = std::min(a, tau * slack_u(k, x) / dk);
  }
  return a;
}

bool IpmSolver::State::restore(const std::function<bool(double, double)>& accept) {
  const auto nfi = static_cast<Eigen::Index>(nf);
  const double theta0 = l1(c);
  double rho = 1e-4;
  std::vector<double> xt(n), ct;
  double ft = 0.0;
  for (std::size_t step = 0; step < kMaxRestorationSteps; ++step) {
    // Minimize ||c + J d||^2 + d'(rho I + ||c||^2 D)d, where D = 1/s^2 only for
    // the bound that steepest descent on ||c||^2 heads toward.
    Eigen::VectorXd jtc = Eigen::VectorXd::Zero(nfi);
    const auto& jp = model->jacobian_pattern();
    for (std::size_t e = 0; e < jp.nnz(); ++e) {
      const auto p = pos[static_cast<std::size_t>(jp.col[e])];
      if (p >= 0) jtc[p] += c[jp.row[e]] * jac[e];
    }
    Eigen::VectorXd diag(nfi);
    for (std::size_t k = 0; k < nf; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      double s = std::numeric_limits<double>::infinity();
      if (jtc[ki] > 0 && has_l[k]) s = slack_l(k, x);
      if (jtc[ki] < 0 && has_u[k]) s = slack_u(k, x);
      diag[ki] = std::isfinite(s) ? 1.0 / (s * s) : 0.0;
    }
    const double bound_weight = sumsq(c);
    bool moved = false;
    while (!moved) {
      if (rho > 1e20) return false;
      Eigen::VectorXd scaled = (rho + bound_weight * diag.array()).matrix();
      auto [k, rhs] = assemble(false, &scaled);
      rhs.head(nfi).setZero();
      Eigen::VectorXd sol;
      {
        ScopedTimer timer(t[kSolver]);
        ++stats.factorizations;
        if (!factor->factorize(k, 0.0, 1.0)) {
          rho *= 10.0;
          continue;
        }
        solve_refined(k, *factor, 0.0, 1.0, rhs, sol);
      }
      const Eigen::VectorXd d = sol.head(nfi);
      if (!d.allFinite()) {
        rho *= 10.0;
        continue;
      }
      // Progress is measured in the squared 2-norm the step models.
      const double sq = sumsq(c);
      double a = fraction_to_boundary(d);
      for (int trial = 0; trial < 10 && !moved; ++trial, a *= 0.5) {
        xt = x;
        for (std::size_t q = 0; q < nf; ++q) xt[free[q]] += a * d[static_cast<Eigen::Index>(q)];
        if (std::isfinite(barrier(xt, 0.0)) && eval_fc(xt, ft, ct) &&
            sumsq(ct) < (1.0 - 1e-4 * a) * sq)
          moved = true;
      }
      if (!moved) {
        rho *= 10.0;
      } else {
        rho = std::max(rho / 4.0, 1e-10);
      }
    }
    x = xt;
    f = ft;
    c = ct;
    if (!eval_derivs(x)) return false;
    const double theta = l1(c);
    if ((theta <= 0.9 * theta0 && accept(theta, barrier(x, f))) || theta <= 1e-2 * opt.tol) {
      estimate_multipliers();
      clamp_bound_multipliers();
      return true;
    }
  }
  return false;
}

std::pair<KktMatrix, Eigen::VectorXd> IpmSolver::State::assemble(bool with_barrier,
                                                                const Eigen::VectorXd* d) {
  KktMatrix k;
  k.n = nf;
  k.m = m;
  k.dense = dense;
  const auto N = static_cast<Eigen::Index>(nf + m);
  const auto& jp = model->jacobian_pattern();
  const auto& hp = model->hessian_pattern();
  std::vector<Eigen::Triplet<double>> trip;
  if (dense) {
    k.dense_lower = Eigen::MatrixXd::Zero(N, N);
  } else {
    trip.reserve(hp.nnz() + jp.nnz() + static_cast<std::size_t>(N));
    for (Eigen::Index i = 0; i < N; ++i) trip.emplace_back(i, i, 0.0);
  }
  auto add = [&](Eigen::Index i, Eigen::Index j, double v) {
    if (dense) {
      k.dense_lower(i, j) += v;
    } else {
      trip.emplace_back(i, j, v);
    }
  };

  // Hessian block.
  if (!with_barrier) {
    for (std::size_t p = 0; p < nf; ++p) {
      const auto pi = static_cast<Eigen::Index>(p);
      add(pi, pi, d ? (*d)[pi] : 1.0);
    }
  } else if (opt.hessian == HessianMode::Exact) {
    for (std::size_t e = 0; e < hp.nnz(); ++e) {
      const auto pi = pos[static_cast<std::size_t>(hp.row[e])];
      const auto pj = pos[static_cast<std::size_t>(hp.col[e])];
      if (pi < 0 || pj < 0) continue;
      add(std::max(pi, pj), std::min(pi, pj), hess[e]);
    }
  } else {
    const Eigen::MatrixXd b = lbfgs.dense();
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      for (Eigen::Index i = j; i < b.rows(); ++i) add(i, j, b(i, j));
    }
  }
  Eigen::VectorXd rhs(N);
  if (with_barrier) {
    for (std::size_t p = 0; p < nf; ++p) {
      const auto pi = static_cast<Eigen::Index>(p);
      double sigma = 0.0;
      if (has_l[p]) sigma += zl[pi] / slack_l(p, x);
      if (has_u[p]) sigma += zu[pi] / slack_u(p, x);
      add(pi, pi, sigma);
    }
  }
  // Jacobian block.
  for (std::size_t e = 0; e < jp.nnz(); ++e) {
    const auto pj = pos[static_cast<std::size_t>(jp.col[e])];
    if (pj < 0) continue;
    add(static_cast<Eigen::Index>(nf) + jp.row[e], pj, jac[e]);
  }
  if (!dense) {
    k.sparse_lower.resize(N, N);
    k.sparse_lower.setFromTriplets(trip.begin(), trip.end());
  }

  // Right-hand side: -(grad phi + J^T lambda), -c.
  const Eigen::VectorXd gl = lagrangian_gradient(grad, jac, lambda);
  for (std::size_t p = 0; p < nf; ++p) {
    const auto pi = static_cast<Eigen::Index>(p);
    double g = gl[pi];
    if (with_barrier) {
      if (has_l[p]) g -= mu / slack_l(p, x);
      if (has_u[p]) g += mu / slack_u(p, x);
    } else {
      g += -zl[pi] + zu[pi];
    }
    rhs[pi] = -g;
  }
  for (std::size_t r = 0; r < m; ++r) rhs[static_cast<Eigen::Index>(nf + r)] = -c[r];
  return {std::move(k), std::move(rhs)};
}

IpmResult IpmSolver::State::run() {
  const auto wall_start = Clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - wall_start).count(); };
  IpmResult result;
  stats = SolveStats{};
  t.fill(0.0);
  std::ostream* log = opt.log;

  auto finish = [&](SolveStatus status, std::string msg) {
    stats.status = status;
    stats.message = std::move(msg);
    stats.objective = f;
    stats.wall_seconds = elapsed();
    double measured = 0.0;
    for (std::size_t i = 0; i < kOther; ++i) {
      stats.seconds[i] = t[i];
      measured += t[i];
    }
    stats.seconds[kOther] = std::max(0.0, stats.wall_seconds - measured);
    stats.final_mu = mu;
    if (initialized) {
      const auto e = errors(0.0);
      stats.primal_infeasibility = e.inf_pr;
      stats.dual_infeasibility = e.inf_du / e.s_d;
      stats.complementarity = e.compl_mu / e.s_c;
    }
    result.x = x;
    result.lambda.assign(m, 0.0);
    result.z_lower.assign(n, 0.0);
    result.z_upper.assign(n, 0.0);
    if (initialized) {
      for (std::size_t r = 0; r < m; ++r) result.lambda[r] = lambda[static_cast<Eigen::Index>(r)] / obj_scale;
      for (std::size_t k = 0; k < nf; ++k) {
        result.z_lower[free[k]] = zl[static_cast<Eigen::Index>(k)] / obj_scale;
        result.z_upper[free[k]] = zu[static_cast<Eigen::Index>(k)] / obj_scale;
      }
    }
    result.stats = stats;
    if (log) *log << fmt::format("status: {} ({}) objective {:.10e} iterations {}\n",
                                 status_name(status), stats.message, f, stats.iterations);
    return result;
  };

  try {
    if (!initialized) initialize();
  } catch (const EvaluationError& e) {
    return finish(SolveStatus::Diverged, e.what());
  }

  if (log) {
    *log << fmt::format("interior point: {} variables ({} free), {} equality rows, {} Hessian, {} linear algebra\n",
                        n, nf, m, hessian_mode_name(opt.hessian), dense ? "dense" : "sparse");
    *log << "iter    objective    inf_pr   inf_du lg(mu)  ||d||  lg(rg) alpha_du alpha_pr  ls\n";
  }

  double alpha_pr = 0.0, alpha_du = 0.0, dnorm = 0.0, reg_w = 0.0;
  int ls_trials = 0;
  std::vector<std::pair<double, double>> filter;
  double theta_max = -1.0, theta_min = 0.0, filter_mu = -1.0;
  Eigen::VectorXd dx, dl, dzl, dzu;
  std::vector<double> xt(n), ct;
  double ft = 0.0;

  for (std::size_t iter = 0;; ++iter) {
    stats.iterations = iter;
    Errors e = errors(0.0);
    if (log) {
      const std::string rg = reg_w > 0 ? fmt::format("{:5.1f}", std::log10(reg_w)) : "   - ";
      *log << fmt::format("{:4d} {:14.7e} {:8.2e} {:8.2e} {:5.1f} {:8.2e} {} {:8.2e} {:8.2e} {:3d}\n",
                          iter, f, e.inf_pr, e.inf_du / e.s_d, std::log10(mu), dnorm, rg,
                          alpha_du, alpha_pr, ls_trials);
    }
    if (total(e) <= opt.tol) return finish(SolveStatus::Optimal, "KKT error below tolerance");
    if (iter >= opt.max_iter) return finish(SolveStatus::MaxIter, "iteration limit reached");
    if (opt.max_wall_seconds > 0.0 && elapsed() > opt.max_wall_seconds) {
      return finish(SolveStatus::MaxIter, "wall-time limit reached");
    }

    // Monotone barrier update.
    for (;;) {
      const Errors em = errors(mu);
      if (total(em) > opt.barrier_tol_factor * mu || mu <= opt.tol / 10.0) break;
      const double next = std::max(opt.tol / 10.0, std::min(opt.mu_linear_decrease * mu,
                                                            std::pow(mu, opt.mu_superlinear_power)));
      if (next >= mu) break;
      mu = next;
      tau = std::max(opt.tau_min, 1.0 - mu);
    }

    if (opt.hessian == HessianMode::Exact && !eval_hessian()) {
      return finish(SolveStatus::Diverged, "non-finite Hessian");
    }
    auto [kkt, rhs] = assemble(true);
    Regularization reg;
    Eigen::VectorXd sol;
    {
      ScopedTimer timer(t[kSolver]);
      try {
        reg = correct_inertia(kkt, *factor, mu, opt, last_dw);
      } catch (const FactorizationFailure& ex) {
        stats.factorizations += 1;
        return finish(SolveStatus::FactorizationFailure, ex.what());
      }
      stats.factorizations += reg.trials;
      solve_refined(kkt, *factor, reg.delta_w, reg.delta_c, rhs, sol);
    }
    reg_w = reg.delta_w;
    if (!sol.allFinite()) return finish(SolveStatus::Diverged, "non-finite search direction");
    const auto nfi = static_cast<Eigen::Index>(nf);
    dx = sol.head(nfi);
    dl = sol.tail(static_cast<Eigen::Index>(m));

    dzl = Eigen::VectorXd::Zero(nfi);
    dzu = Eigen::VectorXd::Zero(nfi);
    double amax = 1.0, az = 1.0;
    for (std::size_t k = 0; k < nf; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      if (has_l[k]) {
        const double s = slack_l(k, x);
        dzl[ki] = mu / s - zl[ki] - zl[ki] / s * dx[ki];
        if (dx[ki] < 0) amax = std::min(amax, -tau * s / dx[ki]);
        if (dzl[ki] < 0) az = std::min(az, -tau * zl[ki] / dzl[ki]);
      }
      if (has_u[k]) {
        const double s = slack_u(k, x);
        dzu[ki] = mu / s - zu[ki] + zu[ki] / s * dx[ki];
        if (dx[ki] > 0) amax = std::min(amax, tau * s / dx[ki]);
        if (dzu[ki] < 0) az = std::min(az, -tau * zu[ki] / dzu[ki]);
      }
    }
    dnorm = nf ? dx.cwiseAbs().maxCoeff() : 0.0;

    // Filter line search on (theta, phi) = (||c||_1, barrier objective).
    const double theta = l1(c);
    const double phi = barrier(x, f);
    double dphi = 0.0;
    for (std::size_t k = 0; k < nf; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      double g = obj_scale * grad[free[k]];
      if (has_l[k]) g -= mu / slack_l(k, x);
      if (has_u[k]) g += mu / slack_u(k, x);
      dphi += g * dx[ki];
    }
    if (iter == 0 || theta_max < 0.0) {
      theta_max = 1e4 * std::max(1.0, theta);
      theta_min = 1e-4 * std::max(1.0, theta);
    }
    if (mu != filter_mu) {
      filter.clear();
      filter_mu = mu;
    }
    auto filter_ok = [&](double th, double ph) {
      if (th > theta_max) return false;
      for (const auto& [ft_, fp_] : filter) {
        if (th >= ft_ && ph >= fp_) return false;
      }
      return true;
    };
    auto switching = [&](double a) {
      return dphi < 0.0 && a * std::pow(-dphi, kSwitchSPhi) > kSwitchDelta * std::pow(theta, kSwitchSTheta);
    };
    bool f_type = false;
    auto acceptable = [&](double a, bool ok) {
      if (!ok) return false;
      const double tht = l1(ct);
      const double pht = barrier(xt, ft);
      if (!std::isfinite(pht) || !filter_ok(tht, pht)) return false;
      const double slack = 10.0 * std::numeric_limits<double>::epsilon() * std::abs(phi);
      if (theta <= theta_min && switching(a)) {
        f_type = true;
        return pht <= phi + kArmijo * a * dphi + slack;
      }
      f_type = false;
      return tht <= (1.0 - kGammaTheta) * theta || pht <= phi - kGammaPhi * theta + slack;
    };
    double alpha_min = kGammaTheta;
    if (dphi < 0.0) {
      alpha_min = std::min(alpha_min, kGammaPhi * theta / -dphi);
      if (theta <= theta_min) {
        alpha_min = std::min(alpha_min, kSwitchDelta * std::pow(theta, kSwitchSTheta) /
                                            std::pow(-dphi, kSwitchSPhi));
      }
    }
    alpha_min = std::max(kGammaAlpha * alpha_min, kAlphaMin);

    // Tiny-step shortcut.
    bool tiny = true;
    for (std::size_t k = 0; k < nf && tiny; ++k) {
      tiny = std::abs(dx[static_cast<Eigen::Index>(k)]) <=
             10.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(x[free[k]]));
    }

    double alpha = amax;
    bool accepted = false;
    ls_trials = 0;
    Eigen::VectorXd dl_used = dl;
    auto trial_point = [&](const Eigen::VectorXd& d, double a) {
      xt = x;
      for (std::size_t k = 0; k < nf; ++k) xt[free[k]] += a * d[static_cast<Eigen::Index>(k)];
    };

    if (tiny) {
      trial_point(dx, alpha);
      accepted = eval_fc(xt, ft, ct);
      f_type = true;
      ls_trials = 1;
    }
    while (!accepted && alpha >= alpha_min) {
      ++ls_trials;
      trial_point(dx, alpha);
      const bool ok = eval_fc(xt, ft, ct);
      if (acceptable(alpha, ok)) {
        accepted = true;
        break;
      }
      // Second-order corrections on the first trial.
      if (ls_trials == 1 && ok && m > 0 && l1(ct) >= theta) {
        std::vector<double> csoc(c);
        double asoc = alpha, theta_old = theta;
        for (int p = 0; p < kMaxSoc; ++p) {
          for (std::size_t r = 0; r < m; ++r) csoc[r] = asoc * csoc[r] + ct[r];
          Eigen::VectorXd rhs_soc = rhs;
          for (std::size_t r = 0; r < m; ++r) rhs_soc[static_cast<Eigen::Index>(nf + r)] = -csoc[r];
          Eigen::VectorXd sol_soc;
          {
            ScopedTimer timer(t[kSolver]);
            solve_refined(kkt, *factor, reg.delta_w, reg.delta_c, rhs_soc, sol_soc);
          }
          if (!sol_soc.allFinite()) break;
          const Eigen::VectorXd dxs = sol_soc.head(nfi);
          asoc = fraction_to_boundary(dxs);
          trial_point(dxs, asoc);
          const bool ok_soc = eval_fc(xt, ft, ct);
          if (acceptable(alpha, ok_soc)) {
            accepted = true;
            alpha = asoc;
            dx = dxs;
            dl_used = sol_soc.tail(static_cast<Eigen::Index>(m));
            break;
          }
          if (!ok_soc) break;
          const double theta_soc = l1(ct);
          if (theta_soc > kSocKappa * theta_old) break;
          theta_old = theta_soc;
        }
        if (accepted) break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // Feasibility restoration, with the current point added to the filter.
      filter.emplace_back((1.0 - kGammaTheta) * theta, phi - kGammaPhi * theta);
      ++stats.restorations;
      if (theta <= opt.tol * 1e-2 || !restore(filter_ok)) {
        return finish(SolveStatus::Diverged, "feasibility restoration failed");
      }
      filter.clear();
      alpha_pr = 0.0;
      alpha_du = 0.0;
      reg_w = 0.0;
      continue;
    }
    if (!f_type) filter.emplace_back((1.0 - kGammaTheta) * theta, phi - kGammaPhi * theta);
    alpha_pr = alpha;
    alpha_du = az;

    // Accept.
    x_prev = x;
    grad_prev = grad;
    jac_prev = jac;
    x = xt;
    f = ft;
    c = ct;
    lambda += alpha * dl_used;
    zl += az * dzl;
    zu += az * dzu;
    for (std::size_t k = 0; k < nf; ++k) {
      const auto ki = static_cast<Eigen::Index>(k);
      if (has_l[k]) {
        const double s = slack_l(k, x);
        zl[ki] = std::clamp(zl[ki], mu / (kKappaSigma * s), kKappaSigma * mu / s);
      }
      if (has_u[k]) {
        const double s = slack_u(k, x);
        zu[ki] = std::clamp(zu[ki], mu / (kKappaSigma * s), kKappaSigma * mu / s);
      }
      if (!std::isfinite(x[free[k]]) || std::abs(x[free[k]]) > 1e20) {
        return finish(SolveStatus::Diverged, "iterates diverged");
      }
    }
    if (!eval_derivs(x)) return finish(SolveStatus::Diverged, "non-finite derivatives");

    if (opt.hessian == HessianMode::Lbfgs) {
      Eigen::VectorXd s(nfi);
      for (std::size_t k = 0; k < nf; ++k) s[static_cast<Eigen::Index>(k)] = x[free[k]] - x_prev[free[k]];
      const Eigen::VectorXd y = lagrangian_gradient(grad, jac, lambda) -
                                lagrangian_gradient(grad_prev, jac_prev, lambda);
      lbfgs.update(s, y);
    }
  }
}

IpmResult solve_nlp(const NlpModel& model, const IpmOptions& options) {
  IpmSolver solver(model, options);
  return solver.solve();
}

}  // namespace mlopt
