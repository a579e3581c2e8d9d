#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "mlopt/nlp.hpp"

namespace mlopt {

enum class HessianMode : std::uint8_t { Exact, Lbfgs };

const char* hessian_mode_name(HessianMode m);  // "exact" / "lbfgs"
HessianMode parse_hessian_mode(const std::string& name);

struct IpmOptions {
  double tol = 1e-8;
  std::size_t max_iter = 3000;
  double mu_init = 0.1;
  double mu_linear_decrease = 0.2;     // kappa_mu
  double mu_superlinear_power = 1.5;   // theta_mu
  double barrier_tol_factor = 10.0;    // kappa_eps
  double tau_min = 0.99;
  HessianMode hessian = HessianMode::Exact;
  std::size_t lbfgs_memory = 6;
  double delta_w_init = 1e-4;
  double delta_w_min = 1e-20;
  double delta_w_max = 1e40;
  double delta_w_first_growth = 100.0;
  double delta_w_growth = 8.0;
  double delta_w_shrink = 1.0 / 3.0;
  double delta_c = 1e-8;               // scaled by mu^0.25
  double bound_push = 1e-2;
  double bound_frac = 1e-2;
  double obj_scaling_max_gradient = 100.0;
  bool least_squares_multipliers = true;
  std::size_t dense_threshold = 500;   // KKT dimension below which the dense path runs
  double max_wall_seconds = 0.0;       // 0 = unlimited
  std::ostream* log = nullptr;

  void validate() const;
};

enum class SolveStatus : std::uint8_t { Optimal, MaxIter, Diverged, FactorizationFailure };

const char* status_name(SolveStatus s);

enum TimerCategory : std::size_t { kFunction = 0, kJacobian, kHessian, kSolver, kOther, kTimerCount };

const char* timer_name(TimerCategory c);

struct SolveStats {
  SolveStatus status = SolveStatus::Diverged;
  std::string message;
  double objective = 0.0;
  std::size_t iterations = 0;
  double wall_seconds = 0.0;
  std::array<double, kTimerCount> seconds{};  // other = wall - measured
  std::size_t function_evals = 0;
  std::size_t jacobian_evals = 0;
  std::size_t hessian_evals = 0;
  std::size_t factorizations = 0;
  std::size_t restorations = 0;  // feasibility restoration phases
  double primal_infeasibility = 0.0;
  double dual_infeasibility = 0.0;   // scaled
  double complementarity = 0.0;
  double final_mu = 0.0;
  bool dense_linear_algebra = true;

  double time_per_iteration() const;
  std::array<double, kTimerCount> percentages() const;
};

struct IpmResult {
  std::vector<double> x;       // canonical model variables
  std::vector<double> lambda;  // row multipliers (L = f + lambda^T c)
  std::vector<double> z_lower;
  std::vector<double> z_upper;
  SolveStats stats;
};

// ---------------------------------------------------------------------------
// Linear algebra

struct Inertia {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t zero = 0;

  friend bool operator==(const Inertia&, const Inertia&) = default;
};

/// Symmetric KKT matrix [[H + dw I, J^T], [J, -dc I]] held without the
/// regularization; the lower triangle is authoritative.
struct KktMatrix {
  std::size_t n = 0;  // primal block
  std::size_t m = 0;  // constraint block
  bool dense = true;
  Eigen::MatrixXd dense_lower;
  Eigen::SparseMatrix<double> sparse_lower;  // column-major, includes every diagonal

  std::size_t dim() const { return n + m; }
  Eigen::MatrixXd to_dense(double dw = 0.0, double dc = 0.0) const;
  /// y = (K + diag(dw I, -dc I)) x.
  void multiply(const Eigen::VectorXd& x, Eigen::VectorXd& y, double dw, double dc) const;
};

class SymmetricFactor {
 public:
  virtual ~SymmetricFactor() = default;
  /// False when the factorization broke down (treated as a zero pivot).
  virtual bool factorize(const KktMatrix& k, double dw, double dc) = 0;
  virtual Inertia inertia() const = 0;
  virtual void solve(Eigen::VectorXd& rhs) const = 0;
};

/// LAPACK dsytrf (Bunch-Kaufman 1x1/2x2 pivoting).
class DenseBunchKaufman final : public SymmetricFactor {
 public:
  bool factorize(const KktMatrix& k, double dw, double dc) override;
  /// Factorizes a full symmetric matrix directly.
  bool factorize(const Eigen::MatrixXd& a);
  Inertia inertia() const override { return inertia_; }
  void solve(Eigen::VectorXd& rhs) const override;

 private:
  bool factor_in_place(double scale);

  Eigen::MatrixXd lu_;
  std::vector<int> ipiv_;
  Inertia inertia_;
};

/// Eigen SimplicialLDLT with AMD ordering; inertia from the signs of D.
class SparseLdlt final : public SymmetricFactor {
 public:
  SparseLdlt();
  ~SparseLdlt() override;
  bool factorize(const KktMatrix& k, double dw, double dc) override;
  Inertia inertia() const override { return inertia_; }
  void solve(Eigen::VectorXd& rhs) const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  Inertia inertia_;
};

/// Solves with one refinement step, repeated while the relative residual
/// exceeds 1e-8 (at most `max_steps` times).
void solve_refined(const KktMatrix& k, const SymmetricFactor& f, double dw, double dc,
                   const Eigen::VectorXd& rhs, Eigen::VectorXd& sol, int max_steps = 3);

struct Regularization {
  double delta_w = 0.0;
  double delta_c = 0.0;
  std::size_t trials = 0;
};

class FactorizationFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Increases delta_w geometrically until the inertia is (n, m, 0); delta_c is
/// engaged only when zero pivots appear. `last_delta_w` carries state between
/// iterations. Throws FactorizationFailure when delta_w exceeds its budget.
Regularization correct_inertia(const KktMatrix& k, SymmetricFactor& f, double mu,
                               const IpmOptions& opt, double& last_delta_w);

// ---------------------------------------------------------------------------
// Limited-memory BFGS

/// Compact representation B = d I - W M^{-1} W^T, W = [d S, Y], with
/// d = y^T y / s^T y from the newest pair. Pairs are Powell-damped.
class LbfgsHistory {
 public:
  explicit LbfgsHistory(std::size_t n = 0, std::size_t memory = 6);

  std::size_t dim() const { return n_; }
  std::size_t size() const { return s_.size(); }
  std::size_t skipped() const { return skipped_; }
  std::size_t damped() const { return damped_; }
  double delta() const { return delta_; }

  /// Returns false when the pair was skipped.
  bool update(const Eigen::VectorXd& s, const Eigen::VectorXd& y);
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;          // B v
  Eigen::VectorXd apply_inverse(const Eigen::VectorXd& v) const;  // H v, H_0 = I / d
  Eigen::MatrixXd dense() const;                                   // B

 private:
  void rebuild();

  std::size_t n_ = 0;
  std::size_t memory_ = 6;
  std::vector<Eigen::VectorXd> s_, y_;
  double delta_ = 1.0;
  std::size_t skipped_ = 0;
  std::size_t damped_ = 0;
  Eigen::MatrixXd w_;       // n x 2k
  Eigen::MatrixXd m_inv_;   // 2k x 2k
};

// ---------------------------------------------------------------------------
// Solver

/// Primal-dual interior-point method for canonical models (equality rows and
/// variable bounds only).
class IpmSolver {
 public:
  IpmSolver(const NlpModel& model, IpmOptions options = {});
  ~IpmSolver();

  IpmResult solve();

  /// Builds the initial iterate; exposed for inspection in tests.
  void initialize();
  /// KKT matrix and right-hand side at the current iterate (no regularization).
  std::pair<KktMatrix, Eigen::VectorXd> assemble_kkt();
  const std::vector<double>& x() const;
  double mu() const;
  double objective_scale() const;

 private:
  struct State;
  std::unique_ptr<State> st_;
};

IpmResult solve_nlp(const NlpModel& model, const IpmOptions& options = {});

}  // namespace mlopt
