#pragma once

#include <complex>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mlopt/embed.hpp"
#include "mlopt/ipm.hpp"
#include "mlopt/neural.hpp"
#include "mlopt/nlp.hpp"

namespace mlopt {

class CaseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BusType : std::uint8_t { PQ = 1, PV = 2, Ref = 3 };

/// Powers are per-unit on the case base; angles in radians.
struct Bus {
  int id = 0;
  BusType type = BusType::PQ;
  double pd = 0.0, qd = 0.0;
  double gs = 0.0, bs = 0.0;  // shunt admittance
  double vmin = 0.9, vmax = 1.1;
  double vm = 1.0, va = 0.0;

  friend bool operator==(const Bus&, const Bus&) = default;
};

/// Cost is c2 P^2 + c1 P + c0 with P in MW and the result in $/h.
struct Generator {
  int bus = 0;
  double pg = 0.0, qg = 0.0;
  double pmin = 0.0, pmax = 0.0;
  double qmin = 0.0, qmax = 0.0;
  double vg = 1.0;
  double c2 = 0.0, c1 = 0.0, c0 = 0.0;
  double h = 5.0;     // inertia constant (s)
  double d = 0.0;     // damping (pu power per pu speed)
  double xdp = 0.25;  // transient reactance (pu)
  bool in_service = true;

  friend bool operator==(const Generator&, const Generator&) = default;
};

struct Branch {
  int from = 0, to = 0;
  double r = 0.0, x = 0.0, b = 0.0;
  double rate = 0.0;   // current-magnitude limit in pu; 0 = unlimited
  double ratio = 1.0;  // off-nominal tap on the from side
  double shift = 0.0;  // phase shift (rad)
  bool in_service = true;

  friend bool operator==(const Branch&, const Branch&) = default;
};

/// Outage of generators and/or branches (0-based indices).
struct Contingency {
  std::string label;
  std::vector<std::size_t> generators;
  std::vector<std::size_t> branches;

  friend bool operator==(const Contingency&, const Contingency&) = default;
};

struct GridCase {
  std::string name;
  double base_mva = 100.0;
  double frequency = 60.0;
  std::vector<Bus> buses;
  std::vector<Generator> generators;
  std::vector<Branch> branches;
  std::vector<Contingency> contingencies;

  std::size_t bus_index(int id) const;
  std::size_t ref_bus() const;
  /// Checks the invariants; throws CaseError.
  void validate() const;
  bool connected() const;
  /// Copy with the contingency's elements taken out of service.
  GridCase with_outage(const Contingency& c) const;

  friend bool operator==(const GridCase&, const GridCase&) = default;
};

/// Dispatches on the extension: .json or .m.
GridCase parse_case(const std::string& path);
GridCase parse_case_json(const std::string& text);
GridCase parse_case_matpower(const std::string& text);
std::string write_case_json(const GridCase& c);

using ComplexMatrix = Eigen::MatrixXcd;
using ComplexVector = Eigen::VectorXcd;

struct BranchAdmittance {
  std::complex<double> yff, yft, ytf, ytt;
};

BranchAdmittance branch_admittance(const Branch& br);
/// Dense bus admittance matrix over in-service branches and shunts.
ComplexMatrix build_ybus(const GridCase& c);

/// Per-bus complex mismatch S_gen - S_load - S_injected (pu).
ComplexVector power_mismatch(const GridCase& c, std::span<const double> vm,
                             std::span<const double> va, std::span<const double> pg,
                             std::span<const double> qg);

struct PowerFlowResult {
  bool converged = false;
  std::size_t iterations = 0;
  double mismatch = 0.0;
  std::vector<double> vm, va, pg, qg;
};

/// Newton power flow. Non-reference generators hold `pg`; generator buses
/// hold the generator voltage setpoints; the reference bus balances.
PowerFlowResult solve_power_flow(const GridCase& c, std::span<const double> pg,
                                 double tol = 1e-10, std::size_t max_iter = 30);
/// Same, using the case's own dispatch.
PowerFlowResult solve_power_flow(const GridCase& c);

/// Hourly cost in $/h of a per-unit dispatch (in-service generators).
double generation_cost(const GridCase& c, std::span<const double> pg);

// ---------------------------------------------------------------------------
// Security-constrained OPF

struct Scenario {
  Contingency contingency;  // empty for the base network
  std::vector<std::size_t> vm, va;
  RowRange rows;
};

struct ScopfModel {
  GridCase grid;
  NlpModel model;
  std::vector<std::size_t> pg, qg;  // shared dispatch variables
  std::vector<Scenario> scenarios;  // scenario 0 is the base network
  std::vector<EmbeddingHandle> stability;
  std::vector<RowRange> stability_rows;
};

/// Polar AC balance rows per scenario, squared-current thermal rows,
/// voltage and generation bounds, quadratic generation cost.
ScopfModel build_scopf(const GridCase& c, const std::vector<Contingency>& contingencies);

/// Feature layout [Pd per bus, Qd per bus, Pg per generator] in per-unit.
std::size_t stability_feature_dim(const GridCase& c);
std::vector<std::string> stability_feature_names(const GridCase& c);
std::vector<double> stability_features(const GridCase& c, std::span<const double> pg);

/// Embeds `net` once per contingency with the demands folded in and adds
/// rows output >= eta. A non-finite eta embeds without adding rows.
void attach_stability(ScopfModel& s, const MlpNetwork& net, Formulation f, double eta,
                      bool with_hessian = true);

struct ScopfSolution {
  std::vector<double> pg, qg;
  std::vector<std::vector<double>> vm, va;  // per scenario
  double cost = 0.0;
};

ScopfSolution extract_solution(const ScopfModel& s, std::span<const double> x);

struct ScopfResult {
  IpmResult ipm;
  std::vector<double> x;  // original model variables
  ScopfSolution solution;
};

/// Seals the model if needed, canonicalizes, solves and maps back.
ScopfResult solve_scopf(ScopfModel& s, const IpmOptions& options = {});

/// Largest per-bus |mismatch| over all scenarios, recomputed from voltages.
double max_power_mismatch(const ScopfModel& s, const ScopfSolution& sol);

}  // namespace mlopt
