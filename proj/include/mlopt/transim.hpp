#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mlopt/gridopf.hpp"
#include "mlopt/neural.hpp"

namespace mlopt {

class TransientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TransientConfig {
  double horizon = 30.0;            // s
  double step = 0.01;               // s
  std::optional<std::size_t> outage;  // generator index (0-based)
  double disturbance_time = 0.0;    // s
  double nominal_frequency = 60.0;  // Hz
  std::vector<double> initial_speed;  // pu speed deviation per generator; empty = rest

  void validate() const;
};

/// Classical machines behind transient reactance on the Kron-reduced network.
/// Loads are constant impedances fixed at the pre-disturbance voltages.
struct ClassicalModel {
  std::vector<std::size_t> machines;  // generator indices
  Eigen::VectorXd emf;                // |E| per machine
  Eigen::VectorXd inertia;            // M = 2H (s)
  Eigen::VectorXd damping;            // D (pu)
  Eigen::VectorXd pm;                 // mechanical power (pu)
  ComplexMatrix yred;                 // machines x machines
  Eigen::MatrixXd bus_weights;        // buses x machines, rows sum to one
  ComplexVector load_admittance;      // per bus

  /// P_e,i = Re(E_i conj(sum_j Y_ij E_j)) with E_i = |E_i| exp(j delta_i).
  Eigen::VectorXd electrical_power(const Eigen::VectorXd& delta) const;
};

struct InitialState {
  ClassicalModel model;
  Eigen::VectorXd delta;  // internal rotor angles (rad)
};

/// Builds the pre-disturbance model; mechanical power equals the electrical
/// power at the initial angles so the start is an exact equilibrium.
InitialState build_classical_model(const GridCase& c, const PowerFlowResult& op);

/// Drops one generator and re-reduces with the same loads and EMFs.
ClassicalModel remove_machine(const GridCase& c, const ClassicalModel& m, std::size_t generator);

struct TransientResult {
  std::vector<double> time;
  std::vector<std::vector<double>> delta;  // [generator][sample]; outaged machines hold their last value
  std::vector<std::vector<double>> speed;  // [generator][sample] pu deviation
  std::vector<std::vector<double>> bus_frequency;       // [bus][sample] Hz
  std::vector<std::vector<double>> bus_frequency_rate;  // [bus][sample] Hz/s; may be empty
  std::size_t window_start = 0;  // first post-disturbance sample
  bool blown_up = false;
  std::vector<double> min_frequency;  // Hz per bus; empty if blown up
};

/// Fixed-step RK4 on M dw/dt = Pm - Pe(delta) - D w, d(delta)/dt = Omega0 w.
/// Throws TransientError if `op` does not solve the power flow to 1e-6.
TransientResult simulate(const GridCase& c, const PowerFlowResult& op, const TransientConfig& cfg);

/// Per-bus minimum over the post-disturbance window. When rate traces are
/// present the sampled minimum is refined by cubic Hermite interpolation.
std::vector<double> min_frequency(const TransientResult& r);

struct SampleReport {
  Dataset data;
  std::size_t resampled = 0;
};

/// Draws every demand and dispatch uniformly within +-spread of nominal, lets
/// the reference generator restore balance through a power flow, and
/// simulates. Points whose power flow fails are redrawn.
SampleReport sample_dataset(const GridCase& c, const TransientConfig& cfg, std::size_t n,
                            std::uint64_t seed, double spread = 0.2, std::size_t threads = 0);

std::vector<std::string> min_frequency_names(const GridCase& c);  // "fmin<bus id>"

/// Header row of feature and target names; targets are the "fmin" columns.
void write_dataset_csv(const Dataset& d, const std::filesystem::path& path);
std::string dataset_to_csv(const Dataset& d);
Dataset read_dataset_csv(const std::filesystem::path& path);

/// time, per-generator speed, per-bus frequency.
void write_trace_csv(const GridCase& c, const TransientResult& r, const std::filesystem::path& path);

}  // namespace mlopt
