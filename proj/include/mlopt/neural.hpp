#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mlopt {

enum class Activation : std::uint8_t { Identity = 0, Tanh = 1, Sigmoid = 2 };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& name);

struct Layer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
  Activation activation = Activation::Tanh;
};

/// Per-evaluator scratch; networks themselves are immutable.
struct MlpWorkspace {
  std::vector<Eigen::VectorXd> z;        // pre-activation per layer
  std::vector<Eigen::VectorXd> y;        // post-activation per layer
  std::vector<Eigen::MatrixXd> tangent;  // dz_l/dx per layer
  Eigen::MatrixXd dy;                    // running dy_l/dx
  Eigen::VectorXd adjoint;
  Eigen::MatrixXd adjoint_tangent;
};

/// Feed-forward network y_l = act_l(W_l y_{l-1} + b_l).
class MlpNetwork {
 public:
  MlpNetwork() = default;
  explicit MlpNetwork(std::vector<Layer> layers);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t depth() const { return layers_.size(); }
  const std::vector<Layer>& layers() const { return layers_; }
  /// Layer widths including the input width.
  std::vector<std::size_t> widths() const;
  std::size_t parameter_count() const;

  Eigen::VectorXd forward(std::span<const double> x) const;
  Eigen::VectorXd forward(std::span<const double> x, MlpWorkspace& ws) const;

  /// Dense output x input Jacobian.
  Eigen::MatrixXd jacobian(std::span<const double> x) const;
  Eigen::MatrixXd jacobian(std::span<const double> x, MlpWorkspace& ws) const;

  /// Symmetric input x input Hessian of w^T forward(x).
  Eigen::MatrixXd weighted_hessian(std::span<const double> x,
                                   std::span<const double> w) const;
  Eigen::MatrixXd weighted_hessian(std::span<const double> x,
                                   std::span<const double> w,
                                   MlpWorkspace& ws) const;

  /// Network over the remaining inputs, with the listed inputs frozen at
  /// the given values (folded into the first layer's bias).
  MlpNetwork partially_apply(std::span<const std::size_t> fixed_inputs,
                             std::span<const double> values) const;

  /// Copy with hidden layer l widened to hidden[l] units. Existing weights are
  /// kept; added units get Glorot-uniform incoming weights and zero bias, and
  /// every weight leaving an added unit is scaled by `coupling`.
  MlpNetwork widened(std::span<const std::size_t> hidden, std::uint64_t seed,
                     double coupling = 1e-3) const;

  /// Uniform +-sqrt(6/(in+out)) initialization; the last layer uses
  /// `output`, all others `hidden`.
  static MlpNetwork glorot(std::span<const std::size_t> widths,
                           Activation hidden, Activation output,
                           std::uint64_t seed);

 private:
  void check_input(std::span<const double> x) const;

  std::vector<Layer> layers_;
};

class NetworkFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// JSON: {version, activations[], layers:[{rows, cols, weight_row_major[], bias[]}]}.
void save_weights_json(const MlpNetwork& net, const std::filesystem::path& path);
MlpNetwork load_weights_json(const std::filesystem::path& path);
std::string weights_to_json(const MlpNetwork& net);
MlpNetwork weights_from_json(const std::string& text);

/// Binary: "MLPW", u32 version, u32 layers, then per layer u32 rows, u32 cols,
/// u8 activation, f64 weights (row-major), f64 bias; all little-endian.
void save_weights_binary(const MlpNetwork& net, const std::filesystem::path& path);
MlpNetwork load_weights_binary(const std::filesystem::path& path);

/// Dispatches on extension: ".json" is JSON, anything else binary.
void save_weights(const MlpNetwork& net, const std::filesystem::path& path);
MlpNetwork load_weights(const std::filesystem::path& path);

struct Dataset {
  std::vector<std::string> feature_names;
  std::vector<std::string> target_names;
  Eigen::MatrixXd inputs;   // samples x features
  Eigen::MatrixXd targets;  // samples x targets
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 0;  // 0 = full batch
  std::size_t max_epochs = 20000;
  double loss_threshold = 0.01;
  std::size_t consecutive_epochs = 50;
  std::uint64_t seed = 0;
  Activation hidden = Activation::Tanh;

  void validate() const;
};

struct TrainResult {
  MlpNetwork network;  // consumes and produces physical units
  std::vector<double> loss_history;  // standardized full-data MSE per epoch
  bool converged = false;
  std::size_t epochs = 0;
};

/// Adam on mean squared error over standardized data. `widths` lists every
/// layer width including input and output. Stops once the loss stays below
/// the threshold for the configured number of consecutive epochs.
TrainResult train_adam(const Dataset& data, std::span<const std::size_t> widths,
                       const TrainConfig& cfg);

}  // namespace mlopt
