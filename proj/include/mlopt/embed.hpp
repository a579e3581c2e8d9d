#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mlopt/neural.hpp"
#include "mlopt/nlp.hpp"

namespace mlopt {

enum class Formulation : std::uint8_t { FullSpace, ReducedSpace, GrayBox };

/// "full", "reduced", "graybox".
const char* formulation_name(Formulation f);
/// Human-readable label used in report tables.
const char* formulation_label(Formulation f);
Formulation parse_formulation(const std::string& name);

struct StructureDelta {
  std::int64_t variables = 0;
  std::int64_t constraints = 0;
  std::int64_t jacobian_nnz = 0;
  std::int64_t hessian_nnz = 0;

  friend bool operator==(const StructureDelta&, const StructureDelta&) = default;
};

struct EmbeddingHandle {
  Formulation kind = Formulation::FullSpace;
  std::vector<std::size_t> inputs;
  /// Output variables (full-space and gray-box).
  std::vector<std::size_t> output_vars;
  /// Graph roots holding each output expression (reduced-space).
  std::vector<std::size_t> output_roots;
  std::size_t first_variable = 0;
  std::size_t variable_count = 0;
  RowRange rows;
  std::size_t op = 0;  // gray-box operator index
  StructureDelta predicted;

  std::size_t output_dim() const {
    return kind == Formulation::ReducedSpace ? output_roots.size() : output_vars.size();
  }
  /// Adds lower <= output_i <= upper as a constraint row.
  RowRange constrain_output(NlpModel& model, std::size_t i, double lower, double upper,
                            const std::string& tag) const;
};

/// Value range of an activation, used as output-variable bounds.
std::pair<double, double> activation_range(Activation a);

/// Eq. (4) style: per layer z_l, y_l variables, affine rows and activation rows.
EmbeddingHandle embed_full_space(NlpModel& model, const MlpNetwork& net,
                                 std::span<const std::size_t> x_vars,
                                 const std::string& tag = "nn");

/// One scalarized expression root per output; no new variables or rows.
EmbeddingHandle embed_reduced_space(NlpModel& model, const MlpNetwork& net,
                                    std::span<const std::size_t> x_vars);

/// Callback operator with output variables y and rows y - NN(x) = 0.
EmbeddingHandle embed_gray_box(NlpModel& model, std::shared_ptr<const MlpNetwork> net,
                               std::span<const std::size_t> x_vars,
                               const std::string& tag = "nn", bool with_hessian = true);

/// Wraps a network as an external operator (value, Jacobian, weighted Hessian).
ExternalOperator network_operator(std::shared_ptr<const MlpNetwork> net,
                                  bool with_hessian = true);

/// Dispatches on the formulation; gray-box copies the network into shared storage.
EmbeddingHandle embed(NlpModel& model, const MlpNetwork& net,
                      std::span<const std::size_t> x_vars, Formulation f,
                      const std::string& tag = "nn", bool with_hessian = true);

}  // namespace mlopt
