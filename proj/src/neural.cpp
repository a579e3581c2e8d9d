#include "mlopt/neural.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

namespace mlopt {

const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

Activation parse_activation(const std::string& name) {
  if (name == "identity") return Activation::Identity;
  if (name == "tanh") return Activation::Tanh;
  if (name == "sigmoid") return Activation::Sigmoid;
  throw NetworkFormatError("unknown activation '" + name + "'");
}

namespace {

void activate(Activation a, const Eigen::VectorXd& z, Eigen::VectorXd& y) {
  switch (a) {
    case Activation::Identity: y = z; break;
    case Activation::Tanh: y = z.array().tanh(); break;
    case Activation::Sigmoid:
      y.resize(z.size());
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        const double u = z[i];
        y[i] = u >= 0.0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
      }
      break;
  }
}

// First derivative from the activation output.
Eigen::ArrayXd first_derivative(Activation a, const Eigen::VectorXd& y) {
  switch (a) {
    case Activation::Identity: return Eigen::ArrayXd::Ones(y.size());
    case Activation::Tanh: return 1.0 - y.array().square();
    case Activation::Sigmoid: return y.array() * (1.0 - y.array());
  }
  return {};
}

Eigen::ArrayXd second_derivative(Activation a, const Eigen::VectorXd& y) {
  switch (a) {
    case Activation::Identity: return Eigen::ArrayXd::Zero(y.size());
    case Activation::Tanh: return -2.0 * y.array() * (1.0 - y.array().square());
    case Activation::Sigmoid: {
      const Eigen::ArrayXd s = y.array() * (1.0 - y.array());
      return s * (1.0 - 2.0 * y.array());
    }
  }
  return {};
}

void activate_matrix(Activation a, Eigen::MatrixXd& m) {
  switch (a) {
    case Activation::Identity: break;
    case Activation::Tanh: m = m.array().tanh(); break;
    case Activation::Sigmoid: m = 1.0 / (1.0 + (-m.array()).exp()); break;
  }
}

Eigen::ArrayXXd derivative_matrix(Activation a, const Eigen::MatrixXd& y) {
  switch (a) {
    case Activation::Identity: return Eigen::ArrayXXd::Ones(y.rows(), y.cols());
    case Activation::Tanh: return 1.0 - y.array().square();
    case Activation::Sigmoid: return y.array() * (1.0 - y.array());
  }
  return {};
}

}  // namespace

// ---------------------------------------------------------------------------

MlpNetwork::MlpNetwork(std::vector<Layer> layers) : layers_(std::move(layers)) {
  if (layers_.empty()) throw NetworkFormatError("network has no layers");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    if (L.weight.rows() == 0 || L.weight.cols() == 0) {
      throw NetworkFormatError(fmt::format("layer {} has an empty weight matrix", l));
    }
    if (L.bias.size() != L.weight.rows()) {
      throw NetworkFormatError(fmt::format("layer {} bias has {} entries, expected {}",
                                           l, L.bias.size(), L.weight.rows()));
    }
    if (l > 0 && L.weight.cols() != layers_[l - 1].weight.rows()) {
      throw NetworkFormatError(fmt::format(
          "layer {} takes {} inputs but layer {} produces {}", l, L.weight.cols(),
          l - 1, layers_[l - 1].weight.rows()));
    }
    if (!L.weight.allFinite() || !L.bias.allFinite()) {
      throw NetworkFormatError(fmt::format("layer {} has non-finite parameters", l));
    }
  }
}

std::size_t MlpNetwork::input_dim() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().weight.cols());
}

std::size_t MlpNetwork::output_dim() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.back().weight.rows());
}

std::vector<std::size_t> MlpNetwork::widths() const {
  std::vector<std::size_t> w;
  if (layers_.empty()) return w;
  w.push_back(input_dim());
  for (const auto& L : layers_) w.push_back(static_cast<std::size_t>(L.weight.rows()));
  return w;
}

std::size_t MlpNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& L : layers_) {
    n += static_cast<std::size_t>(L.weight.rows() * (L.weight.cols() + 1));
  }
  return n;
}

void MlpNetwork::check_input(std::span<const double> x) const {
  if (x.size() != input_dim()) {
    throw std::invalid_argument(fmt::format("network expects {} inputs, got {}",
                                            input_dim(), x.size()));
  }
}

Eigen::VectorXd MlpNetwork::forward(std::span<const double> x) const {
  MlpWorkspace ws;
  return forward(x, ws);
}

Eigen::VectorXd MlpNetwork::forward(std::span<const double> x, MlpWorkspace& ws) const {
  check_input(x);
  const std::size_t L = layers_.size();
  ws.z.resize(L);
  ws.y.resize(L);
  Eigen::Map<const Eigen::VectorXd> in(x.data(), static_cast<Eigen::Index>(x.size()));
  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = layers_[l];
    if (l == 0) {
      ws.z[l].noalias() = layer.weight * in;
    } else {
      ws.z[l].noalias() = layer.weight * ws.y[l - 1];
    }
    ws.z[l] += layer.bias;
    activate(layer.activation, ws.z[l], ws.y[l]);
  }
  return ws.y.back();
}

Eigen::MatrixXd MlpNetwork::jacobian(std::span<const double> x) const {
  MlpWorkspace ws;
  return jacobian(x, ws);
}

Eigen::MatrixXd MlpNetwork::jacobian(std::span<const double> x, MlpWorkspace& ws) const {
  forward(x, ws);
  // Forward-mode tangents: dy_l/dx = D_l W_l dy_{l-1}/dx.
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    Eigen::MatrixXd t;
    if (l == 0) {
      t = layer.weight;
    } else {
      t.noalias() = layer.weight * ws.dy;
    }
    const Eigen::ArrayXd d = first_derivative(layer.activation, ws.y[l]);
    ws.dy = d.matrix().asDiagonal() * t;
  }
  return ws.dy;
}

Eigen::MatrixXd MlpNetwork::weighted_hessian(std::span<const double> x,
                                             std::span<const double> w) const {
  MlpWorkspace ws;
  return weighted_hessian(x, w, ws);
}

Eigen::MatrixXd MlpNetwork::weighted_hessian(std::span<const double> x,
                                             std::span<const double> w,
                                             MlpWorkspace& ws) const {
  if (w.size() != output_dim()) {
    throw std::invalid_argument(fmt::format("weight vector has {} entries, expected {}",
                                            w.size(), output_dim()));
  }
  forward(x, ws);
  const std::size_t L = layers_.size();
  const auto n0 = static_cast<Eigen::Index>(input_dim());

  // Tangents of pre-activations, dz_l/dx, kept per layer for the reverse pass.
  ws.tangent.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = layers_[l];
    if (l == 0) {
      ws.tangent[l] = layer.weight;
    } else {
      ws.tangent[l].noalias() = layer.weight * ws.dy;
    }
    const Eigen::ArrayXd d = first_derivative(layer.activation, ws.y[l]);
    ws.dy = d.matrix().asDiagonal() * ws.tangent[l];
  }

  // Reverse sweep of the adjoint of w^T y and its tangent with respect to x.
  ws.adjoint = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  ws.adjoint_tangent = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(w.size()), n0);
  for (std::size_t li = L; li-- > 0;) {
    const auto& layer = layers_[li];
    const Eigen::ArrayXd d1 = first_derivative(layer.activation, ws.y[li]);
    const Eigen::ArrayXd d2 = second_derivative(layer.activation, ws.y[li]);
    const Eigen::VectorXd zbar = (d1 * ws.adjoint.array()).matrix();
    Eigen::MatrixXd zbar_t = d1.matrix().asDiagonal() * ws.adjoint_tangent;
    zbar_t += (d2 * ws.adjoint.array()).matrix().asDiagonal() * ws.tangent[li];
    ws.adjoint.noalias() = layer.weight.transpose() * zbar;
    ws.adjoint_tangent.noalias() = layer.weight.transpose() * zbar_t;
  }
  return 0.5 * (ws.adjoint_tangent + ws.adjoint_tangent.transpose());
}

MlpNetwork MlpNetwork::partially_apply(std::span<const std::size_t> fixed_inputs,
                                       std::span<const double> values) const {
  if (fixed_inputs.size() != values.size()) {
    throw std::invalid_argument("fixed input and value lists differ in length");
  }
  const auto n0 = input_dim();
  std::vector<bool> fixed(n0, false);
  for (auto i : fixed_inputs) {
    if (i >= n0 || fixed[i]) throw std::invalid_argument("invalid fixed input index");
    fixed[i] = true;
  }
  const auto& first = layers_.front();
  Layer out;
  out.activation = first.activation;
  out.bias = first.bias;
  for (std::size_t k = 0; k < fixed_inputs.size(); ++k) {
    out.bias += first.weight.col(static_cast<Eigen::Index>(fixed_inputs[k])) * values[k];
  }
  const auto live = static_cast<Eigen::Index>(n0 - fixed_inputs.size());
  if (live == 0) throw std::invalid_argument("partial application leaves no inputs");
  out.weight.resize(first.weight.rows(), live);
  Eigen::Index c = 0;
  for (std::size_t i = 0; i < n0; ++i) {
    if (!fixed[i]) out.weight.col(c++) = first.weight.col(static_cast<Eigen::Index>(i));
  }
  std::vector<Layer> layers = layers_;
  layers.front() = std::move(out);
  return MlpNetwork(std::move(layers));
}

MlpNetwork MlpNetwork::glorot(std::span<const std::size_t> widths, Activation hidden,
                              Activation output, std::uint64_t seed) {
  if (widths.size() < 2) throw std::invalid_argument("need at least input and output widths");
  std::mt19937_64 rng(seed);
  std::vector<Layer> layers;
  for (std::size_t l = 1; l < widths.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(widths[l - 1]);
    const auto out = static_cast<Eigen::Index>(widths[l]);
    if (in == 0 || out == 0) throw std::invalid_argument("layer widths must be positive");
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> u(-a, a);
    Layer layer;
    layer.weight.resize(out, in);
    for (Eigen::Index i = 0; i < out; ++i) {
      for (Eigen::Index j = 0; j < in; ++j) layer.weight(i, j) = u(rng);
    }
    layer.bias = Eigen::VectorXd::Zero(out);
    layer.activation = l + 1 == widths.size() ? output : hidden;
    layers.push_back(std::move(layer));
  }
  return MlpNetwork(std::move(layers));
}

MlpNetwork MlpNetwork::widened(std::span<const std::size_t> hidden, std::uint64_t seed,
                               double coupling) const {
  if (hidden.size() + 1 != layers_.size()) {
    throw std::invalid_argument(fmt::format("network has {} hidden layers, got {} widths",
                                            layers_.size() - 1, hidden.size()));
  }
  std::mt19937_64 rng(seed);
  std::vector<Layer> out;
  auto in_new = static_cast<Eigen::Index>(input_dim());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    const auto in_old = L.weight.cols();
    const auto rows_old = L.weight.rows();
    const auto rows_new = l < hidden.size() ? static_cast<Eigen::Index>(hidden[l]) : rows_old;
    if (rows_new < rows_old) throw std::invalid_argument("widened layers cannot shrink");
    const double a = std::sqrt(6.0 / static_cast<double>(in_new + rows_new));
    std::uniform_real_distribution<double> u(-a, a);
    Layer W;
    W.activation = L.activation;
    W.weight.resize(rows_new, in_new);
    W.bias = Eigen::VectorXd::Zero(rows_new);
    W.bias.head(rows_old) = L.bias;
    for (Eigen::Index i = 0; i < rows_new; ++i) {
      for (Eigen::Index j = 0; j < in_new; ++j) {
        if (i < rows_old && j < in_old) {
          W.weight(i, j) = L.weight(i, j);
        } else {
          W.weight(i, j) = j < in_old ? u(rng) : coupling * u(rng);
        }
      }
    }
    in_new = rows_new;
    out.push_back(std::move(W));
  }
  return MlpNetwork(std::move(out));
}

// ---------------------------------------------------------------------------
// Persistence

std::string weights_to_json(const MlpNetwork& net) {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["activations"] = nlohmann::json::array();
  doc["layers"] = nlohmann::json::array();
  for (const auto& L : net.layers()) {
    doc["activations"].push_back(activation_name(L.activation));
    nlohmann::json layer;
    layer["rows"] = L.weight.rows();
    layer["cols"] = L.weight.cols();
    std::vector<double> w(static_cast<std::size_t>(L.weight.size()));
    std::size_t k = 0;
    for (Eigen::Index i = 0; i < L.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < L.weight.cols(); ++j) w[k++] = L.weight(i, j);
    }
    layer["weight_row_major"] = std::move(w);
    layer["bias"] = std::vector<double>(L.bias.data(), L.bias.data() + L.bias.size());
    doc["layers"].push_back(std::move(layer));
  }
  return doc.dump() + "\n";
}

MlpNetwork weights_from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw NetworkFormatError(std::string("malformed weight file: ") + e.what());
  }
  try {
    if (doc.at("version").get<int>() != 1) {
      throw NetworkFormatError("unsupported weight file version");
    }
    const auto& acts = doc.at("activations");
    const auto& layers_json = doc.at("layers");
    if (!acts.is_array() || !layers_json.is_array() || acts.size() != layers_json.size()) {
      throw NetworkFormatError("activations and layers must be arrays of equal length");
    }
    std::vector<Layer> layers;
    for (std::size_t l = 0; l < layers_json.size(); ++l) {
      const auto& lj = layers_json[l];
      const auto rows = lj.at("rows").get<std::int64_t>();
      const auto cols = lj.at("cols").get<std::int64_t>();
      if (rows <= 0 || cols <= 0) throw NetworkFormatError("layer dimensions must be positive");
      const auto& w = lj.at("weight_row_major");
      const auto& b = lj.at("bias");
      if (!w.is_array() || static_cast<std::int64_t>(w.size()) != rows * cols) {
        throw NetworkFormatError(fmt::format("layer {} weight size mismatch", l));
      }
      if (!b.is_array() || static_cast<std::int64_t>(b.size()) != rows) {
        throw NetworkFormatError(fmt::format("layer {} bias size mismatch", l));
      }
      Layer layer;
      layer.activation = parse_activation(acts[l].get<std::string>());
      layer.weight.resize(rows, cols);
      std::size_t k = 0;
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          if (!w[k].is_number()) throw NetworkFormatError("non-numeric weight");
          layer.weight(i, j) = w[k++].get<double>();
        }
      }
      layer.bias.resize(rows);
      for (Eigen::Index i = 0; i < rows; ++i) {
        if (!b[i].is_number()) throw NetworkFormatError("non-numeric bias");
        layer.bias[i] = b[i].get<double>();
      }
      layers.push_back(std::move(layer));
    }
    return MlpNetwork(std::move(layers));
  } catch (const nlohmann::json::exception& e) {
    throw NetworkFormatError(std::string("weight file schema violation: ") + e.what());
  }
}

void save_weights_json(const MlpNetwork& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << weights_to_json(net);
}

MlpNetwork load_weights_json(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return weights_from_json(ss.str());
}

namespace {

template <class T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host assumed");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw NetworkFormatError("truncated binary weight file");
  return v;
}

}  // namespace

void save_weights_binary(const MlpNetwork& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("MLPW", 4);
  put_le<std::uint32_t>(os, 1);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.depth()));
  for (const auto& L : net.layers()) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(L.weight.rows()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(L.weight.cols()));
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(L.activation));
    for (Eigen::Index i = 0; i < L.weight.rows(); ++i) {
      for (Eigen::Index j = 0; j < L.weight.cols(); ++j) put_le<double>(os, L.weight(i, j));
    }
    for (Eigen::Index i = 0; i < L.bias.size(); ++i) put_le<double>(os, L.bias[i]);
  }
}

MlpNetwork load_weights_binary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MLPW", 4) != 0) {
    throw NetworkFormatError("bad magic in binary weight file");
  }
  if (get_le<std::uint32_t>(is) != 1) throw NetworkFormatError("unsupported binary version");
  const auto depth = get_le<std::uint32_t>(is);
  std::vector<Layer> layers;
  for (std::uint32_t l = 0; l < depth; ++l) {
    const auto rows = get_le<std::uint32_t>(is);
    const auto cols = get_le<std::uint32_t>(is);
    const auto code = get_le<std::uint8_t>(is);
    if (code > 2) throw NetworkFormatError("unknown activation code");
    Layer layer;
    layer.activation = static_cast<Activation>(code);
    layer.weight.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) layer.weight(i, j) = get_le<double>(is);
    }
    layer.bias.resize(rows);
    for (Eigen::Index i = 0; i < rows; ++i) layer.bias[i] = get_le<double>(is);
    layers.push_back(std::move(layer));
  }
  return MlpNetwork(std::move(layers));
}

void save_weights(const MlpNetwork& net, const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    save_weights_json(net, path);
  } else {
    save_weights_binary(net, path);
  }
}

MlpNetwork load_weights(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("weight file not found: " + path.string());
  }
  return path.extension() == ".json" ? load_weights_json(path) : load_weights_binary(path);
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(loss_threshold > 0.0)) throw std::invalid_argument("loss threshold must be positive");
  if (consecutive_epochs < 1) throw std::invalid_argument("consecutive epoch count must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
}

namespace {

struct Scaler {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;
};

Scaler fit_scaler(const Eigen::MatrixXd& m) {
  Scaler s;
  s.mean = m.colwise().mean().transpose();
  s.scale.resize(m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double var = (m.col(j).array() - s.mean[j]).square().mean();
    const double sd = std::sqrt(var);
    s.scale[j] = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

struct AdamSlot {
  Eigen::MatrixXd mw, vw;
  Eigen::VectorXd mb, vb;
};

// Mean squared error over all entries of a (features x samples) batch.
double batch_mse(const std::vector<Layer>& layers, const Eigen::MatrixXd& x,
                 const Eigen::MatrixXd& t) {
  Eigen::MatrixXd a = x;
  for (const auto& L : layers) {
    Eigen::MatrixXd z = L.weight * a;
    z.colwise() += L.bias;
    activate_matrix(L.activation, z);
    a = std::move(z);
  }
  return (a - t).array().square().mean();
}

}  // namespace

TrainResult train_adam(const Dataset& data, std::span<const std::size_t> widths,
                       const TrainConfig& cfg) {
  cfg.validate();
  const auto n = data.inputs.rows();
  if (n == 0) throw std::invalid_argument("dataset is empty");
  if (data.targets.rows() != n) throw std::invalid_argument("inputs and targets differ in row count");
  if (widths.size() < 2 || widths.front() != static_cast<std::size_t>(data.inputs.cols()) ||
      widths.back() != static_cast<std::size_t>(data.targets.cols())) {
    throw std::invalid_argument(fmt::format(
        "layer widths must start with {} inputs and end with {} outputs",
        data.inputs.cols(), data.targets.cols()));
  }

  const Scaler sx = fit_scaler(data.inputs);
  const Scaler sy = fit_scaler(data.targets);
  // Column-major samples: features x samples.
  Eigen::MatrixXd X = ((data.inputs.rowwise() - sx.mean.transpose()).array().rowwise() /
                       sx.scale.transpose().array()).matrix().transpose();
  Eigen::MatrixXd T = ((data.targets.rowwise() - sy.mean.transpose()).array().rowwise() /
                       sy.scale.transpose().array()).matrix().transpose();

  auto net = MlpNetwork::glorot(widths, cfg.hidden, Activation::Identity, cfg.seed);
  std::vector<Layer> layers = net.layers();
  const std::size_t L = layers.size();
  std::vector<AdamSlot> adam(L);
  for (std::size_t l = 0; l < L; ++l) {
    adam[l].mw = Eigen::MatrixXd::Zero(layers[l].weight.rows(), layers[l].weight.cols());
    adam[l].vw = adam[l].mw;
    adam[l].mb = Eigen::VectorXd::Zero(layers[l].bias.size());
    adam[l].vb = adam[l].mb;
  }

  const std::size_t batch = cfg.batch_size == 0 ? static_cast<std::size_t>(n)
                                                : std::min<std::size_t>(cfg.batch_size, n);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5deece66dULL);

  TrainResult result;
  std::size_t below = 0;
  std::uint64_t step = 0;
  std::vector<Eigen::MatrixXd> acts(L + 1);

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    if (batch < static_cast<std::size_t>(n)) {
      for (std::size_t i = order.size() - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(order[i], order[pick(shuffle_rng)]);
      }
    }
    for (std::size_t start = 0; start < static_cast<std::size_t>(n); start += batch) {
      const std::size_t stop = std::min<std::size_t>(start + batch, static_cast<std::size_t>(n));
      const auto b = static_cast<Eigen::Index>(stop - start);
      Eigen::MatrixXd xb(X.rows(), b), tb(T.rows(), b);
      if (b == n) {
        xb = X;
        tb = T;
      } else {
        for (Eigen::Index k = 0; k < b; ++k) {
          xb.col(k) = X.col(order[start + static_cast<std::size_t>(k)]);
          tb.col(k) = T.col(order[start + static_cast<std::size_t>(k)]);
        }
      }

      acts[0] = std::move(xb);
      for (std::size_t l = 0; l < L; ++l) {
        Eigen::MatrixXd z = layers[l].weight * acts[l];
        z.colwise() += layers[l].bias;
        activate_matrix(layers[l].activation, z);
        acts[l + 1] = std::move(z);
      }
      Eigen::MatrixXd delta =
          (2.0 / static_cast<double>(tb.size())) * (acts[L] - tb);
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t li = L; li-- > 0;) {
        delta.array() *= derivative_matrix(layers[li].activation, acts[li + 1]);
        const Eigen::MatrixXd gw = delta * acts[li].transpose();
        const Eigen::VectorXd gb = delta.rowwise().sum();
        if (li > 0) delta = layers[li].weight.transpose() * delta;

        auto& s = adam[li];
        s.mw = cfg.beta1 * s.mw + (1.0 - cfg.beta1) * gw;
        s.vw = cfg.beta2 * s.vw + (1.0 - cfg.beta2) * gw.cwiseProduct(gw);
        s.mb = cfg.beta1 * s.mb + (1.0 - cfg.beta1) * gb;
        s.vb = cfg.beta2 * s.vb + (1.0 - cfg.beta2) * gb.cwiseProduct(gb);
        layers[li].weight.array() -= cfg.learning_rate * (s.mw.array() / c1) /
                                     ((s.vw.array() / c2).sqrt() + cfg.epsilon);
        layers[li].bias.array() -= cfg.learning_rate * (s.mb.array() / c1) /
                                   ((s.vb.array() / c2).sqrt() + cfg.epsilon);
      }
    }

    const double loss = batch_mse(layers, X, T);
    if (!std::isfinite(loss)) {
      throw TrainingError(fmt::format("training diverged: non-finite loss at epoch {}", epoch));
    }
    result.loss_history.push_back(loss);
    below = loss < cfg.loss_threshold ? below + 1 : 0;
    if (below >= cfg.consecutive_epochs) {
      result.converged = true;
      break;
    }
  }
  result.epochs = result.loss_history.size();

  // Fold the standardization into the first and last layers.
  auto& first = layers.front();
  const Eigen::VectorXd inv = sx.scale.cwiseInverse();
  first.bias -= first.weight * sx.mean.cwiseProduct(inv);
  first.weight = first.weight * inv.asDiagonal();
  auto& last = layers.back();
  last.weight = sy.scale.asDiagonal() * last.weight;
  last.bias = sy.scale.cwiseProduct(last.bias) + sy.mean;

  result.network = MlpNetwork(std::move(layers));
  return result;
}

}  // namespace mlopt
