#include "ntksel/toy_model.hpp"

#include <cmath>
#include <random>

#include "ntksel/feature_store.hpp"

namespace ntksel {

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw Error(ErrorCode::config, "unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation act) noexcept {
  switch (act) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "unknown";
}

namespace {

double activate(Activation act, double z) {
  switch (act) {
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::identity: return z;
  }
  return z;
}

// Derivative expressed through the pre-activation; relu'(0) = 0.
double activate_grad(Activation act, double z) {
  switch (act) {
    case Activation::tanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

struct Tape {
  std::vector<Eigen::VectorXd> inputs;    // h_{l-1}
  std::vector<Eigen::VectorXd> pre;       // z_l
  std::vector<Eigen::VectorXd> projected; // B_l h_{l-1}
  Eigen::VectorXd output;
};

Tape run_forward(const ToyNetwork& net, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const auto& layers = net.layers();
  Tape tape;
  tape.inputs.reserve(layers.size());
  tape.pre.reserve(layers.size());
  tape.projected.reserve(layers.size());
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    Eigen::VectorXd bh = layer.b * h;
    Eigen::VectorXd z = layer.weight * h + layer.a * bh + layer.bias;
    tape.inputs.push_back(h);
    tape.projected.push_back(std::move(bh));
    if (l + 1 < layers.size()) {
      h = z.unaryExpr([&](double v) { return activate(net.activation(), v); });
    } else {
      h = z;
    }
    tape.pre.push_back(std::move(z));
  }
  tape.output = h;
  return tape;
}

struct BaseGradient {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;
};

// Back-propagates dL/df = seed. Writes the adapter gradient into `adapter`
// (canonical flat order) and, if requested, base-weight gradients.
void run_backward(const ToyNetwork& net, const Tape& tape, const Eigen::VectorXd& seed,
                  Eigen::Ref<Eigen::VectorXd> adapter, BaseGradient* base) {
  const auto& layers = net.layers();
  const std::size_t n = layers.size();
  std::vector<Eigen::Index> offset(n + 1, 0);
  for (std::size_t l = 0; l < n; ++l) offset[l + 1] = offset[l] + layers[l].a.size() + layers[l].b.size();
  if (base != nullptr) {
    base->weight.resize(n);
    base->bias.resize(n);
  }
  Eigen::VectorXd delta = seed;
  for (std::size_t l = n; l-- > 0;) {
    const auto& layer = layers[l];
    if (l + 1 < n) {
      for (Eigen::Index i = 0; i < delta.size(); ++i) delta[i] *= activate_grad(net.activation(), tape.pre[l][i]);
    }
    const Eigen::VectorXd& h = tape.inputs[l];
    // dA = delta (B h)^T, dB = (A^T delta) h^T, both row-major.
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> da(
        adapter.data() + offset[l], layer.a.rows(), layer.a.cols());
    da.noalias() = delta * tape.projected[l].transpose();
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> db(
        adapter.data() + offset[l] + layer.a.size(), layer.b.rows(), layer.b.cols());
    const Eigen::VectorXd at_delta = layer.a.transpose() * delta;
    db.noalias() = at_delta * h.transpose();
    if (base != nullptr) {
      base->weight[l] = delta * h.transpose();
      base->bias[l] = delta;
    }
    if (l > 0) {
      delta = layer.weight.transpose() * delta + layer.b.transpose() * at_delta;
    }
  }
}

void check_input(const ToyNetwork& net, std::size_t n) {
  if (n != net.input_dim()) {
    throw Error(ErrorCode::dim_mismatch,
                "input has " + std::to_string(n) + " entries, network expects " + std::to_string(net.input_dim()));
  }
}

Eigen::Map<const Eigen::VectorXd> as_vector(std::span<const double> x) {
  return {x.data(), static_cast<Eigen::Index>(x.size())};
}

void check_finite(const Eigen::VectorXd& g) {
  if (!g.allFinite()) throw Error(ErrorCode::non_finite_gradient, "adapter gradient has non-finite entries");
}

}  // namespace

ToyNetwork::ToyNetwork(std::vector<ToyLayer> layers, Activation activation)
    : layers_(std::move(layers)), activation_(activation) {
  if (layers_.empty()) throw Error(ErrorCode::config, "network needs at least one layer");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& L = layers_[l];
    const bool ok = L.bias.size() == L.weight.rows() && L.a.rows() == L.weight.rows() &&
                    L.b.cols() == L.weight.cols() && L.a.cols() == L.b.rows() &&
                    (l == 0 || L.weight.cols() == layers_[l - 1].weight.rows());
    if (!ok) throw Error(ErrorCode::dim_mismatch, "layer " + std::to_string(l) + " has inconsistent shapes");
  }
}

ToyNetwork ToyNetwork::random(const ToyConfig& cfg, std::uint64_t seed) {
  if (cfg.layer_dims.size() < 2) throw Error(ErrorCode::config, "layer_dims needs at least input and output");
  if (cfg.rank < 1) throw Error(ErrorCode::config, "adapter rank must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<ToyLayer> layers;
  for (std::size_t l = 0; l + 1 < cfg.layer_dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(cfg.layer_dims[l]);
    const auto out = static_cast<Eigen::Index>(cfg.layer_dims[l + 1]);
    const auto r = static_cast<Eigen::Index>(cfg.rank);
    if (in < 1 || out < 1) throw Error(ErrorCode::config, "layer widths must be positive");
    const double scale = 1.0 / std::sqrt(static_cast<double>(in));
    ToyLayer layer;
    layer.weight = Eigen::MatrixXd::NullaryExpr(out, in, [&] { return scale * normal(rng); });
    layer.bias = Eigen::VectorXd::NullaryExpr(out, [&] { return cfg.bias_std * normal(rng); });
    layer.a = Eigen::MatrixXd::Zero(out, r);
    layer.b = Eigen::MatrixXd::NullaryExpr(r, in, [&] { return scale * normal(rng); });
    layers.push_back(std::move(layer));
  }
  return ToyNetwork(std::move(layers), cfg.activation);
}

std::size_t ToyNetwork::input_dim() const noexcept { return static_cast<std::size_t>(layers_.front().weight.cols()); }
std::size_t ToyNetwork::output_dim() const noexcept { return static_cast<std::size_t>(layers_.back().weight.rows()); }
std::size_t ToyNetwork::rank() const noexcept { return static_cast<std::size_t>(layers_.front().a.cols()); }

std::vector<std::size_t> ToyNetwork::layer_dims() const {
  std::vector<std::size_t> dims{input_dim()};
  for (const auto& l : layers_) dims.push_back(static_cast<std::size_t>(l.weight.rows()));
  return dims;
}

std::size_t ToyNetwork::adapter_param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.a.size() + l.b.size());
  return n;
}

std::size_t ToyNetwork::base_param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

Eigen::VectorXd ToyNetwork::adapter_params() const {
  Eigen::VectorXd flat(static_cast<Eigen::Index>(adapter_param_count()));
  Eigen::Index pos = 0;
  for (const auto& l : layers_) {
    for (Eigen::Index i = 0; i < l.a.rows(); ++i)
      for (Eigen::Index j = 0; j < l.a.cols(); ++j) flat[pos++] = l.a(i, j);
    for (Eigen::Index i = 0; i < l.b.rows(); ++i)
      for (Eigen::Index j = 0; j < l.b.cols(); ++j) flat[pos++] = l.b(i, j);
  }
  return flat;
}

void ToyNetwork::set_adapter_params(const Eigen::VectorXd& flat) {
  if (static_cast<std::size_t>(flat.size()) != adapter_param_count()) {
    throw Error(ErrorCode::dim_mismatch, "adapter vector has wrong length");
  }
  Eigen::Index pos = 0;
  for (auto& l : layers_) {
    for (Eigen::Index i = 0; i < l.a.rows(); ++i)
      for (Eigen::Index j = 0; j < l.a.cols(); ++j) l.a(i, j) = flat[pos++];
    for (Eigen::Index i = 0; i < l.b.rows(); ++i)
      for (Eigen::Index j = 0; j < l.b.cols(); ++j) l.b(i, j) = flat[pos++];
  }
}

Eigen::VectorXd forward(const ToyNetwork& net, std::span<const double> x) {
  check_input(net, x.size());
  return run_forward(net, as_vector(x)).output;
}

AdapterGradient summed_output_gradient(const ToyNetwork& net, std::span<const double> x) {
  check_input(net, x.size());
  const Tape tape = run_forward(net, as_vector(x));
  AdapterGradient g;
  g.flat.resize(static_cast<Eigen::Index>(net.adapter_param_count()));
  run_backward(net, tape, Eigen::VectorXd::Ones(static_cast<Eigen::Index>(net.output_dim())), g.flat, nullptr);
  check_finite(g.flat);
  return g;
}

Eigen::MatrixXd jacobian(const ToyNetwork& net, std::span<const double> x, std::size_t cap) {
  check_input(net, x.size());
  const std::size_t d_out = net.output_dim();
  const std::size_t p = net.adapter_param_count();
  if (d_out * p > cap) {
    throw Error(ErrorCode::size_cap_exceeded,
                std::to_string(d_out) + " x " + std::to_string(p) + " exceeds cap " + std::to_string(cap));
  }
  const Tape tape = run_forward(net, as_vector(x));
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(d_out), static_cast<Eigen::Index>(p));
  Eigen::VectorXd row(static_cast<Eigen::Index>(p));
  for (std::size_t k = 0; k < d_out; ++k) {
    run_backward(net, tape, Eigen::VectorXd::Unit(static_cast<Eigen::Index>(d_out), static_cast<Eigen::Index>(k)),
                 row, nullptr);
    jac.row(static_cast<Eigen::Index>(k)) = row.transpose();
  }
  return jac;
}

Eigen::VectorXd mean_over_blocks(std::span<const double> values, std::size_t block) {
  if (block == 0 || values.size() % block != 0 || values.empty()) {
    throw Error(ErrorCode::dim_mismatch, std::to_string(values.size()) + " values do not split into blocks of " +
                                             std::to_string(block));
  }
  const std::size_t n_blocks = values.size() / block;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(block));
  for (std::size_t b = 0; b < n_blocks; ++b) {
    for (std::size_t i = 0; i < block; ++i) mean[static_cast<Eigen::Index>(i)] += values[b * block + i];
  }
  return mean / static_cast<double>(n_blocks);
}

Eigen::VectorXd embed(const ToyNetwork& net, std::span<const double> tokens) {
  if (net.layers().size() < 2) throw Error(ErrorCode::no_hidden_layer, "network has no hidden layer");
  const std::size_t d = net.input_dim();
  if (tokens.empty() || tokens.size() % d != 0) {
    throw Error(ErrorCode::dim_mismatch, "token buffer length " + std::to_string(tokens.size()) +
                                             " is not a positive multiple of " + std::to_string(d));
  }
  const std::size_t n_tokens = tokens.size() / d;
  std::vector<double> hidden;
  for (std::size_t t = 0; t < n_tokens; ++t) {
    const Tape tape = run_forward(net, as_vector(tokens.subspan(t * d, d)));
    const Eigen::VectorXd& h = tape.inputs.back();  // input to the output layer
    hidden.insert(hidden.end(), h.data(), h.data() + h.size());
  }
  return mean_over_blocks(hidden, hidden.size() / n_tokens);
}

Eigen::VectorXd sequence_summed_gradient(const ToyNetwork& net, std::span<const double> tokens) {
  const std::size_t d = net.input_dim();
  if (tokens.empty() || tokens.size() % d != 0) {
    throw Error(ErrorCode::dim_mismatch, "token buffer length " + std::to_string(tokens.size()) +
                                             " is not a positive multiple of " + std::to_string(d));
  }
  Eigen::VectorXd total = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(net.adapter_param_count()));
  for (std::size_t t = 0; t < tokens.size() / d; ++t) total += summed_output_gradient(net, tokens.subspan(t * d, d)).flat;
  return total;
}

double mse_loss(const ToyNetwork& net, const Dataset& data) {
  if (data.empty()) throw Error(ErrorCode::config, "empty dataset");
  double total = 0.0;
  for (const auto& ex : data) {
    check_input(net, static_cast<std::size_t>(ex.x.size()));
    total += (run_forward(net, ex.x).output - ex.y).squaredNorm();
  }
  return total / (2.0 * static_cast<double>(data.size()));
}

Eigen::VectorXd adapter_loss_gradient(const ToyNetwork& net, const Dataset& data) {
  if (data.empty()) throw Error(ErrorCode::config, "empty dataset");
  const auto p = static_cast<Eigen::Index>(net.adapter_param_count());
  Eigen::VectorXd total = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd g(p);
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (const auto& ex : data) {
    check_input(net, static_cast<std::size_t>(ex.x.size()));
    const Tape tape = run_forward(net, ex.x);
    run_backward(net, tape, (tape.output - ex.y) * inv_n, g, nullptr);
    total += g;
  }
  return total;
}

void adapter_gd_step(ToyNetwork& net, const Dataset& data, double lr) {
  const Eigen::VectorXd grad = adapter_loss_gradient(net, data);
  const Eigen::VectorXd next = net.adapter_params() - lr * grad;
  if (!next.allFinite()) throw Error(ErrorCode::divergence, "adapter parameters became non-finite");
  net.set_adapter_params(next);
}

namespace {

// One full-batch step on base weights and biases; adapters are held fixed.
ToyNetwork base_gd_step(const ToyNetwork& net, const Dataset& data, double lr) {
  std::vector<ToyLayer> layers = net.layers();
  std::vector<Eigen::MatrixXd> dw(layers.size());
  std::vector<Eigen::VectorXd> db(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    dw[l] = Eigen::MatrixXd::Zero(layers[l].weight.rows(), layers[l].weight.cols());
    db[l] = Eigen::VectorXd::Zero(layers[l].bias.size());
  }
  Eigen::VectorXd scratch(static_cast<Eigen::Index>(net.adapter_param_count()));
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (const auto& ex : data) {
    const Tape tape = run_forward(net, ex.x);
    BaseGradient g;
    run_backward(net, tape, (tape.output - ex.y) * inv_n, scratch, &g);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      dw[l] += g.weight[l];
      db[l] += g.bias[l];
    }
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight -= lr * dw[l];
    layers[l].bias -= lr * db[l];
    if (!layers[l].weight.allFinite() || !layers[l].bias.allFinite()) {
      throw Error(ErrorCode::divergence, "base weights became non-finite during pretraining");
    }
  }
  return ToyNetwork(std::move(layers), net.activation());
}

void require_finite_loss(double loss, const char* phase) {
  if (!std::isfinite(loss)) throw Error(ErrorCode::divergence, std::string("loss became non-finite during ") + phase);
}

}  // namespace

AdaptResult pretrain_then_adapt(const ToyNetwork& net, const Dataset& general, const Dataset& domain,
                                std::size_t steps, double lr, std::size_t checkpoint_every) {
  if (general.empty() || domain.empty()) throw Error(ErrorCode::config, "datasets must be non-empty");
  if (!(lr > 0.0)) throw Error(ErrorCode::config, "learning rate must be positive");
  if (checkpoint_every < 1) throw Error(ErrorCode::config, "checkpoint_every must be positive");

  AdaptResult result{net, {}, 0.0, 0.0, 0.0, 0.0};
  result.pretrain_initial_loss = mse_loss(net, general);
  ToyNetwork current = net;
  for (std::size_t s = 0; s < steps; ++s) {
    current = base_gd_step(current, general, lr);
    require_finite_loss(mse_loss(current, general), "pretraining");
  }
  result.pretrain_final_loss = mse_loss(current, general);

  result.adapt_initial_loss = mse_loss(current, domain);
  for (std::size_t s = 1; s <= steps; ++s) {
    adapter_gd_step(current, domain, lr);
    const double loss = mse_loss(current, domain);
    require_finite_loss(loss, "adaptation");
    if (s % checkpoint_every == 0) result.checkpoints.push_back({s, current, loss});
  }
  result.adapt_final_loss = mse_loss(current, domain);
  result.net = std::move(current);
  return result;
}

std::string write_network_snapshots(const std::string& path, std::span<const Checkpoint> checkpoints) {
  if (checkpoints.empty()) throw Error(ErrorCode::config, "no checkpoints to write");
  const ToyNetwork& first = checkpoints.front().net;
  FeatureFileHeader header;
  header.kind = FeatureKind::toynet;
  header.dim = static_cast<std::uint32_t>(first.base_param_count() + first.adapter_param_count() + 1);
  header.source_param_dim = first.adapter_param_count();
  const auto dims = first.layer_dims();
  wire::put_u32(header.extension, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) wire::put_u32(header.extension, static_cast<std::uint32_t>(d));
  wire::put_u32(header.extension, static_cast<std::uint32_t>(first.rank()));
  wire::put_u32(header.extension, static_cast<std::uint32_t>(first.activation()));

  FeatureWriter writer(path, header);
  for (const auto& cp : checkpoints) {
    if (cp.net.layer_dims() != dims || cp.net.rank() != first.rank()) {
      throw Error(ErrorCode::dim_mismatch, "checkpoints have different architectures");
    }
    WideRecord rec;
    rec.id = {"step", cp.step};
    rec.vector.reserve(header.dim);
    for (const auto& l : cp.net.layers()) {
      for (Eigen::Index i = 0; i < l.weight.rows(); ++i)
        for (Eigen::Index j = 0; j < l.weight.cols(); ++j) rec.vector.push_back(l.weight(i, j));
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) rec.vector.push_back(l.bias[i]);
      for (Eigen::Index i = 0; i < l.a.rows(); ++i)
        for (Eigen::Index j = 0; j < l.a.cols(); ++j) rec.vector.push_back(l.a(i, j));
      for (Eigen::Index i = 0; i < l.b.rows(); ++i)
        for (Eigen::Index j = 0; j < l.b.cols(); ++j) rec.vector.push_back(l.b(i, j));
    }
    rec.vector.push_back(cp.loss);
    writer.write(rec);
  }
  return writer.finish();
}

std::vector<Checkpoint> read_network_snapshots(const std::string& path) {
  FeatureReader reader(path);
  const auto& header = reader.header();
  if (header.kind != FeatureKind::toynet) {
    throw Error(ErrorCode::bad_kind, "'" + path + "' is a " + std::string(to_string(header.kind)) + " file");
  }
  wire::Cursor c(header.extension);
  std::vector<std::size_t> dims(c.u32());
  for (auto& d : dims) d = c.u32();
  const std::size_t rank = c.u32();
  const std::uint32_t act = c.u32();
  if (act > static_cast<std::uint32_t>(Activation::identity) || dims.size() < 2) {
    throw Error(ErrorCode::bad_kind, "'" + path + "' has a malformed architecture block");
  }
  std::vector<Checkpoint> out;
  WideRecord rec;
  while (reader.next(rec)) {
    std::vector<ToyLayer> layers;
    std::size_t pos = 0;
    auto take = [&]() {
      if (pos >= rec.vector.size()) throw Error(ErrorCode::dim_mismatch, "snapshot shorter than its architecture");
      return rec.vector[pos++];
    };
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const auto in = static_cast<Eigen::Index>(dims[l]);
      const auto outd = static_cast<Eigen::Index>(dims[l + 1]);
      const auto r = static_cast<Eigen::Index>(rank);
      ToyLayer layer{Eigen::MatrixXd(outd, in), Eigen::VectorXd(outd), Eigen::MatrixXd(outd, r), Eigen::MatrixXd(r, in)};
      for (Eigen::Index i = 0; i < outd; ++i)
        for (Eigen::Index j = 0; j < in; ++j) layer.weight(i, j) = take();
      for (Eigen::Index i = 0; i < outd; ++i) layer.bias[i] = take();
      for (Eigen::Index i = 0; i < outd; ++i)
        for (Eigen::Index j = 0; j < r; ++j) layer.a(i, j) = take();
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < in; ++j) layer.b(i, j) = take();
      layers.push_back(std::move(layer));
    }
    const double loss = take();
    if (pos != rec.vector.size()) throw Error(ErrorCode::dim_mismatch, "snapshot longer than its architecture");
    out.push_back({static_cast<std::size_t>(rec.id.index), ToyNetwork(std::move(layers), static_cast<Activation>(act)), loss});
  }
  return out;
}

}  // namespace ntksel
