#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ntksel/error.hpp"

namespace ntksel {

enum class Activation { tanh, relu, identity };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation act) noexcept;

struct ToyConfig {
  std::vector<std::size_t> layer_dims{8, 128, 128, 3};
  std::size_t rank = 2;
  Activation activation = Activation::tanh;
  double bias_std = 0.0;
};

/// One dense layer: effective weight = weight + a * b, with a (out x r)
/// and b (r x in) the low-rank adapter factors.
struct ToyLayer {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
};

/// Gradient over adapter parameters, flattened layer by layer: all of A
/// (row-major), then all of B (row-major).
struct AdapterGradient {
  Eigen::VectorXd flat;
};

/// Feed-forward network with frozen base weights and trainable low-rank
/// adapters. The activation applies to every layer except the last.
class ToyNetwork {
 public:
  ToyNetwork(std::vector<ToyLayer> layers, Activation activation);

  /// Base weights ~ N(0, 1/fan_in), biases ~ N(0, bias_std^2), A = 0 and
  /// B ~ N(0, 1/fan_in), so the adapted function starts equal to the base.
  static ToyNetwork random(const ToyConfig& cfg, std::uint64_t seed);

  std::size_t input_dim() const noexcept;
  std::size_t output_dim() const noexcept;
  std::size_t rank() const noexcept;
  Activation activation() const noexcept { return activation_; }
  const std::vector<ToyLayer>& layers() const noexcept { return layers_; }
  std::vector<std::size_t> layer_dims() const;

  std::size_t adapter_param_count() const noexcept;
  /// Base weights and biases; adapters excluded.
  std::size_t base_param_count() const noexcept;

  Eigen::VectorXd adapter_params() const;
  void set_adapter_params(const Eigen::VectorXd& flat);

 private:
  std::vector<ToyLayer> layers_;
  Activation activation_;
};

Eigen::VectorXd forward(const ToyNetwork& net, std::span<const double> x);

/// Gradient of sum_k f_k(x) with respect to the adapters (one backward pass).
AdapterGradient summed_output_gradient(const ToyNetwork& net, std::span<const double> x);

inline constexpr std::size_t kDefaultJacobianCap = 10'000'000;

/// D x P_lora; row k is the adapter gradient of f_k(x).
Eigen::MatrixXd jacobian(const ToyNetwork& net, std::span<const double> x,
                         std::size_t cap = kDefaultJacobianCap);

/// Elementwise mean of consecutive `block`-sized groups of `values`.
Eigen::VectorXd mean_over_blocks(std::span<const double> values, std::size_t block);

/// `tokens` holds one or more input blocks of length input_dim(); returns
/// the mean over blocks of the final hidden layer's activations.
Eigen::VectorXd embed(const ToyNetwork& net, std::span<const double> tokens);

/// Sum over token blocks of summed_output_gradient.
Eigen::VectorXd sequence_summed_gradient(const ToyNetwork& net, std::span<const double> tokens);

struct Example {
  Eigen::VectorXd x;
  Eigen::VectorXd y;
};
using Dataset = std::vector<Example>;

/// (1 / 2n) sum_i ||f(x_i) - y_i||^2
double mse_loss(const ToyNetwork& net, const Dataset& data);

/// Full-batch gradient of mse_loss over the adapters.
Eigen::VectorXd adapter_loss_gradient(const ToyNetwork& net, const Dataset& data);

/// One explicit-Euler step on the adapters. Throws DivergenceError when the
/// loss or parameters become non-finite.
void adapter_gd_step(ToyNetwork& net, const Dataset& data, double lr);

struct Checkpoint {
  std::size_t step = 0;
  ToyNetwork net;
  double loss = 0.0;
};

struct AdaptResult {
  ToyNetwork net;
  std::vector<Checkpoint> checkpoints;
  double pretrain_initial_loss = 0.0;
  double pretrain_final_loss = 0.0;
  double adapt_initial_loss = 0.0;
  double adapt_final_loss = 0.0;
};

/// Trains base weights and biases on `general` for `steps` full-batch steps,
/// freezes them, then trains only the adapters on `domain` for `steps`.
/// A checkpoint is taken after every `checkpoint_every` adapter steps.
AdaptResult pretrain_then_adapt(const ToyNetwork& net, const Dataset& general, const Dataset& domain,
                                std::size_t steps, double lr, std::size_t checkpoint_every = 1);

/// Snapshots in a feature-store container of kind toynet. Each record is
/// one checkpoint ("step", t) holding every parameter in f64, then the loss.
std::string write_network_snapshots(const std::string& path, std::span<const Checkpoint> checkpoints);
std::vector<Checkpoint> read_network_snapshots(const std::string& path);

}  // namespace ntksel
