#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace stabpa {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out

  bool operator==(const DenseLayer&) const = default;
};

/// MLP feature extractor: ReLU on hidden layers, identity on the last one.
/// The same struct doubles as the gradient container.
struct EncoderParams {
  std::vector<DenseLayer> layers;

  int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int embedding_dim() const { return static_cast<int>(layers.back().weight.rows()); }
  std::vector<int> widths() const;
  std::size_t parameter_count() const;
  bool all_finite() const;
  EncoderParams zeros_like() const;

  bool operator==(const EncoderParams&) const = default;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
EncoderParams init_encoder(std::span<const int> widths, std::uint64_t seed);

/// Validates widths and that every entry is finite.
void check_encoder(const EncoderParams& params);

inline constexpr double kNormEpsilon = 1e-12;

enum class NormMode {
  Guarded,  // divide by max(|z|, 1e-12)
  Strict,   // throw on a zero raw output
};

class ZeroNormError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Activations of a batch forward pass; rows are samples.
struct ForwardCache {
  Eigen::MatrixXd input;
  std::vector<Eigen::MatrixXd> pre_activations;  // one per layer
  Eigen::MatrixXd raw_output;                    // z, before normalization
  Eigen::VectorXd norms;                         // max(|z|, eps) per row
};

struct BatchEmbedding {
  Eigen::MatrixXd embeddings;  // unit rows
  ForwardCache cache;
};

struct SingleEmbedding {
  Eigen::VectorXd embedding;
  ForwardCache cache;
};

struct EncoderGradients {
  EncoderParams params;
  Eigen::MatrixXd input;  // rows match the forward batch
};

BatchEmbedding forward_batch(const EncoderParams& params, const Eigen::MatrixXd& x,
                             NormMode mode = NormMode::Guarded);
SingleEmbedding forward(const EncoderParams& params, const Eigen::VectorXd& x,
                        NormMode mode = NormMode::Guarded);

/// Normalized embeddings without keeping the cache.
Eigen::MatrixXd embed(const EncoderParams& params, const Eigen::MatrixXd& x);

/// Backpropagates dL/d(embedding) through the normalization, the output
/// layer and every ReLU layer. `grad_embeddings` has one row per sample.
EncoderGradients backward_batch(const EncoderParams& params, const ForwardCache& cache,
                                const Eigen::MatrixXd& grad_embeddings);
EncoderGradients backward(const EncoderParams& params, const ForwardCache& cache,
                          const Eigen::VectorXd& grad_embedding);

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Eigen::VectorXd> first_moment;
  std::vector<Eigen::VectorXd> second_moment;

  bool operator==(const AdamState&) const = default;
};

using ParamView = std::span<double>;
using GradView = std::span<const double>;

/// Zero moments shaped like `params`.
AdamState make_adam(std::span<const ParamView> params, double learning_rate);

/// One bias-corrected Adam update of every tensor in `params`.
void adam_step(std::span<const ParamView> params, std::span<const GradView> grads, AdamState& state);

std::vector<ParamView> parameter_views(EncoderParams& params);
std::vector<GradView> gradient_views(const EncoderParams& grads);

}  // namespace stabpa
