#include "stabpa/encoder.hpp"

#include <cmath>
#include <random>
#include <string>

#include "stabpa/rng.hpp"

namespace stabpa {

std::vector<int> EncoderParams::widths() const {
  std::vector<int> w;
  if (layers.empty()) return w;
  w.push_back(input_dim());
  for (const auto& l : layers) w.push_back(static_cast<int>(l.weight.rows()));
  return w;
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

bool EncoderParams::all_finite() const {
  for (const auto& l : layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

EncoderParams EncoderParams::zeros_like() const {
  EncoderParams z;
  for (const auto& l : layers)
    z.layers.push_back(
        {Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  return z;
}

EncoderParams init_encoder(std::span<const int> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ShapeError("encoder needs at least input and output widths");
  for (int w : widths)
    if (w < 1) throw ShapeError("encoder widths must be positive");
  Rng rng(seed);
  EncoderParams p;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths[i]));
    std::uniform_real_distribution<double> u(-bound, bound);
    DenseLayer layer{Eigen::MatrixXd(widths[i + 1], widths[i]), Eigen::VectorXd(widths[i + 1])};
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) layer.weight(r, c) = u(rng);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = u(rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

void check_encoder(const EncoderParams& params) {
  if (params.layers.empty()) throw ShapeError("encoder has no layers");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    if (l.bias.size() != l.weight.rows())
      throw ShapeError("layer " + std::to_string(i) + ": bias size does not match weight rows");
    if (i > 0 && l.weight.cols() != params.layers[i - 1].weight.rows())
      throw ShapeError("layer " + std::to_string(i) + ": width mismatch with previous layer");
  }
  if (!params.all_finite()) throw ShapeError("encoder has non-finite parameters");
}

BatchEmbedding forward_batch(const EncoderParams& params, const Eigen::MatrixXd& x, NormMode mode) {
  if (params.layers.empty() || x.cols() != params.input_dim())
    throw ShapeError("forward: input has " + std::to_string(x.cols()) + " features, expected " +
                     std::to_string(params.layers.empty() ? 0 : params.input_dim()));
  BatchEmbedding out;
  auto& cache = out.cache;
  cache.input = x;
  cache.pre_activations.reserve(params.layers.size());
  Eigen::MatrixXd act = x;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& l = params.layers[i];
    Eigen::MatrixXd pre = act * l.weight.transpose();
    pre.rowwise() += l.bias.transpose();
    const bool last = i + 1 == params.layers.size();
    act = last ? pre : Eigen::MatrixXd(pre.cwiseMax(0.0));
    cache.pre_activations.push_back(std::move(pre));
  }
  cache.raw_output = act;
  cache.norms = act.rowwise().norm();
  for (Eigen::Index r = 0; r < cache.norms.size(); ++r) {
    if (cache.norms[r] == 0.0 && mode == NormMode::Strict)
      throw ZeroNormError("forward: raw encoder output is exactly zero");
    cache.norms[r] = std::max(cache.norms[r], kNormEpsilon);
  }
  out.embeddings = act.array().colwise() / cache.norms.array();
  return out;
}

SingleEmbedding forward(const EncoderParams& params, const Eigen::VectorXd& x, NormMode mode) {
  auto b = forward_batch(params, x.transpose(), mode);
  return {b.embeddings.row(0).transpose(), std::move(b.cache)};
}

Eigen::MatrixXd embed(const EncoderParams& params, const Eigen::MatrixXd& x) {
  return forward_batch(params, x).embeddings;
}

EncoderGradients backward_batch(const EncoderParams& params, const ForwardCache& cache,
                                const Eigen::MatrixXd& grad_embeddings) {
  const Eigen::Index n = cache.raw_output.rows();
  if (cache.pre_activations.size() != params.layers.size() || grad_embeddings.rows() != n ||
      grad_embeddings.cols() != cache.raw_output.cols() || cache.raw_output.cols() != params.embedding_dim())
    throw ShapeError("backward: cache or gradient shape does not match the encoder");

  // d/dz of z/|z| is (I - u u^T)/|z|. When the guard clamped |z| the
  // denominator is a constant and the Jacobian is I/eps.
  Eigen::MatrixXd delta(n, grad_embeddings.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const double raw_norm = cache.raw_output.row(r).norm();
    const double norm = cache.norms[r];
    if (raw_norm < kNormEpsilon) {
      delta.row(r) = grad_embeddings.row(r) / norm;
      continue;
    }
    const Eigen::RowVectorXd u = cache.raw_output.row(r) / norm;
    const double along = grad_embeddings.row(r).dot(u);
    delta.row(r) = (grad_embeddings.row(r) - along * u) / norm;
  }

  EncoderGradients g;
  g.params = params.zeros_like();
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    if (i + 1 < params.layers.size())
      delta = delta.cwiseProduct((cache.pre_activations[i].array() > 0.0).cast<double>().matrix());
    const Eigen::MatrixXd& layer_input =
        i == 0 ? cache.input : Eigen::MatrixXd(cache.pre_activations[i - 1].cwiseMax(0.0));
    g.params.layers[i].weight = delta.transpose() * layer_input;
    g.params.layers[i].bias = delta.colwise().sum().transpose();
    delta = delta * params.layers[i].weight;
  }
  g.input = std::move(delta);
  return g;
}

EncoderGradients backward(const EncoderParams& params, const ForwardCache& cache,
                          const Eigen::VectorXd& grad_embedding) {
  return backward_batch(params, cache, grad_embedding.transpose());
}

// ---------------------------------------------------------------------------

AdamState make_adam(std::span<const ParamView> params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const auto& p : params) {
    s.first_moment.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
    s.second_moment.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
  }
  return s;
}

void adam_step(std::span<const ParamView> params, std::span<const GradView> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size())
    throw ShapeError("adam: tensor count mismatch");
  for (std::size_t t = 0; t < params.size(); ++t)
    if (params[t].size() != grads[t].size() ||
        params[t].size() != static_cast<std::size_t>(state.first_moment[t].size()))
      throw ShapeError("adam: tensor " + std::to_string(t) + " size mismatch");

  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& m = state.first_moment[t];
    auto& v = state.second_moment[t];
    for (std::size_t i = 0; i < params[t].size(); ++i) {
      const auto k = static_cast<Eigen::Index>(i);
      const double g = grads[t][i];
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      params[t][i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  }
}

std::vector<ParamView> parameter_views(EncoderParams& params) {
  std::vector<ParamView> v;
  for (auto& l : params.layers) {
    v.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    v.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return v;
}

std::vector<GradView> gradient_views(const EncoderParams& grads) {
  std::vector<GradView> v;
  for (const auto& l : grads.layers) {
    v.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    v.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return v;
}

}  // namespace stabpa
