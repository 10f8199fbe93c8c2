#pragma once

// MLP embedding network with dual batch-norm statistics.
//
// Every hidden layer is Linear -> BatchNorm -> ReLU; the last layer is a
// plain Linear followed by row-wise L2 normalization. Each BatchNorm layer
// owns one (gamma, beta) pair and two sets of running statistics, one per
// Branch. Train-mode passes normalize with batch statistics and fold them into
// the selected branch only.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clae/errors.hpp"
#include "clae/ops.hpp"
#include "clae/rng.hpp"
#include "clae/tensor.hpp"

namespace clae {

enum class Branch : int { clean = 0, adversarial = 1 };
enum class Mode { train, eval };

inline const char* to_string(Branch b) { return b == Branch::clean ? "clean" : "adv"; }

struct EncoderConfig {
  std::size_t input_dim = 768;
  std::vector<std::size_t> hidden_dims{512, 256};
  std::size_t embed_dim = 64;
  bool use_projection_head = false;
  std::size_t projection_dim = 64;

  void validate() const {
    require(input_dim >= 1, "encoder.input_dim must be >= 1");
    for (std::size_t h : hidden_dims) require(h >= 1, "encoder.hidden_dims entries must be >= 1");
    require(embed_dim >= 2, "encoder.embed_dim must be >= 2");
    if (use_projection_head) require(projection_dim >= 1, "encoder.projection_dim must be >= 1");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  // Weight of the new batch statistics in the running update.
  double momentum = 0.1;

  friend bool operator==(const BatchNormStats&, const BatchNormStats&) = default;
};

struct BatchNormState {
  Tensor gamma;  // {1, features}
  Tensor beta;   // {1, features}
  std::array<BatchNormStats, 2> branches;
  double eps = 1e-5;

  static BatchNormState init(std::size_t features, double momentum_clean = 0.1,
                             double momentum_adv = 0.01, double eps = 1e-5) {
    BatchNormState s;
    s.gamma = Tensor({1, features}, 1.0);
    s.beta = Tensor({1, features}, 0.0);
    for (auto& b : s.branches) {
      b.running_mean.assign(features, 0.0);
      b.running_var.assign(features, 1.0);
    }
    s.branches[0].momentum = momentum_clean;
    s.branches[1].momentum = momentum_adv;
    s.eps = eps;
    return s;
  }

  std::size_t features() const { return gamma.size(); }
  BatchNormStats& stats(Branch b) { return branches[static_cast<int>(b)]; }
  const BatchNormStats& stats(Branch b) const { return branches[static_cast<int>(b)]; }
};

struct LinearLayer {
  Tensor weight;  // {in, out}
  Tensor bias;    // {1, out}
};

struct EncoderState {
  EncoderConfig config;
  std::uint64_t seed = 0;
  std::vector<LinearLayer> layers;     // hidden layers then the embedding layer
  std::vector<BatchNormState> norms;   // one per hidden layer
  std::optional<LinearLayer> head;

  void set_bn_momenta(double clean, double adversarial) {
    for (auto& n : norms) {
      n.stats(Branch::clean).momentum = clean;
      n.stats(Branch::adversarial).momentum = adversarial;
    }
  }

  // Learnable tensors in a fixed order: layer weights/biases, BN gamma/beta,
  // then the projection head.
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    for (auto& n : norms) {
      out.push_back(&n.gamma);
      out.push_back(&n.beta);
    }
    if (head) {
      out.push_back(&head->weight);
      out.push_back(&head->bias);
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (Tensor* t : const_cast<EncoderState*>(this)->parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) n += t->size();
    return n;
  }
};

namespace detail {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both weight and bias.
inline LinearLayer init_linear(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  LinearLayer layer{Tensor({in, out}), Tensor({1, out})};
  for (double& w : layer.weight.data()) w = rng.uniform(-bound, bound);
  for (double& b : layer.bias.data()) b = rng.uniform(-bound, bound);
  return layer;
}

}  // namespace detail

inline EncoderState init_encoder(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  EncoderState state;
  state.config = config;
  state.seed = seed;
  Rng rng = Rng::stream(seed, "init");
  std::size_t width = config.input_dim;
  for (std::size_t h : config.hidden_dims) {
    state.layers.push_back(detail::init_linear(width, h, rng));
    state.norms.push_back(BatchNormState::init(h));
    width = h;
  }
  state.layers.push_back(detail::init_linear(width, config.embed_dim, rng));
  if (config.use_projection_head)
    state.head = detail::init_linear(config.embed_dim, config.projection_dim, rng);
  return state;
}

// Tape handles for every parameter of an EncoderState.
struct EncoderVars {
  std::vector<Var> weights, biases, gammas, betas;
  Var head_weight, head_bias;
};

inline EncoderVars bind_parameters(Tape& tape, const EncoderState& state, bool trainable) {
  EncoderVars v;
  for (const auto& l : state.layers) {
    v.weights.push_back(tape.leaf(l.weight, trainable));
    v.biases.push_back(tape.leaf(l.bias, trainable));
  }
  for (const auto& n : state.norms) {
    v.gammas.push_back(tape.leaf(n.gamma, trainable));
    v.betas.push_back(tape.leaf(n.beta, trainable));
  }
  if (state.head) {
    v.head_weight = tape.leaf(state.head->weight, trainable);
    v.head_bias = tape.leaf(state.head->bias, trainable);
  }
  return v;
}

// Parameter vars in the same order as EncoderState::parameters().
inline std::vector<Var> parameter_vars(const EncoderVars& v) {
  std::vector<Var> out;
  for (std::size_t i = 0; i < v.weights.size(); ++i) {
    out.push_back(v.weights[i]);
    out.push_back(v.biases[i]);
  }
  for (std::size_t i = 0; i < v.gammas.size(); ++i) {
    out.push_back(v.gammas[i]);
    out.push_back(v.betas[i]);
  }
  if (v.head_weight.valid()) {
    out.push_back(v.head_weight);
    out.push_back(v.head_bias);
  }
  return out;
}

// Batch normalization of a {batch, features} input.
//
// Train mode normalizes by the (biased) batch statistics; when `update` is
// non-null those statistics are folded into it as
// running <- (1 - momentum) * running + momentum * batch.
// Eval mode normalizes by `stats` and never writes.
inline Var bn_forward(Tape& tape, Var x, Var gamma, Var beta, const BatchNormStats& stats,
                      double eps, Mode mode, BatchNormStats* update = nullptr) {
  const Tensor& xv = x.value();
  detail::check_rank2(xv, "bn_forward");
  const std::size_t batch = xv.rows(), features = xv.cols();
  require(features == gamma.value().size() && features == stats.running_mean.size(),
          "bn_forward: feature count mismatch");
  if (mode == Mode::eval) {
    Tensor shift({1, features}), inv({1, features});
    for (std::size_t j = 0; j < features; ++j) {
      shift[j] = stats.running_mean[j];
      inv[j] = 1.0 / std::sqrt(stats.running_var[j] + eps);
    }
    Var normalized = mul(sub(x, tape.constant(std::move(shift))), tape.constant(std::move(inv)));
    return add(mul(normalized, gamma), beta);
  }
  require(batch >= 2, "bn_forward: train mode needs a batch of at least 2");
  Var mu = mean(x, 0);
  Var centered = sub(x, mu);
  Var var = mean(mul(centered, centered), 0);
  Var normalized = div(centered, sqrt(add_scalar(var, eps)));
  if (update != nullptr) {
    const double m = update->momentum;
    for (std::size_t j = 0; j < features; ++j) {
      update->running_mean[j] = (1.0 - m) * update->running_mean[j] + m * mu.value()[j];
      update->running_var[j] = (1.0 - m) * update->running_var[j] + m * var.value()[j];
    }
  }
  return add(mul(normalized, gamma), beta);
}

// Convenience overload selecting the branch of a BatchNormState.
inline Var bn_forward(Tape& tape, Var x, Var gamma, Var beta, BatchNormState& state, Branch branch,
                      Mode mode, bool update_running = true) {
  BatchNormStats& stats = state.stats(branch);
  return bn_forward(tape, x, gamma, beta, stats, state.eps, mode,
                    mode == Mode::train && update_running ? &stats : nullptr);
}

namespace detail {

inline Var encode_impl(Tape& tape, Var images, const EncoderState& state, const EncoderVars& vars,
                       Branch branch, Mode mode, EncoderState* writable) {
  const Tensor& iv = images.value();
  check_rank2(iv, "encode");
  require(iv.cols() == state.config.input_dim,
          "encode: input width " + std::to_string(iv.cols()) + " does not match input_dim " +
              std::to_string(state.config.input_dim));
  Var h = images;
  const std::size_t hidden = state.norms.size();
  for (std::size_t i = 0; i < hidden; ++i) {
    h = add(matmul(h, vars.weights[i]), vars.biases[i]);
    const BatchNormState& bn = state.norms[i];
    BatchNormStats* update =
        writable != nullptr ? &writable->norms[i].stats(branch) : nullptr;
    h = bn_forward(tape, h, vars.gammas[i], vars.betas[i], bn.stats(branch), bn.eps, mode, update);
    h = relu(h);
  }
  h = add(matmul(h, vars.weights[hidden]), vars.biases[hidden]);
  return l2_normalize(h);
}

}  // namespace detail

// Unit-norm embeddings of a {batch, input_dim} input. Train mode updates the
// chosen branch's running statistics when `update_running` is set.
inline Var encode(Tape& tape, Var images, EncoderState& state, const EncoderVars& vars,
                  Branch branch, Mode mode, bool update_running = true) {
  return detail::encode_impl(tape, images, state, vars, branch, mode,
                             mode == Mode::train && update_running ? &state : nullptr);
}

// Read-only pass; train mode here uses batch statistics without recording them.
inline Var encode(Tape& tape, Var images, const EncoderState& state, const EncoderVars& vars,
                  Branch branch, Mode mode = Mode::eval) {
  return detail::encode_impl(tape, images, state, vars, branch, mode, nullptr);
}

// Gradient-free eval-mode embeddings.
inline Tensor encode(const Tensor& images, const EncoderState& state,
                     Branch branch = Branch::clean) {
  Tape tape;
  const EncoderVars vars = bind_parameters(tape, state, false);
  return Tensor(encode(tape, tape.constant(images), state, vars, branch, Mode::eval).value());
}

// Projection head used only inside the pretext loss; output rows unit-norm.
inline Var project(Var embeddings, const EncoderState& state, const EncoderVars& vars) {
  require(state.config.use_projection_head && state.head.has_value() && vars.head_weight.valid(),
          "project: encoder has no projection head");
  return l2_normalize(add(matmul(embeddings, vars.head_weight), vars.head_bias));
}

}  // namespace clae
