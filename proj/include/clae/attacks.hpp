#pragma once

// Adversarial augmentations for contrastive learning.
//
// craft_adversarial() perturbs the q-views of a batch so that the contrastive
// loss, with anchors fixed at the clean q-view embeddings and classifier rows
// w_k = f(x_k^q + delta_k) / tau, increases. Every delta_k enters the
// softmax denominator of every anchor, so the gradient on one image depends
// on the whole batch. Gradients are taken with eval-mode statistics of the
// clean BN branch, so crafting never touches encoder state.
//
// Budgets are L-infinity: |delta| <= epsilon elementwise, and perturbed pixels
// are clipped to [clip_min, clip_max].

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "clae/contrastive.hpp"
#include "clae/encoder.hpp"
#include "clae/errors.hpp"
#include "clae/rng.hpp"

namespace clae {

enum class AttackMethod { fgsm, r_fgsm, f_fgsm, pgd, random };

inline const char* to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::fgsm: return "fgsm";
    case AttackMethod::r_fgsm: return "r_fgsm";
    case AttackMethod::f_fgsm: return "f_fgsm";
    case AttackMethod::pgd: return "pgd";
    case AttackMethod::random: return "random";
  }
  return "?";
}

inline AttackMethod parse_attack_method(const std::string& name) {
  for (AttackMethod m : {AttackMethod::fgsm, AttackMethod::r_fgsm, AttackMethod::f_fgsm,
                         AttackMethod::pgd, AttackMethod::random})
    if (name == to_string(m)) return m;
  throw ContractViolation("unknown attack method '" + name + "'");
}

struct AttackConfig {
  AttackMethod method = AttackMethod::fgsm;
  double epsilon = 0.03;
  std::size_t steps = 1;
  // 0 selects the method default: epsilon for fgsm, 1.25 epsilon for
  // f_fgsm, epsilon / steps * 2.5 (epsilon when steps == 1) for pgd.
  double step_size = 0.0;
  bool random_init = false;
  double clip_min = 0.0;
  double clip_max = 1.0;

  void validate() const {
    require(epsilon >= 0.0, "attack.epsilon must be >= 0");
    require(steps >= 1, "attack.steps must be >= 1");
    require(step_size >= 0.0, "attack.step_size must be >= 0");
    require(clip_min < clip_max, "attack.clip_min must be < attack.clip_max");
  }

  double effective_step_size() const {
    if (step_size > 0.0) return step_size;
    switch (method) {
      case AttackMethod::f_fgsm: return 1.25 * epsilon;
      case AttackMethod::pgd: return steps == 1 ? epsilon : 2.5 * epsilon / static_cast<double>(steps);
      case AttackMethod::r_fgsm: return 0.5 * epsilon;
      default: return epsilon;
    }
  }
};

struct AdversarialBatch {
  Tensor images_r;
  Tensor delta;
  double loss_before = 0.0;
  double loss_after = 0.0;
};

struct PerturbationReport {
  double linf_norm = 0.0;
  double l2_norm = 0.0;  // mean per-image L2 norm
  double loss_delta = 0.0;
};

inline PerturbationReport perturbation_report(const AdversarialBatch& adv) {
  PerturbationReport r;
  const Tensor& d = adv.delta;
  const std::size_t rows = d.rank() == 2 ? d.rows() : 1;
  const std::size_t width = d.size() / rows;
  for (std::size_t i = 0; i < rows; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double v = d[i * width + j];
      r.linf_norm = std::max(r.linf_norm, std::abs(v));
      sq += v * v;
    }
    r.l2_norm += std::sqrt(sq);
  }
  r.l2_norm /= static_cast<double>(rows);
  r.loss_delta = adv.loss_after - adv.loss_before;
  return r;
}

namespace detail {

inline double sign_of(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

// Keeps x + d inside [lo, hi] and |d| <= eps.
inline double fit_to_range(double x, double d, double eps, double lo, double hi) {
  const double v = x + d;
  if (v > hi) return std::clamp(hi - x, -eps, eps);
  if (v < lo) return std::clamp(lo - x, -eps, eps);
  return d;
}

// delta <- project(delta + step * sign(grad)) onto the eps-ball and the pixel range.
inline void sign_step(std::span<const double> x, std::span<double> delta,
                      std::span<const double> grad, double step, double eps, double lo,
                      double hi) {
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double d = std::clamp(delta[j] + step * sign_of(grad[j]), -eps, eps);
    delta[j] = fit_to_range(x[j], d, eps, lo, hi);
  }
}

inline Tensor apply_delta(const Tensor& x, const Tensor& delta, double lo, double hi) {
  Tensor out(x.shape());
  for (std::size_t j = 0; j < x.size(); ++j) out[j] = std::clamp(x[j] + delta[j], lo, hi);
  return out;
}

}  // namespace detail

// Anchor representation used by the attack objective: eval-mode clean-branch
// embeddings, projected when the loss is the simclr variant.
inline Tensor attack_anchors(const Tensor& batch_q, const EncoderState& encoder,
                             const LossConfig& loss) {
  Tape tape;
  const EncoderVars vars = bind_parameters(tape, encoder, false);
  Var z = encode(tape, tape.constant(batch_q), encoder, vars, Branch::clean);
  if (loss.variant == LossVariant::simclr) z = project(z, encoder, vars);
  return Tensor(z.value());
}

// Contrastive objective of `images` (the classifier-weight side) against
// fixed anchors.
inline Var attack_objective(Tape& tape, Var anchors, Var images, const EncoderState& encoder,
                            const EncoderVars& vars, const LossConfig& loss) {
  Var z = encode(tape, images, encoder, vars, Branch::clean);
  if (loss.variant == LossVariant::simclr) {
    return simclr_loss(anchors, project(z, encoder, vars), loss.tau);
  }
  return ce_reformulation(anchors, reformulated_weights(z, loss.tau, WeightSource::adversarial));
}

namespace detail {

// Objective at delta = 0, where the anchors are the detached embeddings of
// the very same images; one forward pass serves both. Returns the anchors.
inline Tensor objective_at_origin(const Tensor& images, const EncoderState& encoder,
                                  const LossConfig& loss, Tensor& gradient, double& value) {
  Tape tape;
  const EncoderVars vars = bind_parameters(tape, encoder, false);
  Var x = tape.leaf(images, true);
  Var z = encode(tape, x, encoder, vars, Branch::clean);
  if (loss.variant == LossVariant::simclr) z = project(z, encoder, vars);
  Var anchors = detach(z);
  Var objective = loss.variant == LossVariant::simclr
                      ? simclr_loss(anchors, z, loss.tau)
                      : ce_reformulation(anchors, reformulated_weights(z, loss.tau,
                                                                       WeightSource::adversarial));
  tape.backward(objective);
  gradient = tape.gradient(x);
  value = objective.value().item();
  return Tensor(anchors.value());
}

}  // namespace detail

// Objective value and its gradient w.r.t. `images`.
inline double attack_gradient(const Tensor& images, const Tensor& anchors,
                              const EncoderState& encoder, const LossConfig& loss,
                              Tensor* gradient) {
  Tape tape;
  const EncoderVars vars = bind_parameters(tape, encoder, false);
  Var x = tape.leaf(images, gradient != nullptr);
  Var objective = attack_objective(tape, tape.constant(anchors), x, encoder, vars, loss);
  if (gradient != nullptr) {
    tape.backward(objective);
    *gradient = tape.gradient(x);
  }
  return objective.value().item();
}

// With `measure` false the loss before and after the attack is only
// reported when it comes for free; otherwise those fields are NaN.
inline AdversarialBatch craft_adversarial(const Tensor& batch_q, const EncoderState& encoder,
                                          const LossConfig& loss, const AttackConfig& cfg,
                                          Rng& rng, bool measure = true) {
  cfg.validate();
  loss.validate();
  detail::check_rank2(batch_q, "craft_adversarial");
  require(batch_q.rows() >= 2, "craft_adversarial: needs a batch of at least 2");
  const double eps = cfg.epsilon, lo = cfg.clip_min, hi = cfg.clip_max;
  constexpr double kUnmeasured = std::numeric_limits<double>::quiet_NaN();

  AdversarialBatch out;
  out.delta = Tensor(batch_q.shape(), 0.0);
  out.loss_before = out.loss_after = kUnmeasured;
  const bool starts_at_origin =
      cfg.method == AttackMethod::fgsm || (cfg.method == AttackMethod::pgd && !cfg.random_init);
  Tensor anchors, grad;
  if (eps > 0.0 && starts_at_origin) {
    anchors = detail::objective_at_origin(batch_q, encoder, loss, grad, out.loss_before);
  } else {
    anchors = attack_anchors(batch_q, encoder, loss);
    if (measure || eps == 0.0)
      out.loss_before = attack_gradient(batch_q, anchors, encoder, loss, nullptr);
  }
  if (eps == 0.0) {
    out.images_r = Tensor(batch_q.shape(), batch_q.values());
    out.loss_after = out.loss_before;
    return out;
  }

  std::span<double> delta = out.delta.data();
  std::span<const double> x = batch_q.data();
  auto random_start = [&](double radius) {
    for (std::size_t j = 0; j < delta.size(); ++j)
      delta[j] = detail::fit_to_range(x[j], rng.uniform(-radius, radius), eps, lo, hi);
  };
  auto gradient_at = [&](Tensor& g) {
    const Tensor probe = detail::apply_delta(batch_q, out.delta, lo, hi);
    attack_gradient(probe, anchors, encoder, loss, &g);
  };

  const double step = cfg.effective_step_size();
  switch (cfg.method) {
    case AttackMethod::fgsm:
      detail::sign_step(x, delta, grad.data(), eps, eps, lo, hi);
      break;
    case AttackMethod::r_fgsm:
      random_start(0.5 * eps);
      gradient_at(grad);
      detail::sign_step(x, delta, grad.data(), 0.5 * eps, eps, lo, hi);
      break;
    case AttackMethod::f_fgsm:
      random_start(eps);
      gradient_at(grad);
      detail::sign_step(x, delta, grad.data(), step, eps, lo, hi);
      break;
    case AttackMethod::pgd:
      if (cfg.random_init) {
        random_start(eps);
        gradient_at(grad);
      }
      for (std::size_t s = 0; s < cfg.steps; ++s) {
        if (s > 0) gradient_at(grad);
        detail::sign_step(x, delta, grad.data(), step, eps, lo, hi);
      }
      break;
    case AttackMethod::random:
      for (std::size_t j = 0; j < delta.size(); ++j)
        delta[j] = detail::fit_to_range(x[j], rng.bernoulli(0.5) ? eps : -eps, eps, lo, hi);
      break;
  }

  out.images_r = detail::apply_delta(batch_q, out.delta, lo, hi);
  if (measure) out.loss_after = attack_gradient(out.images_r, anchors, encoder, loss, nullptr);
  return out;
}

// Logits of a supervised classifier as a differentiable function of its input.
using LogitsFn = std::function<Var(Tape&, Var images)>;

// Softmax regression on top of a frozen encoder: logits = f(x) W^T with
// `weights` of shape {classes, embed_dim}.
inline LogitsFn softmax_classifier(const EncoderState& encoder, const Tensor& weights) {
  return [&encoder, &weights](Tape& tape, Var images) {
    const EncoderVars vars = bind_parameters(tape, encoder, false);
    Var z = encode(tape, images, encoder, vars, Branch::clean, Mode::eval);
    return matmul(z, transpose(tape.constant(weights)));
  };
}

// Untargeted supervised FGSM: x_adv = clip(x + eps * sign(grad_x L_ce(x, y))).
inline AdversarialBatch fgsm_supervised(const Tensor& x, std::span<const int> labels,
                                        const LogitsFn& logits_fn, const AttackConfig& cfg) {
  cfg.validate();
  require(cfg.method == AttackMethod::fgsm, "fgsm_supervised: method must be fgsm");
  detail::check_rank2(x, "fgsm_supervised");
  require(labels.size() == x.rows(), "fgsm_supervised: one label per row required");

  auto loss_at = [&](const Tensor& images, Tensor* grad) {
    Tape tape;
    Var input = tape.leaf(images, grad != nullptr);
    Var logits = logits_fn(tape, input);
    const std::size_t classes = logits.value().cols();
    Tensor targets(logits.shape());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < classes,
              "fgsm_supervised: label out of range");
      targets[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    Var loss = detail::mean_cross_entropy(logits, std::move(targets));
    if (grad != nullptr) {
      tape.backward(loss);
      *grad = tape.gradient(input);
    }
    return loss.value().item();
  };

  AdversarialBatch out;
  out.delta = Tensor(x.shape(), 0.0);
  if (cfg.epsilon == 0.0) {
    out.images_r = Tensor(x.shape(), x.values());
    out.loss_before = out.loss_after = loss_at(x, nullptr);
    return out;
  }
  Tensor grad;
  out.loss_before = loss_at(x, &grad);
  detail::sign_step(x.data(), out.delta.data(), grad.data(), cfg.epsilon, cfg.epsilon,
                    cfg.clip_min, cfg.clip_max);
  out.images_r = detail::apply_delta(x, out.delta, cfg.clip_min, cfg.clip_max);
  out.loss_after = loss_at(out.images_r, nullptr);
  return out;
}

}  // namespace clae
