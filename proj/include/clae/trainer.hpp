#pragma once

// Contrastive pretraining with adversarial augmentations.
//
// One step on a batch X:
//   1. x^p = AUG(X), x^q = AUG(X)
//   2. x^r = craft_adversarial(x^q)                      (no gradient to theta)
//   3. L_aug = CE(z^q; W^p = z^p / tau)                  clean BN branch
//      L_adv = CE(z^q; W^* = f_adv(x^r) / tau)           x^r via adversarial branch
//   4. one optimizer step on L_aug + alpha * L_adv
//
// Random draws come from named streams (augment, attack, shuffle) derived
// from one seed, so switching the attack off leaves augmentation and
// shuffling untouched.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "clae/attacks.hpp"
#include "clae/contrastive.hpp"
#include "clae/data.hpp"
#include "clae/encoder.hpp"
#include "clae/errors.hpp"
#include "clae/optimizer.hpp"
#include "clae/rng.hpp"

namespace clae {

struct TrainConfig {
  double alpha = 1.0;
  AttackConfig attack;
  LossConfig loss;
  AugmentPolicy augment;
  std::size_t batch_size = 256;
  std::size_t epochs = 10;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  // 0 selects 0.03 * batch_size / 256.
  double learning_rate = 0.0;
  double momentum_coef = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  double bn_momentum_clean = 0.1;
  double bn_momentum_adv = 0.01;
  // false trains the plain contrastive baseline (no crafting, no L_adv).
  bool attack_enabled = true;
  // Route the adversarial pass through the clean BN branch.
  bool share_bn_branches = false;
  // false keeps adversarial-branch running statistics frozen.
  bool update_adv_bn_stats = true;
  // Embed the L_adv anchors x^q through the adversarial branch as well.
  bool adv_anchors_on_adv_branch = false;

  double effective_learning_rate() const {
    return learning_rate > 0.0 ? learning_rate : 0.03 * static_cast<double>(batch_size) / 256.0;
  }

  OptimizerConfig optimizer_config() const {
    return OptimizerConfig{optimizer, effective_learning_rate(), momentum_coef, weight_decay};
  }

  void validate() const {
    require(alpha >= 0.0, "train.alpha must be >= 0");
    require(batch_size >= 2, "train.batch_size must be >= 2");
    require(learning_rate >= 0.0, "train.learning_rate must be > 0 (or 0 for the default)");
    require(weight_decay >= 0.0, "train.weight_decay must be >= 0");
    require(bn_momentum_clean >= 0.0 && bn_momentum_clean <= 1.0,
            "train.bn_momentum_clean must be in [0,1]");
    require(bn_momentum_adv >= 0.0 && bn_momentum_adv <= 1.0,
            "train.bn_momentum_adv must be in [0,1]");
    attack.validate();
    loss.validate();
    augment.validate();
  }
};

struct StepLosses {
  double l_aug = 0.0;
  double l_adv = 0.0;
  double l_total = 0.0;
  double linf = 0.0;
};

struct TrainState {
  EncoderState encoder;
  std::vector<std::vector<double>> velocity;  // one slot per parameter tensor
  std::size_t step = 0;
  std::size_t epoch = 0;
  Rng augment_rng;
  Rng attack_rng;
  Rng shuffle_rng;
  std::vector<StepLosses> history;
};

inline TrainState init_train_state(const EncoderConfig& encoder_cfg, const TrainConfig& cfg) {
  cfg.validate();
  TrainState state;
  state.encoder = init_encoder(encoder_cfg, cfg.seed);
  state.encoder.set_bn_momenta(cfg.bn_momentum_clean, cfg.bn_momentum_adv);
  for (const Tensor* p : state.encoder.parameters()) state.velocity.emplace_back(p->size(), 0.0);
  state.augment_rng = Rng::stream(cfg.seed, "augment");
  state.attack_rng = Rng::stream(cfg.seed, "attack");
  state.shuffle_rng = Rng::stream(cfg.seed, "shuffle");
  return state;
}

inline StepLosses train_step(const Tensor& batch, const ImageShape& shape, TrainState& state,
                             const TrainConfig& cfg) {
  detail::check_rank2(batch, "train_step");
  require(batch.rows() >= 2, "train_step: needs a batch of at least 2");
  require(cfg.loss.variant != LossVariant::simclr || state.encoder.head.has_value(),
          "train_step: simclr loss needs an encoder with a projection head");

  const Tensor xp = augment_batch(batch, shape, cfg.augment, state.augment_rng);
  const Tensor xq = augment_batch(batch, shape, cfg.augment, state.augment_rng);

  AdversarialBatch adv;
  if (cfg.attack_enabled)
    adv = craft_adversarial(xq, state.encoder, cfg.loss, cfg.attack, state.attack_rng, false);

  StepLosses out;
  try {
    EncoderState& enc = state.encoder;
    Tape tape;
    const EncoderVars vars = bind_parameters(tape, enc, true);
    const bool simclr = cfg.loss.variant == LossVariant::simclr;
    const double tau = cfg.loss.tau;

    Var zp = encode(tape, tape.constant(xp), enc, vars, Branch::clean, Mode::train);
    Var zq = encode(tape, tape.constant(xq), enc, vars, Branch::clean, Mode::train);
    Var l_aug = simclr ? simclr_loss(project(zp, enc, vars), project(zq, enc, vars), tau)
                       : ce_reformulation(zq, reformulated_weights(zp, tau));
    Var total = l_aug;
    double l_adv_value = 0.0;
    if (cfg.attack_enabled) {
      const Branch adv_branch = cfg.share_bn_branches ? Branch::clean : Branch::adversarial;
      const bool update = adv_branch == Branch::clean || cfg.update_adv_bn_stats;
      Var zr = encode(tape, tape.constant(adv.images_r), enc, vars, adv_branch, Mode::train, update);
      Var anchors = cfg.adv_anchors_on_adv_branch
                        ? encode(tape, tape.constant(xq), enc, vars, adv_branch, Mode::train, update)
                        : zq;
      Var l_adv = simclr ? simclr_loss(project(anchors, enc, vars), project(zr, enc, vars), tau)
                         : ce_reformulation(anchors, reformulated_weights(zr, tau,
                                                                          WeightSource::adversarial));
      l_adv_value = l_adv.value().item();
      total = add(l_aug, scale(l_adv, cfg.alpha));
    }
    out.l_aug = l_aug.value().item();
    out.l_adv = l_adv_value;
    out.l_total = total.value().item();
    if (!std::isfinite(out.l_total)) throw NumericDomainError("non-finite total loss");

    tape.backward(total);
    const std::vector<Var> params = parameter_vars(vars);
    std::vector<Tensor*> targets = enc.parameters();
    const OptimizerConfig opt = cfg.optimizer_config();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor g = tape.gradient(params[i]);
      optimizer_step(targets[i]->data(), g.data(), state.velocity[i], opt);
    }
  } catch (const NumericDomainError& e) {
    std::ostringstream os;
    os << "train step " << state.step << " (epoch " << state.epoch << "): " << e.what()
       << "; L_aug=" << out.l_aug << " L_adv=" << out.l_adv;
    throw NumericDomainError(os.str());
  }

  out.linf = cfg.attack_enabled ? perturbation_report(adv).linf_norm : 0.0;
  state.history.push_back(out);
  ++state.step;
  return out;
}

struct MetricEvent {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string name;
  double value = 0.0;
};

using MetricsSink = std::function<void(const MetricEvent&)>;

// epochs x ceil(N / B) steps, reshuffled every epoch. A trailing batch with a
// single image is skipped (train-mode BN needs two samples).
inline TrainState pretrain(const Dataset& data, const EncoderConfig& encoder_cfg,
                           const TrainConfig& cfg, const MetricsSink& sink = {}) {
  require(data.size() > 0, "pretrain: empty dataset");
  require(data.shape.size() == encoder_cfg.input_dim,
          "pretrain: image size " + std::to_string(data.shape.size()) +
              " does not match encoder input_dim " + std::to_string(encoder_cfg.input_dim));
  TrainState state = init_train_state(encoder_cfg, cfg);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto emit = [&](const std::string& name, double value) {
    if (sink) sink(MetricEvent{state.step, state.epoch, name, value});
  };

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    state.epoch = e;
    state.shuffle_rng.shuffle(order);
    double sum_aug = 0.0, sum_adv = 0.0, sum_total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) continue;
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const StepLosses l = train_step(data.gather(idx), data.shape, state, cfg);
      // step counter already advanced; report the index of the step just taken
      if (sink) {
        const std::size_t s = state.step - 1;
        sink(MetricEvent{s, e, "L_aug", l.l_aug});
        sink(MetricEvent{s, e, "L_adv", l.l_adv});
        sink(MetricEvent{s, e, "L_total", l.l_total});
        sink(MetricEvent{s, e, "linf_delta", l.linf});
      }
      sum_aug += l.l_aug;
      sum_adv += l.l_adv;
      sum_total += l.l_total;
      ++steps;
    }
    if (steps > 0) {
      emit("epoch_mean_L_aug", sum_aug / steps);
      emit("epoch_mean_L_adv", sum_adv / steps);
      emit("epoch_mean_L_total", sum_total / steps);
    }
  }
  return state;
}

}  // namespace clae
