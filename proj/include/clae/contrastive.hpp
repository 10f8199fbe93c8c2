#pragma once

// Batch contrastive losses.
//
// plain:  anchors z_i^q, candidates z_k^p; the loss of anchor i is
//         -log softmax_k(z_k^p . z_i^q / tau)[i], the k = i term included in
//         the denominator. Averaged over the batch.
// ce_reformulation: the same quantity read as softmax cross entropy of
//         anchor i against class i with classifier rows w_k.
// simclr: symmetric NT-Xent over the 2B views, self-similarity excluded.

#include <string>

#include "clae/errors.hpp"
#include "clae/ops.hpp"

namespace clae {

enum class LossVariant { plain, simclr };

inline const char* to_string(LossVariant v) { return v == LossVariant::plain ? "plain" : "simclr"; }

struct LossConfig {
  LossVariant variant = LossVariant::plain;
  double tau = 0.1;

  static LossConfig defaults_for(LossVariant v) {
    return LossConfig{v, v == LossVariant::plain ? 0.1 : 0.5};
  }

  void validate() const { require(tau > 0.0, "loss.tau must be > 0"); }
};

enum class WeightSource { augmentation, adversarial };

// Classifier rows w_k = z_k / tau built from one view of the batch.
struct ReformulatedWeights {
  Var weights;
  WeightSource source = WeightSource::augmentation;
};

inline ReformulatedWeights reformulated_weights(Var embeddings, double tau,
                                                WeightSource source = WeightSource::augmentation) {
  require(tau > 0.0, "reformulated_weights: tau must be > 0");
  return ReformulatedWeights{scale(embeddings, 1.0 / tau), source};
}

namespace detail {

// mean_i (logsumexp_k logits[i, k] - logits[i, target_i]) with targets
// selected by a constant 0/1 matrix.
inline Var mean_cross_entropy(Var logits, Tensor targets,
                              const std::optional<Tensor>& mask = std::nullopt) {
  Tape& tape = *logits.tape();
  Var picked = sum(mul(logits, tape.constant(std::move(targets))), 1);
  return mean(sub(logsumexp(logits, mask), picked));
}

inline void check_pair(const Var& a, const Var& b, const char* op) {
  check_rank2(a.value(), op);
  check_rank2(b.value(), op);
  require(a.shape() == b.shape(), std::string(op) + ": embedding shapes differ, " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

}  // namespace detail

inline Var contrastive_loss(Var zp, Var zq, double tau) {
  detail::check_pair(zp, zq, "contrastive_loss");
  require(tau > 0.0, "contrastive_loss: tau must be > 0");
  const std::size_t batch = zp.value().rows();
  Var logits = scale(matmul(zq, transpose(zp)), 1.0 / tau);
  return detail::mean_cross_entropy(logits, identity_matrix(batch));
}

inline Var ce_reformulation(Var zq, const ReformulatedWeights& w) {
  detail::check_rank2(zq.value(), "ce_reformulation");
  detail::check_rank2(w.weights.value(), "ce_reformulation");
  const std::size_t batch = zq.value().rows();
  require(w.weights.value().rows() == batch,
          "ce_reformulation: weight rows " + std::to_string(w.weights.value().rows()) +
              " do not match batch size " + std::to_string(batch));
  require(w.weights.value().cols() == zq.value().cols(),
          "ce_reformulation: embedding width mismatch");
  Var logits = matmul(zq, transpose(w.weights));
  return detail::mean_cross_entropy(logits, identity_matrix(batch));
}

inline Var simclr_loss(Var z1, Var z2, double tau) {
  detail::check_pair(z1, z2, "simclr_loss");
  require(tau > 0.0, "simclr_loss: tau must be > 0");
  const std::size_t batch = z1.value().rows();
  require(batch >= 2, "simclr_loss: needs a batch of at least 2");
  const std::size_t n = 2 * batch;
  Var views = concat_rows(z1, z2);
  Var logits = scale(matmul(views, transpose(views)), 1.0 / tau);
  Tensor positives({n, n});
  Tensor mask({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    positives[i * n + (i + batch) % n] = 1.0;
    mask[i * n + i] = 0.0;
  }
  return detail::mean_cross_entropy(logits, std::move(positives), mask);
}

}  // namespace clae
