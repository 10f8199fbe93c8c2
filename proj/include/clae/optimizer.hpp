#pragma once

#include <span>
#include <string>

#include "clae/errors.hpp"

namespace clae {

enum class OptimizerKind { sgd, sgd_momentum };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "sgd_momentum"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

// sgd:          p <- p - lr * (g + wd * p)
// sgd_momentum: v <- m * v + g + wd * p;  p <- p - lr * v
inline void optimizer_step(std::span<double> params, std::span<const double> grads,
                           std::span<double> velocity, const OptimizerConfig& cfg) {
  require(params.size() == grads.size(), "optimizer_step: gradient length mismatch");
  if (cfg.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= cfg.learning_rate * (grads[i] + cfg.weight_decay * params[i]);
    return;
  }
  require(velocity.size() == params.size(), "optimizer_step: velocity length mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + grads[i] + cfg.weight_decay * params[i];
    params[i] -= cfg.learning_rate * velocity[i];
  }
}

}  // namespace clae
