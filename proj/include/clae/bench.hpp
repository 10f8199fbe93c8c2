#pragma once

// Attack comparison on fixed batches: for each (method, epsilon) the same
// consecutive batches of a dataset are perturbed and the contrastive loss is
// measured before and after.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "clae/attacks.hpp"
#include "clae/data.hpp"
#include "clae/encoder.hpp"

namespace clae {

struct BenchConfig {
  std::vector<AttackMethod> methods{AttackMethod::fgsm, AttackMethod::random};
  std::vector<double> epsilons{0.03};
  std::size_t batches = 10;
  std::size_t batch_size = 64;
  std::size_t pgd_steps = 1;
  std::uint64_t seed = 0;
  LossConfig loss;
};

struct BenchRow {
  AttackMethod method = AttackMethod::fgsm;
  double epsilon = 0.0;
  std::vector<double> loss_before;  // one entry per batch
  std::vector<double> loss_after;
  double mean_before = 0.0;
  double mean_after = 0.0;
  double mean_delta = 0.0;
  double max_linf = 0.0;
  double mean_l2 = 0.0;
};

inline std::vector<Tensor> bench_batches(const Dataset& data, std::size_t batches,
                                         std::size_t batch_size) {
  require(batch_size >= 2, "attack bench: batch_size must be >= 2");
  require(batches >= 1, "attack bench: needs at least one batch");
  require(batches * batch_size <= data.size(),
          "attack bench: " + std::to_string(batches) + " batches of " + std::to_string(batch_size) +
              " exceed the " + std::to_string(data.size()) + " available images");
  std::vector<Tensor> out;
  std::vector<std::size_t> idx(batch_size);
  for (std::size_t b = 0; b < batches; ++b) {
    std::iota(idx.begin(), idx.end(), b * batch_size);
    out.push_back(data.gather(idx));
  }
  return out;
}

inline BenchRow bench_attack(const std::vector<Tensor>& batches, const EncoderState& encoder,
                             const LossConfig& loss, const AttackConfig& attack,
                             std::uint64_t seed) {
  BenchRow row;
  row.method = attack.method;
  row.epsilon = attack.epsilon;
  Rng rng = Rng::stream(seed, "attack");
  double l2 = 0.0;
  for (const Tensor& batch : batches) {
    const AdversarialBatch adv = craft_adversarial(batch, encoder, loss, attack, rng);
    const PerturbationReport rep = perturbation_report(adv);
    row.loss_before.push_back(adv.loss_before);
    row.loss_after.push_back(adv.loss_after);
    row.max_linf = std::max(row.max_linf, rep.linf_norm);
    l2 += rep.l2_norm;
  }
  const double n = static_cast<double>(batches.size());
  row.mean_before = std::accumulate(row.loss_before.begin(), row.loss_before.end(), 0.0) / n;
  row.mean_after = std::accumulate(row.loss_after.begin(), row.loss_after.end(), 0.0) / n;
  row.mean_delta = row.mean_after - row.mean_before;
  row.mean_l2 = l2 / n;
  return row;
}

inline std::vector<BenchRow> run_attack_bench(const Dataset& data, const EncoderState& encoder,
                                              const BenchConfig& cfg) {
  const std::vector<Tensor> batches = bench_batches(data, cfg.batches, cfg.batch_size);
  std::vector<BenchRow> rows;
  for (double eps : cfg.epsilons) {
    for (AttackMethod m : cfg.methods) {
      AttackConfig a;
      a.method = m;
      a.epsilon = eps;
      a.steps = m == AttackMethod::pgd ? cfg.pgd_steps : 1;
      rows.push_back(bench_attack(batches, encoder, cfg.loss, a, cfg.seed));
    }
  }
  return rows;
}

inline std::string format_bench_table(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "method   epsilon  loss_before  loss_after  delta       linf      mean_l2\n";
  char buf[160];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8s %-8.4f %-12.6f %-11.6f %-+11.6f %-9.5f %.5f\n",
                  to_string(r.method), r.epsilon, r.mean_before, r.mean_after, r.mean_delta,
                  r.max_linf, r.mean_l2);
    os << buf;
  }
  return os.str();
}

}  // namespace clae
