#pragma once

// Downstream evaluation of frozen embeddings: weighted kNN vote and a
// softmax-regression probe.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "clae/data.hpp"
#include "clae/encoder.hpp"
#include "clae/errors.hpp"
#include "clae/optimizer.hpp"
#include "clae/rng.hpp"

namespace clae {

struct FeatureBank {
  Tensor features;  // {N, d}, unit rows
  std::vector<int> labels;
  int class_count = 0;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    require(!labels.empty(), "feature bank is empty");
    detail::check_rank2(features, "FeatureBank");
    require(features.rows() == labels.size(), "feature bank: feature/label count mismatch");
    for (std::size_t i = 0; i < features.rows(); ++i) {
      double s = 0.0;
      for (double v : features.row(i)) s += v * v;
      require(std::abs(std::sqrt(s) - 1.0) <= 1e-6, "feature bank: row " + std::to_string(i) +
                                                          " is not unit norm");
    }
    for (int y : labels)
      require(y >= 0 && y < class_count, "feature bank: label out of range");
  }
};

// Builds a bank from arbitrary rows by L2-normalizing them.
inline FeatureBank make_feature_bank(const Tensor& rows, std::vector<int> labels, int class_count) {
  detail::check_rank2(rows, "make_feature_bank");
  Tensor f(rows.shape(), rows.values());
  for (std::size_t i = 0; i < f.rows(); ++i) {
    auto r = f.row(i);
    double s = 0.0;
    for (double v : r) s += v * v;
    const double n = std::max(std::sqrt(s), 1e-12);
    for (double& v : r) v /= n;
  }
  FeatureBank bank{std::move(f), std::move(labels), class_count};
  bank.validate();
  return bank;
}

// Eval-mode, clean-branch, pre-projection embeddings of every image.
inline FeatureBank extract_features(const Dataset& data, const EncoderState& encoder,
                                    std::size_t chunk = 512) {
  require(data.size() > 0, "extract_features: empty dataset");
  const std::size_t d = encoder.config.embed_dim;
  Tensor features({data.size(), d});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor z = encode(data.gather(idx), encoder, Branch::clean);
    std::copy(z.data().begin(), z.data().end(),
              features.data().begin() + static_cast<std::ptrdiff_t>(start * d));
  }
  return FeatureBank{std::move(features), data.labels, data.class_count};
}

struct EvalReport {
  std::string method;
  double accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<double> per_class_accuracy;
  std::string config;  // key=value echo of the evaluator settings
  std::vector<int> predictions;
};

inline EvalReport make_report(std::string method, std::string config,
                              const std::vector<int>& predictions, const FeatureBank& test) {
  EvalReport r;
  r.method = std::move(method);
  r.config = std::move(config);
  r.total = test.size();
  std::vector<std::size_t> hits(static_cast<std::size_t>(test.class_count), 0),
      counts(static_cast<std::size_t>(test.class_count), 0);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto y = static_cast<std::size_t>(test.labels[i]);
    ++counts[y];
    if (predictions[i] == test.labels[i]) {
      ++r.correct;
      ++hits[y];
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  for (std::size_t c = 0; c < counts.size(); ++c)
    r.per_class_accuracy.push_back(counts[c] ? static_cast<double>(hits[c]) / counts[c] : 0.0);
  r.predictions = predictions;
  return r;
}

struct KnnConfig {
  std::size_t k = 200;
  double temperature = 0.1;
  // false: unweighted majority vote.
  bool weighted = true;

  // min(200, N_train / 10), at least 1.
  static KnnConfig for_bank_size(std::size_t n_train) {
    KnnConfig c;
    c.k = std::max<std::size_t>(1, std::min<std::size_t>(200, n_train / 10));
    return c;
  }
};

// Each test row votes over its k most similar train rows (cosine), with
// weight exp(sim / temperature); ties go to the smallest class index.
inline std::vector<int> knn_predict(const FeatureBank& train, const FeatureBank& test,
                                    const KnnConfig& cfg) {
  require(train.size() > 0 && test.size() > 0, "knn_eval: empty feature bank");
  require(cfg.k >= 1 && cfg.k <= train.size(), "knn_eval: k must be in [1, N_train]");
  require(cfg.temperature > 0.0, "knn_eval: temperature must be > 0");
  require(train.features.cols() == test.features.cols(), "knn_eval: feature width mismatch");
  const std::size_t n = train.size(), d = train.features.cols();
  const int classes = std::max(train.class_count, test.class_count);
  std::vector<int> predictions(test.size());
  std::vector<double> sims(n);
  std::vector<std::size_t> order(n);
  std::vector<double> votes(static_cast<std::size_t>(classes));
  for (std::size_t t = 0; t < test.size(); ++t) {
    auto q = test.features.row(t);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = train.features.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += q[j] * r[j];
      sims[i] = s;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cfg.k),
                      order.end(), [&sims](std::size_t a, std::size_t b) {
                        return sims[a] > sims[b] || (sims[a] == sims[b] && a < b);
                      });
    std::fill(votes.begin(), votes.end(), 0.0);
    for (std::size_t m = 0; m < cfg.k; ++m) {
      const std::size_t i = order[m];
      votes[static_cast<std::size_t>(train.labels[i])] +=
          cfg.weighted ? std::exp(sims[i] / cfg.temperature) : 1.0;
    }
    predictions[t] = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return predictions;
}

inline EvalReport knn_eval(const FeatureBank& train, const FeatureBank& test,
                           const KnnConfig& cfg) {
  const std::vector<int> pred = knn_predict(train, test, cfg);
  std::ostringstream echo;
  echo << "k=" << cfg.k << " temperature=" << cfg.temperature
       << " weighted=" << (cfg.weighted ? "true" : "false");
  return make_report("knn", echo.str(), pred, test);
}

inline EvalReport knn_eval(const FeatureBank& train, const FeatureBank& test, std::size_t k,
                           double temperature) {
  KnnConfig cfg;
  cfg.k = k;
  cfg.temperature = temperature;
  return knn_eval(train, test, cfg);
}

struct ProbeConfig {
  std::size_t epochs = 100;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
};

// Softmax regression trained with mini-batch SGD + momentum on frozen
// features; accuracy is measured on `test` after the last epoch.
struct LinearProbe {
  Tensor weight;  // {d, classes}
  Tensor bias;    // {1, classes}

  std::vector<int> predict(const FeatureBank& bank) const {
    const std::size_t d = weight.rows(), classes = weight.cols();
    std::vector<int> out(bank.size());
    std::vector<double> logits(classes);
    for (std::size_t i = 0; i < bank.size(); ++i) {
      auto x = bank.features.row(i);
      for (std::size_t c = 0; c < classes; ++c) {
        double s = bias[c];
        for (std::size_t j = 0; j < d; ++j) s += x[j] * weight[j * classes + c];
        logits[c] = s;
      }
      out[i] = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    return out;
  }
};

inline LinearProbe train_linear_probe(const FeatureBank& train, const ProbeConfig& cfg) {
  require(train.size() > 0, "linear_probe: empty feature bank");
  const std::vector<int> distinct = [&] {
    std::vector<int> v = train.labels;
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
  }();
  require(distinct.size() >= 2, "linear_probe: train labels contain a single class");
  const std::size_t n = train.size(), d = train.features.cols();
  const auto classes = static_cast<std::size_t>(train.class_count);
  Rng rng = Rng::stream(cfg.seed, "probe");
  LinearProbe probe{Tensor({d, classes}), Tensor({1, classes})};
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& w : probe.weight.data()) w = rng.uniform(-bound, bound);
  std::vector<double> vw(probe.weight.size(), 0.0), vb(probe.bias.size(), 0.0);
  std::vector<double> gw(probe.weight.size()), gb(probe.bias.size()), logits(classes);
  const OptimizerConfig opt{OptimizerKind::sgd_momentum, cfg.learning_rate, cfg.momentum,
                            cfg.weight_decay};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::fill(gw.begin(), gw.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t m = start; m < end; ++m) {
        const std::size_t i = order[m];
        auto x = train.features.row(i);
        for (std::size_t c = 0; c < classes; ++c) {
          double s = probe.bias[c];
          for (std::size_t j = 0; j < d; ++j) s += x[j] * probe.weight[j * classes + c];
          logits[c] = s;
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t c = 0; c < classes; ++c) {
          const double p = logits[c] / z - (static_cast<int>(c) == train.labels[i] ? 1.0 : 0.0);
          gb[c] += p * inv;
          for (std::size_t j = 0; j < d; ++j) gw[j * classes + c] += p * x[j] * inv;
        }
      }
      optimizer_step(probe.weight.data(), gw, vw, opt);
      optimizer_step(probe.bias.data(), gb, vb, opt);
    }
  }
  return probe;
}

inline EvalReport linear_probe(const FeatureBank& train, const FeatureBank& test,
                               const ProbeConfig& cfg) {
  require(test.size() > 0, "linear_probe: empty test bank");
  require(train.features.cols() == test.features.cols(), "linear_probe: feature width mismatch");
  const LinearProbe probe = train_linear_probe(train, cfg);
  std::ostringstream echo;
  echo << "epochs=" << cfg.epochs << " lr=" << cfg.learning_rate << " momentum=" << cfg.momentum
       << " batch_size=" << cfg.batch_size << " seed=" << cfg.seed;
  return make_report("linear_probe", echo.str(), probe.predict(test), test);
}

inline EvalReport linear_probe(const FeatureBank& train, const FeatureBank& test,
                               std::size_t epochs, double lr) {
  ProbeConfig cfg;
  cfg.epochs = epochs;
  cfg.learning_rate = lr;
  return linear_probe(train, test, cfg);
}

}  // namespace clae
