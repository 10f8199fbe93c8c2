#include <gtest/gtest.h>

#include <cmath>

#include "clae/checkpoint.hpp"
#include "clae/eval.hpp"

using namespace clae;

namespace {

// train points on the unit circle:
//   A ( 1, 0)  0     B (0.6, 0.8) 1     C (0.8,-0.6) 1
//   D (-1, 0)  0     E ( 0, 1)    0     F ( 0, -1)   1
FeatureBank six_points() {
  return make_feature_bank(
      Tensor::matrix({{1, 0}, {0.6, 0.8}, {0.8, -0.6}, {-1, 0}, {0, 1}, {0, -1}}),
      {0, 1, 1, 0, 0, 1}, 2);
}

FeatureBank three_queries() {
  return make_feature_bank(Tensor::matrix({{1, 0}, {0, 1}, {0, -1}}), {0, 0, 1}, 2);
}

Tensor gaussian_cloud(Rng& rng, std::size_t n, std::size_t d) {
  Tensor t({n, d});
  for (double& v : t.data()) v = rng.uniform(-1, 1);
  return t;
}

// product of random Givens rotations
Tensor random_rotation(Rng& rng, std::size_t d) {
  Tensor q({d, d});
  for (std::size_t i = 0; i < d; ++i) q.at(i, i) = 1.0;
  for (int r = 0; r < 40; ++r) {
    const std::size_t a = rng.index(d), b = (a + 1 + rng.index(d - 1)) % d;
    const double th = rng.uniform(0, 6.283185307179586), c = std::cos(th), s = std::sin(th);
    for (std::size_t k = 0; k < d; ++k) {
      const double qa = q.at(k, a), qb = q.at(k, b);
      q.at(k, a) = c * qa - s * qb;
      q.at(k, b) = s * qa + c * qb;
    }
  }
  return q;
}

Tensor times(const Tensor& x, const Tensor& q) {
  Tensor out({x.rows(), q.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j)
      for (std::size_t k = 0; k < x.cols(); ++k) out.at(i, j) += x.at(i, k) * q.at(k, j);
  return out;
}

// Newton's method on two-class logistic regression (weights on [x, 1]).
std::vector<int> newton_logistic(const FeatureBank& train, const FeatureBank& test) {
  const std::size_t d = train.features.cols() + 1;
  std::vector<double> w(d, 0.0);
  auto row = [](const FeatureBank& b, std::size_t i) {
    std::vector<double> x(b.features.row(i).begin(), b.features.row(i).end());
    x.push_back(1.0);
    return x;
  };
  for (int it = 0; it < 50; ++it) {
    std::vector<double> g(d, 0.0);
    std::vector<std::vector<double>> h(d, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto x = row(train, i);
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
      const double p = 1.0 / (1.0 + std::exp(-z)), y = train.labels[i];
      for (std::size_t j = 0; j < d; ++j) {
        g[j] += (p - y) * x[j];
        for (std::size_t k = 0; k < d; ++k) h[j][k] += p * (1 - p) * x[j] * x[k];
      }
    }
    // solve h * step = g by Gaussian elimination
    for (std::size_t c = 0; c < d; ++c) {
      std::size_t piv = c;
      for (std::size_t r = c + 1; r < d; ++r)
        if (std::abs(h[r][c]) > std::abs(h[piv][c])) piv = r;
      std::swap(h[c], h[piv]);
      std::swap(g[c], g[piv]);
      for (std::size_t r = c + 1; r < d; ++r) {
        const double f = h[r][c] / h[c][c];
        for (std::size_t k = c; k < d; ++k) h[r][k] -= f * h[c][k];
        g[r] -= f * g[c];
      }
    }
    std::vector<double> step(d);
    for (std::size_t c = d; c-- > 0;) {
      double s = g[c];
      for (std::size_t k = c + 1; k < d; ++k) s -= h[c][k] * step[k];
      step[c] = s / h[c][c];
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= step[j];
  }
  std::vector<int> out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto x = row(test, i);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += w[j] * x[j];
    out.push_back(z > 0 ? 1 : 0);
  }
  return out;
}

// two overlapping angular clusters: label 1 centred at 60 degrees, label 0 at 0
FeatureBank angular_fixture(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  Tensor t({n, 2});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % 2);
    const double centre = labels[i] ? 1.0472 : 0.0;
    const double a = centre + rng.uniform(-0.8, 0.8) + rng.uniform(-0.8, 0.8);
    t.at(i, 0) = std::cos(a);
    t.at(i, 1) = std::sin(a);
  }
  return make_feature_bank(t, labels, 2);
}

}  // namespace

TEST(Knn, SixPointHandFixture) {
  // query (1,0): top3 A 1.0 [0], C 0.8 [1], B 0.6 [1]
  //   T=0.1: e^10 = 22026 vs e^8 + e^6 = 3384      -> 0
  //   T=1:   e^1 = 2.718  vs e^0.8 + e^0.6 = 4.048 -> 1
  // query (0,1): E 1 [0], B 0.8 [1], then A/D tie at 0 -> A [0]
  //   T=0.1: e^10 + 1 vs e^8 -> 0;  T=1: e + 1 = 3.718 vs e^0.8 = 2.226 -> 0
  // query (0,-1): F 1 [1], C 0.6 [1], then A 0 [0] -> 1 at both temperatures
  const FeatureBank train = six_points(), test = three_queries();
  const EvalReport sharp = knn_eval(train, test, 3, 0.1);
  EXPECT_EQ(sharp.predictions, (std::vector<int>{0, 0, 1}));
  EXPECT_EQ(sharp.accuracy, 1.0);
  const EvalReport soft = knn_eval(train, test, 3, 1.0);
  EXPECT_EQ(soft.predictions, (std::vector<int>{1, 0, 1}));
  EXPECT_EQ(soft.correct, 2u);
  KnnConfig majority;
  majority.k = 3;
  majority.weighted = false;
  EXPECT_EQ(knn_eval(train, test, majority).predictions, (std::vector<int>{1, 0, 1}));
}

TEST(Knn, NearestSelf) {
  Rng rng(1);
  const Tensor x = gaussian_cloud(rng, 20, 5);
  std::vector<int> labels(20);
  for (std::size_t i = 0; i < 20; ++i) labels[i] = static_cast<int>(rng.index(3));
  const FeatureBank train = make_feature_bank(x, labels, 3);
  const EvalReport r = knn_eval(train, train, 1, 0.1);
  EXPECT_EQ(r.predictions, labels);
  EXPECT_EQ(r.accuracy, 1.0);
}

TEST(Knn, DegenerateLabels) {
  Rng rng(2);
  const FeatureBank train = make_feature_bank(gaussian_cloud(rng, 15, 4), std::vector<int>(15, 2), 3);
  std::vector<int> test_labels{0, 1, 2, 2, 1, 2, 0, 2};
  const FeatureBank test = make_feature_bank(gaussian_cloud(rng, 8, 4), test_labels, 3);
  const EvalReport r = knn_eval(train, test, 5, 0.1);
  for (int p : r.predictions) EXPECT_EQ(p, 2);
  EXPECT_EQ(r.accuracy, 4.0 / 8.0);
}

TEST(Knn, RotationInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor tr = gaussian_cloud(rng, 60, 6), te = gaussian_cloud(rng, 25, 6);
    std::vector<int> labels(60);
    for (auto& y : labels) y = static_cast<int>(rng.index(4));
    const Tensor q = random_rotation(rng, 6);
    const FeatureBank a = make_feature_bank(tr, labels, 4), b = make_feature_bank(te, std::vector<int>(25, 0), 4);
    const FeatureBank ar = make_feature_bank(times(tr, q), labels, 4);
    const FeatureBank br = make_feature_bank(times(te, q), std::vector<int>(25, 0), 4);
    EXPECT_EQ(knn_eval(a, b, 7, 0.1).predictions, knn_eval(ar, br, 7, 0.1).predictions);
  }
}

TEST(Knn, TemperatureIrrelevantAtKOne) {
  Rng rng(4);
  std::vector<int> labels(30);
  for (auto& y : labels) y = static_cast<int>(rng.index(3));
  const FeatureBank train = make_feature_bank(gaussian_cloud(rng, 30, 3), labels, 3);
  const FeatureBank test = make_feature_bank(gaussian_cloud(rng, 12, 3), std::vector<int>(12, 1), 3);
  const auto base = knn_eval(train, test, 1, 0.1).predictions;
  for (double t : {0.01, 0.5, 10.0}) EXPECT_EQ(knn_eval(train, test, 1, t).predictions, base);
}

TEST(Knn, RejectsBadK) {
  const FeatureBank train = six_points();
  EXPECT_THROW(knn_eval(train, train, 0, 0.1), ContractViolation);
  EXPECT_THROW(knn_eval(train, train, 7, 0.1), ContractViolation);
  EXPECT_EQ(KnnConfig::for_bank_size(5000).k, 200u);
  EXPECT_EQ(KnnConfig::for_bank_size(500).k, 50u);
  EXPECT_EQ(KnnConfig::for_bank_size(3).k, 1u);
}

TEST(Probe, SeparableClustersScorePerfect) {
  Rng rng(5);
  Tensor x({40, 3});
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    y[i] = static_cast<int>(i % 2);
    x.at(i, 0) = (y[i] ? 1.0 : -1.0) + rng.uniform(-0.1, 0.1);
    x.at(i, 1) = rng.uniform(-0.1, 0.1);
    x.at(i, 2) = rng.uniform(-0.1, 0.1);
  }
  const FeatureBank bank = make_feature_bank(x, y, 2);
  EXPECT_EQ(linear_probe(bank, bank, 100, 0.1).accuracy, 1.0);
}

TEST(Probe, IdenticalFeaturesPredictMajority) {
  const Tensor x({20, 3}, 0.5);
  std::vector<int> y(20, 1);
  for (std::size_t i = 0; i < 6; ++i) y[i] = 0;
  const FeatureBank train = make_feature_bank(x, y, 2);
  std::vector<int> ty{0, 0, 0, 1, 1};
  const FeatureBank test = make_feature_bank(Tensor({5, 3}, 0.5), ty, 2);
  const EvalReport r = linear_probe(train, test, 100, 0.1);
  for (int p : r.predictions) EXPECT_EQ(p, 1);
  EXPECT_EQ(r.accuracy, 2.0 / 5.0);
}

TEST(Probe, SingleClassIsRejected) {
  const FeatureBank bank = make_feature_bank(Tensor({4, 2}, 1.0), {1, 1, 1, 1}, 2);
  EXPECT_THROW(linear_probe(bank, bank, 10, 0.1), ContractViolation);
}

TEST(Probe, AgreesWithNewtonLogistic) {
  const FeatureBank train = angular_fixture(6, 200), test = angular_fixture(7, 100);
  const std::vector<int> oracle = newton_logistic(train, test);
  const EvalReport r = linear_probe(train, test, 100, 0.1);
  std::size_t disagree = 0;
  for (std::size_t i = 0; i < test.size(); ++i) disagree += r.predictions[i] != oracle[i];
  EXPECT_LE(disagree, 1u);
}

TEST(Probe, Deterministic) {
  const FeatureBank train = angular_fixture(8, 100);
  EXPECT_EQ(linear_probe(train, train, 20, 0.1).predictions, linear_probe(train, train, 20, 0.1).predictions);
}

TEST(Features, DeterministicUnitAndPure) {
  EncoderConfig c;
  c.input_dim = 12;
  c.hidden_dims = {8};
  c.embed_dim = 4;
  const EncoderState enc = init_encoder(c, 2);
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 5;
  spec.shape = ImageShape{3, 2, 2};
  const Dataset ds = make_synthetic(spec, 1);
  const std::string before = serialize_checkpoint(enc);
  const FeatureBank a = extract_features(ds, enc, 4), b = extract_features(ds, enc),
                    again = extract_features(ds, enc, 4);
  EXPECT_EQ(a.features, again.features);
  // chunking changes the product shape, so only rounding may differ
  for (std::size_t i = 0; i < a.features.size(); ++i) EXPECT_NEAR(a.features[i], b.features[i], 1e-12);
  EXPECT_EQ(a.labels, ds.labels);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(serialize_checkpoint(enc), before);
}
