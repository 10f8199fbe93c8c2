#include <gtest/gtest.h>

#include <cmath>

#include "clae/checkpoint.hpp"
#include "clae/trainer.hpp"

using namespace clae;

namespace {

EncoderConfig tiny_encoder(std::size_t input = 48) {
  EncoderConfig c;
  c.input_dim = input;
  c.hidden_dims = {32};
  c.embed_dim = 16;
  return c;
}

const ImageShape kShape{3, 4, 4};

Tensor fixed_batch(std::uint64_t seed, std::size_t rows = 16) {
  Rng rng(seed);
  Tensor t({rows, kShape.size()});
  for (double& v : t.data()) v = rng.uniform(0.05, 0.95);
  return t;
}

TrainConfig base_config() {
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.seed = 7;
  cfg.attack.epsilon = 0.03;
  return cfg;
}

std::vector<std::vector<double>> params_of(const EncoderState& s) {
  std::vector<std::vector<double>> out;
  for (const Tensor* p : s.parameters()) out.push_back(p->values());
  return out;
}

std::vector<BatchNormStats> stats_of(const EncoderState& s, Branch b) {
  std::vector<BatchNormStats> out;
  for (const auto& n : s.norms) out.push_back(n.stats(b));
  return out;
}

Dataset four_class_dataset() {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 32;
  spec.shape = ImageShape{3, 8, 8};
  return make_synthetic(spec, 11);
}

}  // namespace

TEST(Optimizer, ZeroLearningRate) {
  std::vector<double> p{1.0, -2.0}, v{0.5, 0.5};
  const std::vector<double> g{3.0, 4.0};
  for (OptimizerKind k : {OptimizerKind::sgd, OptimizerKind::sgd_momentum}) {
    optimizer_step(p, g, v, OptimizerConfig{k, 0.0, 0.9, 5e-4});
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
  }
}

TEST(Optimizer, PlainSgdClosedForm) {
  std::vector<double> p{1.0}, v{0.0};
  optimizer_step(p, std::vector<double>{2.0}, v, OptimizerConfig{OptimizerKind::sgd, 0.1, 0.0, 0.0});
  EXPECT_NEAR(p[0], 0.8, 1e-15);
}

TEST(Optimizer, MomentumTwoStepRecurrence) {
  const double lr = 0.1, m = 0.9, wd = 0.01;
  std::vector<double> p{1.0}, v{0.0};
  const OptimizerConfig cfg{OptimizerKind::sgd_momentum, lr, m, wd};
  optimizer_step(p, std::vector<double>{2.0}, v, cfg);
  optimizer_step(p, std::vector<double>{-1.0}, v, cfg);
  // v1 = 2 + 0.01*1 = 2.01;         p1 = 1 - 0.201 = 0.799
  // v2 = 0.9*2.01 - 1 + 0.00799 = 0.81699;  p2 = 0.799 - 0.081699
  const double v1 = 2.0 + wd * 1.0, p1 = 1.0 - lr * v1;
  const double v2 = m * v1 - 1.0 + wd * p1, p2 = p1 - lr * v2;
  EXPECT_EQ(v[0], v2);
  EXPECT_EQ(p[0], p2);
  EXPECT_NEAR(p2, 0.799 - 0.081699, 1e-15);
}

TEST(Step, TotalIsAugPlusWeightedAdv) {
  TrainConfig cfg = base_config();
  cfg.alpha = 0.7;
  TrainState st = init_train_state(tiny_encoder(), cfg);
  const StepLosses l = train_step(fixed_batch(1), kShape, st, cfg);
  EXPECT_GT(l.l_adv, 0.0);
  EXPECT_NEAR(l.l_total, l.l_aug + 0.7 * l.l_adv, 1e-12);
  EXPECT_LE(l.linf, 0.03);
  EXPECT_GT(l.linf, 0.0);
}

TEST(Step, AlphaZeroMatchesBaselineUpdate) {
  TrainConfig clae_cfg = base_config();
  clae_cfg.alpha = 0.0;
  TrainConfig base = base_config();
  base.attack_enabled = false;
  TrainState a = init_train_state(tiny_encoder(), clae_cfg);
  TrainState b = init_train_state(tiny_encoder(), base);
  const Tensor x = fixed_batch(2);
  const StepLosses la = train_step(x, kShape, a, clae_cfg);
  const StepLosses lb = train_step(x, kShape, b, base);
  EXPECT_EQ(la.l_aug, lb.l_aug);
  EXPECT_EQ(la.l_total, lb.l_total);
  EXPECT_EQ(params_of(a.encoder), params_of(b.encoder));
  EXPECT_EQ(a.velocity, b.velocity);
  EXPECT_EQ(stats_of(a.encoder, Branch::clean), stats_of(b.encoder, Branch::clean));
  EXPECT_TRUE(a.augment_rng == b.augment_rng);
}

TEST(Step, ZeroBudgetSharedBranchesCollapse) {
  TrainConfig cfg = base_config();
  cfg.attack.epsilon = 0.0;
  cfg.share_bn_branches = true;
  cfg.augment = AugmentPolicy::identity();
  TrainState st = init_train_state(tiny_encoder(), cfg);
  for (int i = 0; i < 3; ++i) {
    const StepLosses l = train_step(fixed_batch(3 + i), kShape, st, cfg);
    EXPECT_NEAR(l.l_adv, l.l_aug, 1e-10);
  }
}

TEST(Step, FixedBatchDescends) {
  TrainConfig cfg = base_config();
  cfg.learning_rate = 1e-3;
  cfg.augment = AugmentPolicy::identity();
  TrainState st = init_train_state(tiny_encoder(), cfg);
  const Tensor x = fixed_batch(4);
  double last = INFINITY;
  for (int i = 0; i < 10; ++i) {
    const double l = train_step(x, kShape, st, cfg).l_total;
    EXPECT_LT(l, last) << "step " << i;
    last = l;
  }
}

TEST(Step, BranchRouting) {
  TrainConfig cfg = base_config();
  TrainState st = init_train_state(tiny_encoder(), cfg);
  const auto clean0 = stats_of(st.encoder, Branch::clean);
  const auto adv0 = stats_of(st.encoder, Branch::adversarial);
  train_step(fixed_batch(5), kShape, st, cfg);
  EXPECT_NE(stats_of(st.encoder, Branch::clean), clean0);
  EXPECT_NE(stats_of(st.encoder, Branch::adversarial), adv0);

  TrainConfig frozen = cfg;
  frozen.update_adv_bn_stats = false;
  TrainState fr = init_train_state(tiny_encoder(), frozen);
  train_step(fixed_batch(5), kShape, fr, frozen);
  EXPECT_EQ(stats_of(fr.encoder, Branch::adversarial), adv0);
  // the clean branch only ever sees x^p and x^q
  EXPECT_EQ(stats_of(fr.encoder, Branch::clean), stats_of(st.encoder, Branch::clean));
}

TEST(Step, AdvOnlyRunMatchesCleanStatsOfBaseline) {
  TrainConfig cfg = base_config();
  TrainConfig base = cfg;
  base.attack_enabled = false;
  TrainState a = init_train_state(tiny_encoder(), cfg);
  TrainState b = init_train_state(tiny_encoder(), base);
  // first step: same params and inputs, clean stats come from x^p, x^q only
  train_step(fixed_batch(6), kShape, a, cfg);
  train_step(fixed_batch(6), kShape, b, base);
  EXPECT_EQ(stats_of(a.encoder, Branch::clean), stats_of(b.encoder, Branch::clean));
}

TEST(Pretrain, ZeroEpochsIsInit) {
  TrainConfig cfg = base_config();
  cfg.epochs = 0;
  const Dataset ds = four_class_dataset();
  const TrainState st = pretrain(ds, tiny_encoder(ds.shape.size()), cfg);
  EXPECT_EQ(serialize_checkpoint(st.encoder),
            serialize_checkpoint(init_train_state(tiny_encoder(ds.shape.size()), cfg).encoder));
  EXPECT_EQ(st.step, 0u);
}

TEST(Pretrain, Deterministic) {
  TrainConfig cfg = base_config();
  cfg.epochs = 2;
  const Dataset ds = four_class_dataset();
  std::vector<MetricEvent> ev1, ev2;
  const TrainState a = pretrain(ds, tiny_encoder(ds.shape.size()), cfg, [&](const MetricEvent& e) { ev1.push_back(e); });
  const TrainState b = pretrain(ds, tiny_encoder(ds.shape.size()), cfg, [&](const MetricEvent& e) { ev2.push_back(e); });
  EXPECT_EQ(serialize_checkpoint(a.encoder), serialize_checkpoint(b.encoder));
  ASSERT_EQ(ev1.size(), ev2.size());
  for (std::size_t i = 0; i < ev1.size(); ++i) {
    EXPECT_EQ(ev1[i].name, ev2[i].name);
    EXPECT_EQ(ev1[i].value, ev2[i].value);
  }
  // 128 images / 16 per batch = 8 steps per epoch, 4 per-step + 3 epoch metrics
  EXPECT_EQ(a.step, 16u);
  EXPECT_EQ(ev1.size(), 16u * 4 + 2 * 3);
}

TEST(Pretrain, AlphaZeroTrajectoryMatchesBaseline) {
  TrainConfig cfg = base_config();
  cfg.epochs = 2;
  cfg.alpha = 0.0;
  TrainConfig base = cfg;
  base.attack_enabled = false;
  const Dataset ds = four_class_dataset();
  const TrainState a = pretrain(ds, tiny_encoder(ds.shape.size()), cfg);
  const TrainState b = pretrain(ds, tiny_encoder(ds.shape.size()), base);
  EXPECT_EQ(params_of(a.encoder), params_of(b.encoder));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].l_aug, b.history[i].l_aug);
}

TEST(Pretrain, FourClassLossDescends) {
  TrainConfig cfg = base_config();
  cfg.epochs = 30;
  const Dataset ds = four_class_dataset();
  std::vector<double> epoch_aug;
  pretrain(ds, tiny_encoder(ds.shape.size()), cfg, [&](const MetricEvent& e) {
    if (e.name == "epoch_mean_L_aug") epoch_aug.push_back(e.value);
  });
  ASSERT_EQ(epoch_aug.size(), 30u);
  EXPECT_LT(epoch_aug.back(), epoch_aug.front());
}

TEST(Pretrain, TrailingSingletonBatchIsSkipped) {
  TrainConfig cfg = base_config();
  cfg.epochs = 1;
  cfg.batch_size = 127;
  const Dataset ds = four_class_dataset();
  const TrainState st = pretrain(ds, tiny_encoder(ds.shape.size()), cfg);
  EXPECT_EQ(st.step, 1u);
}

TEST(Pretrain, RejectsMismatchedInput) {
  const Dataset ds = four_class_dataset();
  EXPECT_THROW(pretrain(ds, tiny_encoder(10), base_config()), ContractViolation);
}
