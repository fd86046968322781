#include <gtest/gtest.h>

#include "support.hpp"

namespace fobor {
namespace {

using testing::Rng;

TrainConfig mode(int k) {
  TrainConfig cfg;
  cfg.use_abs = k & 1;
  cfg.use_cfr = k & 2;
  if (!cfg.use_abs) cfg.bg_loss_mode = BgLossMode::uniform;
  return cfg;
}

Fixture small_fixture(std::uint64_t seed = 0) {
  FixtureSpec spec;
  spec.seed = seed;
  spec.images_per_class = 4;
  spec.test_images_per_class = 2;
  spec.ood_images = 10;
  return generate_fixture(spec);
}

TEST(IdLoss, Examples) {
  EXPECT_EQ(id_loss(std::vector<double>{0.0, 1.0, 0.0}, 1), 0.0);
  EXPECT_NEAR(id_loss(std::vector<double>(4, 0.25), 2), std::log(4.0), 1e-15);
  EXPECT_NEAR(id_loss(std::vector<double>{0.5498, 0.4502}, 0), 0.5982, 5e-5);
  EXPECT_THROW(id_loss(std::vector<double>{1.0}, 1), InvalidArgument);
}

TEST(TotalLoss, DefaultsMatchReferenceOnFixtureBatch) {
  const auto fx = generate_fixture(FixtureSpec{});
  const auto batch = make_batch(std::span(fx.train.records).first(32));
  const auto ctx = init_prompt(16, 32, 0.02, 1);
  const TrainConfig cfg;
  const auto got = total_loss(batch, ctx, fx.class_tokens, cfg);
  const auto want = testing::ref::objective(batch, ctx, ctx, fx.class_tokens, cfg);
  EXPECT_NEAR(got.l_id, want.l_id, 1e-6);
  EXPECT_NEAR(got.l_abs, want.l_abs, 1e-6);
  EXPECT_NEAR(got.l_cfr, want.l_cfr, 1e-6);
  EXPECT_NEAR(got.l_total, want.l_total, 1e-6);
  EXPECT_LT(got.l_cfr, 0.0);
  EXPECT_LT(got.l_abs, 0.0);
}

TEST(TotalLoss, MatchesReferenceOnRandomInstancesInEveryMode) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto inst = testing::random_instance(seed);
    for (int k = 0; k < 4; ++k) {
      TrainConfig cfg = mode(k);
      cfg.tau = seed % 3 == 0 ? 0.01 : 0.1;
      cfg.patch_reduce = seed % 2 ? PatchReduce::mean : PatchReduce::max;
      cfg.pair_mode = seed % 4 < 2 ? PairMode::raw : PairMode::renormalized;
      const auto got = total_loss(inst.batch, inst.context, inst.tokens, cfg);
      const auto want = testing::ref::objective(inst.batch, inst.context, inst.context, inst.tokens, cfg);
      EXPECT_NEAR(got.l_total, want.l_total, 1e-6) << seed << " " << k;
      EXPECT_NEAR(got.l_abs, want.l_abs, 1e-6) << seed << " " << k;
      EXPECT_NEAR(got.l_cfr, want.l_cfr, 1e-6) << seed << " " << k;
      EXPECT_NEAR(got.l_total, got.l_id + cfg.alpha * got.l_abs + cfg.beta * got.l_cfr, 1e-12);
    }
  }
}

TEST(TotalLoss, ZeroWeightsLeaveCrossEntropy) {
  const auto inst = testing::random_instance(3);
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  const auto lb = total_loss(inst.batch, inst.context, inst.tokens, cfg);
  EXPECT_EQ(lb.l_total, lb.l_id);
  const auto bank = encode_classes(inst.context, inst.tokens);
  double ce = 0.0;
  for (const auto* r : inst.batch) ce += id_loss(posteriors(*r, bank, cfg.tau).global_probs, *r->label);
  EXPECT_NEAR(lb.l_id, ce / static_cast<double>(inst.batch.size()), 1e-15);
}

TEST(TotalLoss, UniformBackgroundWithoutCfrIsLocoOp) {
  const auto fx = small_fixture();
  const auto batch = make_batch(fx.train.records);
  const auto ctx = init_prompt(16, 32, 0.02, 2);
  TrainConfig cfg = mode(0);
  const auto lb = total_loss(batch, ctx, fx.class_tokens, cfg);
  const auto bank = encode_classes(ctx, fx.class_tokens);
  double id = 0.0, bg = 0.0;
  int n_bg = 0;
  for (const auto* r : batch) {
    const auto pm = posteriors(*r, bank, cfg.tau);
    id += id_loss(pm.global_probs, *r->label);
    const auto dec = decompose(pm.local_probs, *r->label, default_kappa(10));
    if (dec.bg.empty()) continue;
    bg += ood_loss(pm.local_probs, dec.bg);
    ++n_bg;
  }
  ASSERT_GT(n_bg, 0);
  EXPECT_EQ(lb.l_cfr, 0.0);
  EXPECT_EQ(lb.l_id, id / static_cast<double>(batch.size()));
  EXPECT_EQ(lb.l_abs, bg / n_bg);
  EXPECT_EQ(lb.l_total, lb.l_id + cfg.alpha * lb.l_abs);
}

TEST(Gradient, SingleClassIsZero) {
  Rng rng(4);
  const auto ds = testing::random_dataset(Dims{1, 6, 2, 4}, 3, Split::id_train, rng);
  const auto ct = testing::random_tokens(1, 6, rng);
  const auto lg = grad_total_loss(make_batch(ds.records), testing::random_context(2, 6, 0.3, rng), ct, TrainConfig{});
  for (double g : lg.grad.data()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(lg.loss.l_total, 0.0);
}

TEST(Gradient, CfrToggleRemovesExactlyItsTerm) {
  const auto inst = testing::random_instance(11);
  TrainConfig off;
  off.use_cfr = false;
  TrainConfig id_only = off;
  id_only.alpha = 0.0;
  TrainConfig bg_only = off;
  bg_only.alpha = 1.0;
  const auto g = grad_total_loss(inst.batch, inst.context, inst.tokens, off).grad;
  const auto gi = grad_total_loss(inst.batch, inst.context, inst.tokens, id_only).grad;
  const auto gb = grad_total_loss(inst.batch, inst.context, inst.tokens, bg_only).grad;
  for (std::size_t k = 0; k < g.data().size(); ++k)
    EXPECT_NEAR(g.data()[k], gi.data()[k] + off.alpha * (gb.data()[k] - gi.data()[k]), 1e-12);
  TrainConfig beta0;
  beta0.beta = 0.0;
  const auto gz = grad_total_loss(inst.batch, inst.context, inst.tokens, beta0).grad;
  for (std::size_t k = 0; k < g.data().size(); ++k) EXPECT_NEAR(g.data()[k], gz.data()[k], 1e-12);
}

TEST(Gradient, SmallInstanceMatchesFiniteDifferences) {
  Rng rng(5);
  const auto ds = testing::random_dataset(Dims{3, 8, 2, 4}, 4, Split::id_train, rng);
  const auto ct = testing::random_tokens(3, 8, rng, true);
  const auto ctx = testing::random_context(2, 8, 0.3, rng);
  for (int k = 0; k < 4; ++k) EXPECT_LT(fd_check(make_batch(ds.records), ctx, ct, mode(k)), 1e-4) << k;
}

TEST(Gradient, AgreesWithReferenceNumericGradient) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    const auto inst = testing::random_instance(seed);
    const TrainConfig cfg = mode(static_cast<int>(seed % 4));
    const auto lg = grad_total_loss(inst.batch, inst.context, inst.tokens, cfg);
    EXPECT_LT(testing::max_relative_error(lg.grad, testing::ref::numeric_gradient(inst.batch, inst.context, inst.tokens, cfg)),
              1e-4)
        << seed;
  }
}

TEST(FdCheck, LinearLossIsExact) {
  Matrix c(3, 4), x(3, 4);
  for (std::size_t k = 0; k < 12; ++k) {
    c.data()[k] = 0.5 * static_cast<double>(k) - 2.0;
    x.data()[k] = 0.1 * static_cast<double>(k);
  }
  auto loss = [&](const Matrix& v) {
    double s = 0.0;
    for (std::size_t k = 0; k < 12; ++k) s += c.data()[k] * v.data()[k];
    return s;
  };
  EXPECT_LT(fd_compare(loss, x, c), 1e-10);
  Matrix wrong = c;
  wrong.data()[5] += 1.0;
  EXPECT_GT(fd_compare(loss, x, wrong), 0.1);
}

TEST(FdCheck, DefaultPipelineAndCoarseStep) {
  const auto fx = small_fixture();
  const auto batch = make_batch(std::span(fx.train.records).first(8));
  const auto ctx = init_prompt(4, 32, 0.3, 1);
  const TrainConfig cfg;
  const double fine = fd_check(batch, ctx, fx.class_tokens, cfg);
  FdOptions coarse;
  coarse.eps = 1e-2;
  EXPECT_LT(fine, 1e-4);
  EXPECT_GT(fd_check(batch, ctx, fx.class_tokens, cfg, coarse), fine);
}

TEST(FdCheck, LargeContextUsesSeededSubset) {
  const auto fx = small_fixture();
  const auto batch = make_batch(std::span(fx.train.records).first(4));
  const auto ctx = init_prompt(40, 32, 0.3, 2);  // 1280 coordinates
  FdOptions opt;
  opt.max_coordinates = 64;
  const double a = fd_check(batch, ctx, fx.class_tokens, TrainConfig{}, opt);
  EXPECT_EQ(a, fd_check(batch, ctx, fx.class_tokens, TrainConfig{}, opt));
  EXPECT_LT(a, 1e-4);
}

TEST(Train, ZeroLearningRateKeepsContext) {
  const auto fx = small_fixture();
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.steps = 5;
  cfg.batch_size = 1000;
  const auto res = train(fx.train, fx.class_tokens, cfg);
  EXPECT_EQ(res.context, init_prompt(16, 32, cfg.init_sigma, cfg.seed));
  ASSERT_EQ(res.history.size(), 5u);
  for (const auto& h : res.history) EXPECT_EQ(h.l_total, res.history[0].l_total);
}

TEST(Train, OneStepWithoutMomentumIsPlainGradientDescent) {
  const auto fx = small_fixture();
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.momentum = 0.0;
  cfg.lr = 0.05;
  cfg.batch_size = 1000;
  const auto init = init_prompt(16, 32, 0.02, 7);
  const auto res = train(fx.train, fx.class_tokens, cfg, init);
  const auto g = grad_total_loss(make_batch(fx.train.records), init, fx.class_tokens, cfg).grad;
  for (std::size_t k = 0; k < g.data().size(); ++k)
    EXPECT_EQ(res.context.vectors.data()[k], init.vectors.data()[k] - cfg.lr * g.data()[k]);
}

TEST(Train, SameSeedSameResultAcrossThreadCounts) {
  const auto fx = small_fixture();
  TrainConfig cfg;
  cfg.steps = 20;
  cfg.batch_size = 8;
  const auto a = train(fx.train, fx.class_tokens, cfg);
  const auto b = train(fx.train, fx.class_tokens, cfg);
  cfg.threads = 4;
  const auto c = train(fx.train, fx.class_tokens, cfg);
  EXPECT_EQ(a.context, b.context);
  EXPECT_EQ(a.context, c.context);
  for (std::size_t s = 0; s < a.history.size(); ++s) {
    EXPECT_EQ(a.history[s].l_total, b.history[s].l_total);
    EXPECT_EQ(a.history[s].l_total, c.history[s].l_total);
  }
  cfg.seed = 1;
  EXPECT_NE(train(fx.train, fx.class_tokens, cfg).context, a.context);
}

TEST(Train, DivergenceReportsStep) {
  const auto fx = small_fixture();
  TrainConfig cfg;
  cfg.tau = 1e-310;  // similarities / tau overflow
  cfg.steps = 10;
  try {
    train(fx.train, fx.class_tokens, cfg);
    FAIL() << "expected divergence";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsUnlabelledOrMismatchedData) {
  const auto fx = small_fixture();
  EXPECT_THROW(train(fx.ood_test, fx.class_tokens, TrainConfig{}), InvalidArgument);
  Rng rng(1);
  EXPECT_THROW(train(fx.train, testing::random_tokens(3, 32, rng), TrainConfig{}), InvalidArgument);
  TrainConfig bad;
  bad.momentum = 1.0;
  EXPECT_THROW(train(fx.train, fx.class_tokens, bad), InvalidArgument);
}

double full_loss_id(const Fixture& fx, const PromptContext& ctx, const TrainConfig& cfg) {
  return total_loss(make_batch(fx.train.records), ctx, fx.class_tokens, cfg).l_id;
}

double id_accuracy(const Fixture& fx, const PromptContext& ctx) {
  const auto bank = encode_classes(ctx, fx.class_tokens);
  int ok = 0;
  for (const auto& r : fx.id_test.records) {
    const auto p = posteriors(r, bank, kDefaultTemperature).global_probs;
    ok += static_cast<std::uint32_t>(std::max_element(p.begin(), p.end()) - p.begin()) == *r.label;
  }
  return ok / static_cast<double>(fx.id_test.records.size());
}

TEST(Train, CrossEntropyOnlyRunLowersIdLoss) {
  const auto fx = generate_fixture(FixtureSpec{});
  TrainConfig cfg;
  cfg.alpha = 0.0;
  cfg.beta = 0.0;
  const auto res = train(fx.train, fx.class_tokens, cfg);
  const auto init = init_prompt(16, 32, cfg.init_sigma, cfg.seed);
  EXPECT_LT(full_loss_id(fx, res.context, cfg), full_loss_id(fx, init, cfg));
}

TEST(Train, DefaultRunLowersObjectiveAndKeepsAccuracy) {
  const auto fx = generate_fixture(FixtureSpec{});
  const TrainConfig cfg;
  const auto res = train(fx.train, fx.class_tokens, cfg);
  const auto init = init_prompt(16, 32, cfg.init_sigma, cfg.seed);
  const auto all = make_batch(fx.train.records);
  EXPECT_LT(total_loss(all, res.context, fx.class_tokens, cfg).l_total,
            total_loss(all, init, fx.class_tokens, cfg).l_total);
  EXPECT_GE(id_accuracy(fx, res.context), id_accuracy(fx, init) - 0.01);
}

}  // namespace
}  // namespace fobor
