#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include <unistd.h>

#include "cellfree/equivariance.hpp"
#include "cellfree/training.hpp"
#include "test_util.hpp"

using namespace cellfree;
using cellfree::fixtures::rel_diff;

namespace {

Dataset small_set(std::size_t K, std::size_t M, std::size_t N, std::size_t count, std::uint64_t seed) {
  GeometryConfig cfg;
  cfg.K = K;
  cfg.M = M;
  cfg.N = N;
  return generate_dataset(cfg, count, seed);
}

Model small_model(const Dataset& ds, bool attention, std::uint64_t seed = 3) {
  ModelConfig mc;
  mc.layers = 2;
  mc.features = 4;
  mc.attention = attention;
  mc.seed = seed;
  return init_model(mc, typical_channel_norm(ds));
}

std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> b(ds.size());
  std::iota(b.begin(), b.end(), 0);
  return b;
}

Dataset single(const Dataset& ds, Sample s) {
  Dataset out = ds;
  out.samples = {std::move(s)};
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cellfree_test_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Loss, PermutationInvariantPerSample) {
  const Dataset ds = small_set(4, 3, 4, 10, 21);
  Rng rng(22);
  for (bool attention : {true, false}) {
    const Model model = small_model(ds, attention);
    for (const auto& s : ds.samples) {
      const PermTriple t = PermTriple::random(ds.N, ds.M, ds.K, rng);
      const double a = loss(model, single(ds, s), {0});
      const double b = loss(model, single(ds, {permute_assoc(s.assoc, t), permute_kmn(s.h, t)}), {0});
      EXPECT_LE(rel_diff(a, b), 1e-8);
    }
  }
}

TEST(Loss, SingleSampleIsNegativeSumRate) {
  const Dataset ds = small_set(3, 2, 2, 4, 23);
  const Model model = small_model(ds, true);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    const double rate = sum_rate(s.h, s.assoc, predict(model, s.h, s.assoc, ds.power_budget), ds.noise_power);
    EXPECT_DOUBLE_EQ(loss(model, ds, {i}), -rate);
  }
}

TEST(Loss, TapeLossMatchesPlainLoss) {
  const Dataset ds = small_set(3, 3, 2, 6, 24);
  const Model model = small_model(ds, true);
  const auto [l, grads] = loss_and_grad(model, ds, all_indices(ds));
  EXPECT_LE(rel_diff(l, loss(model, ds, all_indices(ds))), 1e-12);
  EXPECT_EQ(grads.size(), model.params.tensors().size());
}

TEST(Loss, ZeroModelGivesZero) {
  const Dataset ds = small_set(3, 2, 2, 4, 25);
  Model model = small_model(ds, true);
  for (auto& l : model.params.layers) {
    l.alpha = Tensor(l.alpha.shape());
    l.beta = Tensor(l.beta.shape());
  }
  EXPECT_EQ(loss(model, ds, all_indices(ds)), 0.0);
  const WmmseCache cache = build_wmmse_cache(ds);
  const auto r = evaluate(model, ds, cache);
  EXPECT_EQ(r.mean_norm_rate, 0.0);
}

TEST(Loss, RejectsEmptyBatch) {
  const Dataset ds = small_set(2, 2, 2, 2, 26);
  EXPECT_THROW(loss(small_model(ds, false), ds, {}), std::invalid_argument);
}

TEST(Gradient, DirectionalDerivativeMatchesFiniteDifference) {
  const Dataset ds = small_set(3, 3, 4, 8, 27);
  for (bool attention : {true, false}) {
    const Model model = small_model(ds, attention);
    const auto batch = all_indices(ds);
    const auto [l0, grads] = loss_and_grad(model, ds, batch);
    // dL = 2 Re sum conj(dL/dz̄) dz; along dz = -g this is -2 ||g||^2
    double predicted = 0.0;
    for (const auto& g : grads) predicted -= 2.0 * g.squared_norm();
    const double gnorm = std::sqrt(-predicted / 2.0);
    const double eps = 1e-6 / gnorm;
    auto shifted = [&](double t) {
      Model m = model;
      auto ps = m.params.tensors();
      for (std::size_t p = 0; p < ps.size(); ++p)
        for (std::size_t i = 0; i < ps[p]->size(); ++i) (*ps[p])[i] -= cplx(t) * grads[p][i];
      return loss(m, ds, batch);
    };
    const double fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
    EXPECT_LT(predicted, 0.0);
    EXPECT_LE(rel_diff(fd, predicted), 1e-4) << "attention " << attention;
    EXPECT_LT(shifted(eps), l0);
  }
}

TEST(Train, TinyRunLowersLoss) {
  const Dataset ds = small_set(2, 2, 2, 64, 28);
  Model model = small_model(ds, true);
  const double before = loss(model, ds, all_indices(ds));
  TrainConfig tc;
  tc.epochs = 30;
  tc.seed = 5;
  const History h = train(model, tc, ds);
  ASSERT_EQ(h.epochs.size(), 30u);
  EXPECT_LT(h.epochs.back().train_loss, h.epochs.front().train_loss);
  EXPECT_LT(loss(model, ds, all_indices(ds)), before);
  for (const auto& r : h.epochs) EXPECT_TRUE(std::isnan(r.eval_norm_rate));
}

TEST(Train, DeterministicGivenSeed) {
  const Dataset ds = small_set(3, 2, 2, 40, 29);
  const Dataset te = small_set(3, 2, 2, 5, 30);
  const WmmseCache cache = build_wmmse_cache(te);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 16;
  tc.seed = 9;
  Model a = small_model(ds, true), b = small_model(ds, true);
  const History ha = train(a, tc, ds, &te, &cache);
  tc.workers = 3;
  const History hb = train(b, tc, ds, &te, &cache);
  ASSERT_EQ(ha.epochs.size(), hb.epochs.size());
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    EXPECT_NEAR(ha.epochs[e].train_loss, hb.epochs[e].train_loss, 1e-12 * std::abs(ha.epochs[e].train_loss));
    EXPECT_NEAR(ha.epochs[e].eval_norm_rate, hb.epochs[e].eval_norm_rate, 1e-12);
  }
  Model c = small_model(ds, true);
  tc.workers = 1;
  const History hc = train(c, tc, ds, &te, &cache);
  for (std::size_t e = 0; e < ha.epochs.size(); ++e) {
    EXPECT_EQ(ha.epochs[e].train_loss, hc.epochs[e].train_loss);
    EXPECT_EQ(ha.epochs[e].eval_norm_rate, hc.epochs[e].eval_norm_rate);
  }
  const auto pa = a.params.tensors();
  const auto pc = c.params.tensors();
  for (std::size_t p = 0; p < pa.size(); ++p) EXPECT_EQ(max_abs_diff(*pa[p], *pc[p]), 0.0);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  const Dataset ds = small_set(2, 2, 2, 20, 31);
  Model model = small_model(ds, true);
  const Model before = model;
  TrainConfig tc;
  tc.epochs = 2;
  tc.learning_rate = 0.0;
  train(model, tc, ds);
  const auto a = model.params.tensors();
  const auto b = before.params.tensors();
  for (std::size_t p = 0; p < a.size(); ++p) EXPECT_EQ(max_abs_diff(*a[p], *b[p]), 0.0);
}

TEST(Train, RejectsBadConfig) {
  const Dataset ds = small_set(2, 2, 2, 4, 32);
  Model model = small_model(ds, false);
  TrainConfig tc;
  tc.batch_size = 0;
  EXPECT_THROW(train(model, tc, ds), std::invalid_argument);
  tc.batch_size = 4;
  tc.learning_rate = -1.0;
  EXPECT_THROW(train(model, tc, ds), std::invalid_argument);
  tc.learning_rate = 0.01;
  Dataset other = ds;
  other.noise_power *= 2.0;
  const WmmseCache cache = build_wmmse_cache(other);
  EXPECT_THROW(train(model, tc, ds, &other, &cache), std::invalid_argument);
}

TEST(Train, NonFiniteLossAbortsWithLastGoodModel) {
  const Dataset ds = small_set(2, 2, 2, 8, 33);
  Model model = small_model(ds, false);
  model.params.layers[0].o1_tilde[0] = cplx(std::numeric_limits<double>::quiet_NaN(), 0.0);
  const Model before = model;
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(model, tc, ds);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    EXPECT_EQ(e.last_good.params.layers.size(), before.params.layers.size());
  }
}

TEST(Evaluate, ReferencePolicyScoresOne) {
  const Dataset ds = small_set(3, 3, 4, 6, 34);
  const WmmseCache cache = build_wmmse_cache(ds);
  const auto r = evaluate_policy(
      [&](const Sample& s) { return wmmse(s.h, s.assoc, ds.power_budget, ds.noise_power).v; }, ds, cache);
  EXPECT_EQ(r.mean_norm_rate, 1.0);
}

TEST(Evaluate, MrtMatchesBaselineRatio) {
  const Dataset ds = small_set(4, 3, 8, 10, 35);
  const WmmseCache cache = build_wmmse_cache(ds);
  const auto r = evaluate_policy([&](const Sample& s) { return mrt(s.h, s.assoc, ds.power_budget); }, ds, cache, 2);
  double mean = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    const double direct = normalized_sum_rate(mrt(s.h, s.assoc, ds.power_budget),
                                              wmmse(s.h, s.assoc, ds.power_budget, ds.noise_power).v, s.h, s.assoc,
                                              ds.noise_power);
    EXPECT_NEAR(r.ratios[i], direct, 1e-12);
    mean += direct;
  }
  EXPECT_NEAR(r.mean_norm_rate, mean / static_cast<double>(ds.size()), 1e-12);
}

TEST(Evaluate, MissingEntryNamesSample) {
  const Dataset ds = small_set(2, 2, 2, 3, 36);
  WmmseCache partial(dataset_digest(ds));
  partial.set(0, 1.0);
  partial.set(2, 1.0);
  try {
    evaluate(small_model(ds, false), ds, partial);
    FAIL() << "expected missing entry";
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("sample 1"), std::string::npos);
  }
}

TEST(Cache, TenSamplesTenEntriesMatchingFreshRuns) {
  const Dataset ds = small_set(4, 3, 8, 10, 37);
  const WmmseCache c = build_wmmse_cache(ds, {}, 3);
  EXPECT_EQ(c.size(), 10u);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    const double fresh = sum_rate(s.h, s.assoc, wmmse(s.h, s.assoc, ds.power_budget, ds.noise_power).v, ds.noise_power);
    EXPECT_LE(rel_diff(c.at(i), fresh), 1e-10);
  }
}

TEST(Cache, FileRoundTripAndIdempotentRebuild) {
  const Dataset ds = small_set(3, 2, 4, 5, 38);
  const auto path = temp_path("cache.json");
  const WmmseCache a = ensure_wmmse_cache(path, ds);
  const std::string first = read_file(path);
  const WmmseCache b = load_wmmse_cache(path);
  EXPECT_EQ(a.digest(), b.digest());
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_EQ(a.at(i), b.at(i));
  save_wmmse_cache(path, build_wmmse_cache(ds));
  EXPECT_EQ(read_file(path), first);
  std::filesystem::remove(path);
}

TEST(Cache, RefusesStaleDigest) {
  const Dataset ds = small_set(3, 2, 4, 4, 39);
  const Dataset other = small_set(3, 2, 4, 4, 40);
  const WmmseCache c = build_wmmse_cache(ds);
  EXPECT_NO_THROW(c.require_matches(ds));
  EXPECT_THROW(c.require_matches(other), std::runtime_error);
  EXPECT_THROW(evaluate(small_model(other, false), other, c), std::runtime_error);
  const auto path = temp_path("stale.json");
  save_wmmse_cache(path, c);
  const WmmseCache rebuilt = ensure_wmmse_cache(path, other);
  EXPECT_EQ(rebuilt.digest(), dataset_digest(other));
  std::filesystem::remove(path);
}
