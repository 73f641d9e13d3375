#include <gtest/gtest.h>

#include <cmath>

#include "cellfree/dataset.hpp"
#include "cellfree/scenario.hpp"
#include "test_util.hpp"

using namespace cellfree;

TEST(PlaceAps, FourApSquare) {
  const auto aps = place_aps(4, 400.0);
  const std::vector<Point> want = {{-200, -200}, {200, -200}, {-200, 200}, {200, 200}};
  EXPECT_EQ(aps, want);
}

TEST(PlaceAps, SingleApAtOrigin) { EXPECT_EQ(place_aps(1, 400.0), (std::vector<Point>{{0, 0}})); }

TEST(PlaceAps, SevenApsFillThreeByThreeGrid) {
  const auto aps = place_aps(7, 400.0);
  ASSERT_EQ(aps.size(), 7u);
  const std::vector<Point> want = {{-400, -400}, {0, -400}, {400, -400}, {-400, 0},
                                   {0, 0},       {400, 0},  {-400, 400}};
  EXPECT_EQ(aps, want);
  for (const auto& a : aps)
    for (const auto& b : aps) {
      EXPECT_DOUBLE_EQ(std::fmod(std::abs(a.x - b.x), 400.0), 0.0);
      EXPECT_DOUBLE_EQ(std::fmod(std::abs(a.y - b.y), 400.0), 0.0);
    }
}

TEST(PlaceAps, RejectsBadInput) {
  EXPECT_THROW(place_aps(0, 400.0), std::invalid_argument);
  EXPECT_THROW(place_aps(3, 0.0), std::invalid_argument);
}

TEST(SampleUes, EveryUeIsServed) {
  Rng rng(3);
  for (std::size_t M : {1u, 2u, 4u, 7u}) {
    const auto aps = place_aps(M);
    const auto ues = sample_ues(aps, 200, rng);
    const auto d = associate(aps, ues);
    for (std::size_t k = 0; k < ues.size(); ++k) {
      double best = 1e9;
      for (const auto& a : aps) best = std::min(best, distance(ues[k], a));
      EXPECT_LE(best, kDiscRadius);
      EXPECT_GE(d.serving_count(k), 1u);
    }
  }
}

TEST(SampleUes, UniformDiscMeanRadius) {
  Rng rng(11);
  const auto aps = place_aps(1);
  const auto ues = sample_ues(aps, 1000, rng);
  double mean = 0.0;
  for (const auto& u : ues) mean += distance(u, aps[0]);
  mean /= 1000.0;
  const double expected = 2.0 / 3.0 * 400.0 / std::sqrt(3.0);  // 153.96 m
  EXPECT_NEAR(mean, expected, 0.05 * expected);
}

TEST(SampleUes, Deterministic) {
  Rng a(99), b(99);
  const auto aps = place_aps(4);
  EXPECT_EQ(sample_ues(aps, 50, a), sample_ues(aps, 50, b));
}

TEST(Associate, ThresholdIsInclusive) {
  const std::vector<Point> aps = {{0, 0}};
  EXPECT_EQ(associate(aps, {{0, 0}})(0, 0), 1);
  EXPECT_EQ(associate(aps, {{299.99, 0}})(0, 0), 1);
  EXPECT_EQ(associate(aps, {{300.0, 0}})(0, 0), 1);
  EXPECT_EQ(associate(aps, {{300.01, 0}})(0, 0), 0);
}

TEST(Associate, OriginUeSeesAllFourAps) {
  const auto d = associate(place_aps(4), {{0, 0}});
  for (std::size_t m = 0; m < 4; ++m) EXPECT_EQ(d(0, m), 1);
  EXPECT_NEAR(distance({0, 0}, {200, 200}), 282.84, 0.01);
}

TEST(PathLoss, ReferenceValues) {
  EXPECT_DOUBLE_EQ(path_loss_db(1.0), 13.54);
  EXPECT_NEAR(path_loss_db(10.0), 52.62, 1e-12);
  EXPECT_NEAR(path_loss_db(100.0), 91.70, 1e-12);
  EXPECT_DOUBLE_EQ(path_loss_db(0.2), 13.54);  // clamped
}

TEST(PathLoss, MonotoneAboveOneMetre) {
  double prev = path_loss_db(1.0);
  for (double d = 1.5; d < 2000.0; d *= 1.3) {
    const double cur = path_loss_db(d);
    EXPECT_GT(cur, prev);
    prev = cur;
  }
}

TEST(NoisePower, Calibration) {
  const double pl = path_loss_db(kDiscRadius);
  EXPECT_NEAR(noise_power(1.0, 0.0) / std::pow(10.0, -pl / 10.0), 1.0, 1e-12);
  EXPECT_NEAR(noise_power(2.0, 10.0) / noise_power(1.0, 10.0), 2.0, 1e-12);
  EXPECT_NEAR(noise_power(1.0, 10.0) / std::pow(10.0, -pl / 10.0 - 1.0), 1.0, 1e-12);
  EXPECT_THROW(noise_power(0.0, 10.0), std::invalid_argument);
}

TEST(SampleChannel, SecondMomentsMatchPathGain) {
  Scenario sc;
  sc.ap_positions = {{0, 0}, {150, 0}};
  sc.ue_positions = {{40, 30}};
  sc.assoc = associate(sc.ap_positions, sc.ue_positions);
  sc.n_antennas = 4;
  Rng rng(5);
  const int draws = 10000;
  std::vector<double> energy(2, 0.0), re2(2, 0.0), im2(2, 0.0);
  for (int t = 0; t < draws; ++t) {
    const auto ch = sample_channel(sc, rng);
    for (std::size_t m = 0; m < 2; ++m)
      for (std::size_t n = 0; n < 4; ++n) {
        const cplx z = ch.h(0, m, n);
        energy[m] += std::norm(z);
        re2[m] += z.real() * z.real();
        im2[m] += z.imag() * z.imag();
      }
  }
  for (std::size_t m = 0; m < 2; ++m) {
    const double g = path_gain(distance(sc.ue_positions[0], sc.ap_positions[m]));
    EXPECT_NEAR(energy[m] / draws / (4.0 * g), 1.0, 0.03);
    EXPECT_NEAR(re2[m] / (draws * 4.0) / (g / 2.0), 1.0, 0.03);
    EXPECT_NEAR(im2[m] / (draws * 4.0) / (g / 2.0), 1.0, 0.03);
  }
}

TEST(SampleChannel, Deterministic) {
  GeometryConfig cfg;
  Rng a(42), b(42);
  const auto sa = make_scenario(cfg, a);
  const auto sb = make_scenario(cfg, b);
  EXPECT_EQ(sa.ue_positions, sb.ue_positions);
  EXPECT_EQ(sa.assoc, sb.assoc);
  EXPECT_EQ(sample_channel(sa, a).h, sample_channel(sb, b).h);
}

TEST(MaskedChannels, FullAssociation) {
  Rng rng(1);
  const Tensor h = fixtures::random_tensor({3, 2, 2}, rng);
  const auto [hd, hb] = masked_channels(h, Association(3, 2, 1));
  EXPECT_EQ(hd, h);
  EXPECT_EQ(hb.max_abs(), 0.0);
}

TEST(MaskedChannels, ComplementaryAndRecoverable) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor h = fixtures::random_tensor({4, 3, 2}, rng);
    const Association d = fixtures::random_assoc(4, 3, rng);
    const auto [hd, hb] = masked_channels(h, d);
    EXPECT_EQ(hd + hb, h);
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(hd[i] * std::conj(hb[i]), cplx{});
    EXPECT_EQ(reconstruct_association(hd, hb), d);
    for (std::size_t k = 0; k < 4; ++k)
      for (std::size_t m = 0; m < 3; ++m) {
        double num = 0.0, den = 0.0;
        for (std::size_t n = 0; n < 2; ++n) {
          num += std::norm(hd(k, m, n));
          den += std::norm(h(k, m, n));
        }
        EXPECT_EQ(std::sqrt(num) / std::sqrt(den), d.mask(k, m));
      }
  }
}

TEST(Scenario, AssociationFeasibleUnderDefaultGeometry) {
  for (std::size_t M : {1u, 3u, 4u, 5u, 7u}) {
    GeometryConfig cfg;
    cfg.M = M;
    cfg.K = 16;
    for (std::uint64_t i = 0; i < 50; ++i) {
      Rng rng = stream_rng(17, i);
      const auto sc = make_scenario(cfg, rng);
      for (std::size_t k = 0; k < cfg.K; ++k) EXPECT_GE(sc.assoc.serving_count(k), 1u);
    }
  }
}

TEST(Dataset, GenerationIndependentOfCount) {
  GeometryConfig cfg;
  const auto a = generate_dataset(cfg, 5, 7);
  const auto b = generate_dataset(cfg, 8, 7);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.samples[i].h, b.samples[i].h);
    EXPECT_EQ(a.samples[i].assoc, b.samples[i].assoc);
  }
}

TEST(Dataset, CfdsRoundTripIsBitExact) {
  GeometryConfig cfg;
  cfg.K = 3;
  cfg.M = 2;
  cfg.N = 2;
  const auto ds = generate_dataset(cfg, 6, 3);
  const auto bytes = serialize_cfds(ds);
  const auto back = deserialize_cfds(bytes);
  EXPECT_EQ(serialize_cfds(back), bytes);
  ASSERT_EQ(back.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(back.samples[i].h, ds.samples[i].h);
    EXPECT_EQ(back.samples[i].assoc, ds.samples[i].assoc);
  }
  EXPECT_EQ(back.noise_power, ds.noise_power);
  // header line then exactly count * (K*M + K*M*N*16) payload bytes
  const auto nl = bytes.find('\n');
  EXPECT_EQ(bytes.size() - nl - 1, 6u * (6u + 12u * 16u));
  auto hdr = nlohmann::json::parse(bytes.substr(0, nl));
  EXPECT_EQ(hdr["dtype"], "c128");
  EXPECT_EQ(hdr["ordering"], "k-major then m then n");
}

TEST(Dataset, CorruptPayloadRejected) {
  GeometryConfig cfg;
  auto bytes = serialize_cfds(generate_dataset(cfg, 2, 1));
  bytes.pop_back();
  EXPECT_THROW(deserialize_cfds(bytes), std::runtime_error);
}
