#include <gtest/gtest.h>

#include <cmath>

#include "cellfree/objective.hpp"
#include "cellfree/scenario.hpp"
#include "test_util.hpp"

using namespace cellfree;
using fixtures::rel_diff;

namespace {

// Scalar-loop SINR, written against flat indices rather than Tensor accessors.
std::vector<double> sinr_oracle(const Tensor& h, const Association& d, const Tensor& v, double noise) {
  const std::size_t K = h.dim(0), M = h.dim(1), N = h.dim(2);
  const auto at = [&](const Tensor& t, std::size_t k, std::size_t m, std::size_t n) {
    return t.data()[(k * M + m) * N + n];
  };
  std::vector<double> out;
  for (std::size_t k = 0; k < K; ++k) {
    double re_s = 0, im_s = 0, interf = 0;
    for (std::size_t i = 0; i < K; ++i) {
      double re = 0, im = 0;
      for (std::size_t m = 0; m < M; ++m)
        for (std::size_t n = 0; n < N; ++n) {
          const cplx a = at(h, k, m, n), b = at(v, i, m, n);
          const double dd = d.raw()[i * M + m];
          re += dd * (a.real() * b.real() + a.imag() * b.imag());
          im += dd * (a.real() * b.imag() - a.imag() * b.real());
        }
      if (i == k) {
        re_s = re;
        im_s = im;
      } else {
        interf += re * re + im * im;
      }
    }
    out.push_back((re_s * re_s + im_s * im_s) / (interf + noise));
  }
  return out;
}

}  // namespace

TEST(SinrDirect, SingleUeHasNoInterference) {
  Rng rng(1);
  const Tensor h = fixtures::random_tensor({1, 3, 2}, rng);
  const Tensor v = fixtures::random_tensor({1, 3, 2}, rng);
  Association d(1, 3, 1);
  d(0, 1) = 0;
  cplx s{};
  for (std::size_t m : {0u, 2u})
    for (std::size_t n = 0; n < 2; ++n) s += std::conj(h(0, m, n)) * v(0, m, n);
  EXPECT_NEAR(sinr_direct(h, d, v, 0.3)[0], std::norm(s) / 0.3, 1e-12 * std::norm(s) / 0.3);
}

TEST(SinrDirect, EmptyAssociationGivesZero) {
  Rng rng(2);
  const Tensor h = fixtures::random_tensor({3, 2, 2}, rng);
  const Tensor v = fixtures::random_tensor({3, 2, 2}, rng);
  for (double g : sinr_direct(h, Association(3, 2), v, 1.0)) EXPECT_EQ(g, 0.0);
}

TEST(SinrDirect, MatchesScalarLoop) {
  Rng rng(3);
  for (int t = 0; t < 50; ++t) {
    const Tensor h = fixtures::random_tensor({3, 2, 2}, rng);
    const Tensor v = fixtures::random_tensor({3, 2, 2}, rng);
    const Association d = fixtures::random_assoc(3, 2, rng);
    const auto a = sinr_direct(h, d, v, 0.7);
    const auto b = sinr_oracle(h, d, v, 0.7);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(rel_diff(a[k], b[k]), 1e-12);
  }
}

TEST(SinrMasked, EquivalentToDirectOnRandomInstances) {
  Rng rng(4);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  std::uniform_real_distribution<double> lognoise(-3, 1);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t K = dim(rng), M = dim(rng), N = dim(rng);
    const Tensor h = fixtures::random_tensor({K, M, N}, rng);
    const Tensor v = fixtures::random_tensor({K, M, N}, rng);
    const Association d = fixtures::random_assoc(K, M, rng);
    const double noise = std::pow(10.0, lognoise(rng));
    const auto [hd, hb] = masked_channels(h, d);
    const auto a = sinr_direct(h, d, v, noise);
    const auto b = sinr_masked(hd, hb, v, noise);
    for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, rel_diff(a[k], b[k]));
  }
  EXPECT_LE(worst, 1e-10);
}

TEST(SinrMasked, FullAssociationReducesToDirect) {
  Rng rng(5);
  const Tensor h = fixtures::random_tensor({3, 2, 3}, rng);
  const Tensor v = fixtures::random_tensor({3, 2, 3}, rng);
  const auto a = sinr_masked(h, Tensor(h.shape()), v, 0.5);
  const auto b = sinr_direct(h, Association(3, 2, 1), v, 0.5);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(rel_diff(a[k], b[k]), 1e-12);
}

TEST(SinrMasked, ZeroBlockUsesZeroRatio) {
  Rng rng(6);
  Tensor h = fixtures::random_tensor({2, 2, 2}, rng);
  const Tensor v = fixtures::random_tensor({2, 2, 2}, rng);
  for (std::size_t n = 0; n < 2; ++n) h(1, 0, n) = 0.0;
  Association d(2, 2, 1);
  const auto [hd, hb] = masked_channels(h, d);
  const auto g = sinr_masked(hd, hb, v, 0.1);
  Association d0 = d;
  d0(1, 0) = 0;
  const auto want = sinr_direct(h, d0, v, 0.1);
  for (std::size_t k = 0; k < 2; ++k) {
    EXPECT_TRUE(std::isfinite(g[k]));
    EXPECT_LE(rel_diff(g[k], want[k]), 1e-12);
  }
}

TEST(SinrDirect, NoiselessSinrIsScaleInvariant) {
  Rng rng(7);
  const Tensor h = fixtures::random_tensor({3, 2, 2}, rng);
  Tensor v = fixtures::random_tensor({3, 2, 2}, rng);
  const Association d(3, 2, 1);
  const auto a = sinr_direct(h, d, v, 0.0);
  v *= cplx(2.5);
  const auto b = sinr_direct(h, d, v, 0.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(rel_diff(a[k], b[k]), 1e-14);
}

TEST(SumRate, ReferenceValues) {
  EXPECT_EQ(sum_rate(std::vector<double>{0.0, 0.0, 0.0}), 0.0);
  EXPECT_NEAR(sum_rate(std::vector<double>{std::exp(1.0) - 1.0}), 1.0, 1e-15);
  EXPECT_THROW(sum_rate(std::vector<double>{-0.1}), std::invalid_argument);
  const std::vector<double> g = {0.3, 1.2};
  EXPECT_GT(sum_rate(std::vector<double>{0.3, 1.2 + 1e-9}), sum_rate(g));
}

TEST(RateReport, Consistent) {
  Rng rng(8);
  const Tensor h = fixtures::random_tensor({3, 2, 2}, rng);
  const Tensor v = fixtures::random_tensor({3, 2, 2}, rng);
  const auto r = rate_report(h, Association(3, 2, 1), v, 0.2);
  double s = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_GE(r.sinr[k], 0.0);
    EXPECT_EQ(r.rates[k], std::log1p(r.sinr[k]));
    s += r.rates[k];
  }
  EXPECT_DOUBLE_EQ(r.sum_rate, s);
}

TEST(PerApPower, Values) {
  EXPECT_EQ(per_ap_power(Tensor({2, 3, 2})), std::vector<double>(3, 0.0));
  const double P = 1.7;
  const std::size_t K = 4;
  Tensor v({K, 2, 3});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < 2; ++m) v(k, m, (k + m) % 3) = std::sqrt(P / K);
  for (double p : per_ap_power(v)) EXPECT_NEAR(p, P, 1e-15);

  Rng rng(9);
  const Tensor w = fixtures::random_tensor({3, 4, 2}, rng);
  const auto p = per_ap_power(w);
  for (std::size_t m = 0; m < 4; ++m) {
    double acc = 0.0;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t n = 0; n < 2; ++n) {
        const cplx z = w.data()[(k * 4 + m) * 2 + n];
        acc += z.real() * z.real() + z.imag() * z.imag();
      }
    EXPECT_LE(rel_diff(p[m], acc), 1e-12);
  }
}

TEST(ProjectPerAp, Behaviour) {
  Rng rng(10);
  Tensor v = fixtures::random_tensor({2, 3, 2}, rng, 0.1);
  const auto before = per_ap_power(v);
  const double P = 1.0;
  EXPECT_EQ(project_per_ap(v, P), v);

  // AP 1 at exactly 4P, the rest feasible.
  Tensor w = v;
  const double s = std::sqrt(4.0 * P / before[1]);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t n = 0; n < 2; ++n) w(k, 1, n) *= s;
  const Tensor pw = project_per_ap(w, P);
  const auto after = per_ap_power(pw);
  EXPECT_NEAR(after[1], P, 1e-12);
  EXPECT_EQ(after[0], before[0]);
  EXPECT_EQ(after[2], before[2]);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t n = 0; n < 2; ++n) EXPECT_LE(std::abs(pw(k, 1, n) - 0.5 * w(k, 1, n)), 1e-15);

  const Tensor twice = project_per_ap(pw, P);
  EXPECT_EQ(twice, pw);
  for (std::size_t m = 0; m < 3; ++m) EXPECT_LE(per_ap_power(twice)[m], per_ap_power(w)[m]);
  EXPECT_THROW(project_per_ap(v, 0.0), std::invalid_argument);
}
