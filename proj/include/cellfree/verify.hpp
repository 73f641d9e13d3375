#pragma once

// Self-checks behind `cellfree verify`: weight-sharing algebra, objective
// equivalence, model equivariance, gradients and file round-trips.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cellfree/aagnn.hpp"
#include "cellfree/baselines.hpp"
#include "cellfree/dataset.hpp"
#include "cellfree/equivariance.hpp"
#include "cellfree/objective.hpp"
#include "cellfree/training.hpp"

namespace cellfree::verify {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

inline cplx gaussian(Rng& rng) {
  std::normal_distribution<double> g;
  const double re = g(rng);
  return {re, g(rng)};
}

inline Tensor gaussian_tensor(Shape s, Rng& rng, double std_dev = 1.0) {
  Tensor t(std::move(s));
  for (auto& z : t.data()) z = std_dev * gaussian(rng);
  return t;
}

inline Association random_assoc(std::size_t K, std::size_t M, Rng& rng, bool every_ue_served) {
  std::bernoulli_distribution b(0.5);
  std::uniform_int_distribution<std::size_t> pick(0, M - 1);
  Association d(K, M);
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) d(k, m) = b(rng) ? 1 : 0;
    if (every_ue_served && d.serving_count(k) == 0) d(k, pick(rng)) = 1;
  }
  return d;
}

inline SharedWeightSpec random_spec(std::size_t N, std::size_t M, std::size_t K, Rng& rng) {
  SharedWeightSpec s{gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng)};
  s.N = N;
  s.M = M;
  s.K = K;
  return s;
}

inline double rel(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

}  // namespace detail

/// Brute-force commutant dimensions against the six-orbit count.
inline std::vector<CheckResult> commutant_checks() {
  const std::vector<std::pair<std::array<std::size_t, 3>, std::size_t>> cases = {
      {{2, 2, 2}, 6}, {{3, 2, 2}, 6}, {{2, 3, 2}, 6}, {{2, 2, 3}, 6}, {{1, 1, 2}, 2}, {{1, 1, 1}, 1}};
  std::vector<CheckResult> out;
  for (const auto& [nmk, expected] : cases) {
    const std::size_t got = commutant_dimension(nmk[0], nmk[1], nmk[2]);
    out.push_back({"commutant_dim_N" + std::to_string(nmk[0]) + "_M" + std::to_string(nmk[1]) + "_K" +
                       std::to_string(nmk[2]),
                   got == expected, "got " + std::to_string(got) + ", expected " + std::to_string(expected)});
  }
  return out;
}

/// Shared weights commute exactly with random triples at (3,3,3).
inline CheckResult weight_sharing_check(std::size_t trials = 50, std::uint64_t seed = 7) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto W = materialize_weight(detail::random_spec(3, 3, 3, rng));
    worst = std::max(worst, check_commutation(W, PermTriple::random(3, 3, 3, rng)));
  }
  return {"weight_sharing_commutation", worst == 0.0,
          std::to_string(trials) + " triples, max residual " + detail::num(worst)};
}

/// A single broken tie must be caught by some generator.
inline CheckResult broken_tie_check(std::uint64_t seed = 9) {
  Rng rng(seed);
  auto W = materialize_weight(detail::random_spec(2, 2, 2, rng));
  W(0, 1) += 0.25;
  double worst = 0.0;
  for (const auto& g : generating_triples(2, 2, 2)) worst = std::max(worst, check_commutation(W, g));
  return {"broken_tie_detected", worst > 0.0, "residual " + detail::num(worst)};
}

/// Direct and masked-channel SINR agree on random instances with K, M, N in 1..4.
inline CheckResult objective_equivalence_check(std::size_t trials = 1000, std::uint64_t seed = 4) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  std::uniform_real_distribution<double> lognoise(-3, 1);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t K = dim(rng), M = dim(rng), N = dim(rng);
    const Tensor h = detail::gaussian_tensor({K, M, N}, rng);
    const Tensor v = detail::gaussian_tensor({K, M, N}, rng);
    const Association d = detail::random_assoc(K, M, rng, false);
    const double noise = std::pow(10.0, lognoise(rng));
    const auto [hd, hb] = masked_channels(h, d);
    const auto a = sinr_direct(h, d, v, noise);
    const auto b = sinr_masked(hd, hb, v, noise);
    for (std::size_t k = 0; k < K; ++k) worst = std::max(worst, detail::rel(a[k], b[k]));
  }
  return {"masked_objective_equivalence", worst <= 1e-10,
          std::to_string(trials) + " instances, max relative deviation " + detail::num(worst)};
}

/// Model as a policy on stacked masked channels.
inline StackedPolicy model_policy(const Model& m, std::size_t M, std::size_t N) {
  return [&m, M, N](const Eigen::MatrixXcd& hd, const Eigen::MatrixXcd& hb) {
    const Tensor td = unstack(hd, M, N);
    const Tensor tb = unstack(hb, M, N);
    return stack(predict(m, td + tb, reconstruct_association(td, tb), 1.0));
  };
}

/// Largest relative equivariance deviation of `m` over random triples at (K, M, N).
inline double model_equivariance_deviation(const Model& m, std::size_t K, std::size_t M, std::size_t N,
                                           std::size_t trials, std::uint64_t seed, double channel_scale = 1.0) {
  Rng rng(seed);
  const auto f = model_policy(m, M, N);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const Tensor h = detail::gaussian_tensor({K, M, N}, rng, channel_scale);
    const auto [hd, hb] = masked_channels(h, detail::random_assoc(K, M, rng, true));
    const auto r = check_policy_equivariance(f, stack(hd), stack(hb), PermTriple::random(N, M, K, rng), 1e-6);
    worst = std::max(worst, r.max_deviation);
  }
  return worst;
}

/// Model with random weights, including the attention coefficients.
inline Model random_model(bool attention, std::uint64_t seed, std::size_t F = 4, std::size_t L = 3) {
  ModelConfig cfg;
  cfg.features = F;
  cfg.layers = L;
  cfg.attention = attention;
  cfg.seed = seed;
  Model m = init_model(cfg, 1.0);
  Rng rng(seed + 99);
  for (auto& l : m.params.layers) {
    l.alpha = detail::gaussian_tensor({F}, rng, 0.3);
    l.beta = detail::gaussian_tensor({F}, rng, 0.3);
  }
  return m;
}

inline CheckResult model_equivariance_check(bool attention, std::size_t trials = 100, std::uint64_t seed = 12) {
  const double dev = model_equivariance_deviation(random_model(attention, seed), 3, 3, 2, trials, seed);
  return {std::string("model_equivariance_") + (attention ? "attention" : "plain"), dev <= 1e-6,
          std::to_string(trials) + " triples, max relative deviation " + detail::num(dev)};
}

/// Relative finite-difference error of the full model's -sum-rate gradient at K=M=N=F=L=2.
inline double model_gradient_error(bool attention, std::uint64_t seed = 21) {
  const Model m = random_model(attention, seed, 2, 2);
  Rng rng(seed + 1);
  const Tensor h = detail::gaussian_tensor({2, 2, 2}, rng);
  Association d(2, 2, 1);
  d(1, 0) = 0;
  const double noise = 0.5;
  std::vector<Tensor> params;
  for (const auto* t : m.params.tensors()) params.push_back(*t);
  const ad::TapeFunction f = [&](ad::Tape& tape, const std::vector<ad::Var>& p) {
    const ModelVars vars = structure(p, m.config.layers);
    const ad::Var v = forward(tape, m.config, vars, 1.0, h, d, 1.0);
    return ad::scale(tape_sum_rate(tape, v, h, d, noise), -1.0);
  };
  return ad::grad_check(f, params, 1e-5).max_rel_error;
}

inline CheckResult gradient_check(bool attention) {
  const double err = model_gradient_error(attention);
  return {std::string("model_gradient_") + (attention ? "attention" : "plain"), err <= 1e-5,
          "K=M=N=F=L=2, max relative error " + detail::num(err)};
}

inline CheckResult dataset_roundtrip_check() {
  GeometryConfig cfg;
  const Dataset ds = generate_dataset(cfg, 8, 3);
  const std::string bytes = serialize_cfds(ds);
  const Dataset back = deserialize_cfds(bytes);
  bool same = back.size() == ds.size() && serialize_cfds(back) == bytes;
  for (std::size_t i = 0; same && i < ds.size(); ++i)
    same = back.samples[i].h == ds.samples[i].h && back.samples[i].assoc == ds.samples[i].assoc;
  return {"dataset_roundtrip", same, std::to_string(ds.size()) + " samples, " + std::to_string(bytes.size()) + " bytes"};
}

inline CheckResult checkpoint_roundtrip_check() {
  Model m = random_model(true, 8);
  m.params.input_scale = 3.7e-5;
  m.config.input_exponent = 0.5;
  const std::string text = model_to_json(m).dump();
  const Model back = model_from_json(nlohmann::json::parse(text));
  bool same = model_to_json(back).dump() == text;
  const auto a = m.params.tensors();
  const auto b = back.params.tensors();
  same = same && a.size() == b.size();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = *a[i] == *b[i];
  return {"checkpoint_roundtrip", same, std::to_string(m.params.parameter_count()) + " parameters"};
}

/// WMMSE objective monotonicity and per-AP feasibility on random small instances.
inline CheckResult wmmse_check(std::size_t trials = 20, std::uint64_t seed = 12) {
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  double worst_drop = 0.0, worst_power = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t K = dim(rng), M = dim(rng), N = dim(rng);
    const Tensor h = detail::gaussian_tensor({K, M, N}, rng);
    const Association d = detail::random_assoc(K, M, rng, true);
    const auto res = wmmse(h, d, 1.0, 0.05);
    const auto& r = res.trace.sum_rates;
    for (std::size_t i = 1; i < r.size(); ++i) worst_drop = std::max(worst_drop, r[i - 1] - r[i]);
    for (double p : per_ap_power(res.v)) worst_power = std::max(worst_power, p - 1.0);
  }
  return {"wmmse_monotone_feasible", worst_drop <= 1e-8 && worst_power <= 1e-8,
          std::to_string(trials) + " instances, max drop " + detail::num(worst_drop) + ", max excess power " +
              detail::num(worst_power)};
}

/// Every check, in report order.
inline std::vector<CheckResult> run_all() {
  std::vector<CheckResult> out = commutant_checks();
  out.push_back(weight_sharing_check());
  out.push_back(broken_tie_check());
  out.push_back(objective_equivalence_check());
  out.push_back(model_equivariance_check(true));
  out.push_back(model_equivariance_check(false));
  out.push_back(gradient_check(true));
  out.push_back(gradient_check(false));
  out.push_back(wmmse_check());
  out.push_back(dataset_roundtrip_check());
  out.push_back(checkpoint_roundtrip_check());
  return out;
}

}  // namespace cellfree::verify
