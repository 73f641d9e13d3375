#pragma once

// SINR, sum rate and per-AP power of a precoder v (K x M x N, same indexing as h).

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cellfree/scenario.hpp"
#include "cellfree/tensor.hpp"

namespace cellfree {

struct RateReport {
  std::vector<double> sinr;
  std::vector<double> rates;  // nats
  double sum_rate = 0.0;      // nats
};

namespace detail {
inline void check_kmn(const Tensor& a, const Tensor& b, const char* who) {
  if (a.rank() != 3 || a.shape() != b.shape()) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}
}  // namespace detail

/// gamma_k = |sum_m h_km^H d_km v_km|^2 / (sum_{i!=k} |sum_m h_km^H d_im v_im|^2 + noise).
inline std::vector<double> sinr_direct(const Tensor& h, const Association& d, const Tensor& v, double noise) {
  detail::check_kmn(h, v, "sinr_direct");
  const std::size_t K = h.dim(0), M = h.dim(1), N = h.dim(2);
  if (d.ues() != K || d.aps() != M) throw std::invalid_argument("sinr_direct: association shape mismatch");
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    double signal = 0.0, interference = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      cplx acc{};
      for (std::size_t m = 0; m < M; ++m) {
        if (!d(i, m)) continue;
        for (std::size_t n = 0; n < N; ++n) acc += std::conj(h(k, m, n)) * v(i, m, n);
      }
      if (i == k)
        signal = std::norm(acc);
      else
        interference += std::norm(acc);
    }
    out[k] = signal / (interference + noise);
  }
  return out;
}

/// The same SINR written on the masked channels, with the association of each
/// block recovered as ||h~|| / ||h~ + h^|| (0/0 taken as 0).
inline std::vector<double> sinr_masked(const Tensor& hd, const Tensor& hb, const Tensor& v, double noise) {
  detail::check_kmn(hd, v, "sinr_masked");
  detail::check_kmn(hb, v, "sinr_masked");
  const std::size_t K = v.dim(0), M = v.dim(1), N = v.dim(2);
  std::vector<double> ratio(K * M);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t m = 0; m < M; ++m) {
      double num = 0.0, den = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        num += std::norm(hd(i, m, n));
        den += std::norm(hd(i, m, n) + hb(i, m, n));
      }
      ratio[i * M + m] = den > 0.0 ? std::sqrt(num) / std::sqrt(den) : 0.0;
    }
  std::vector<double> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    cplx sig{};
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) sig += std::conj(hd(k, m, n)) * v(k, m, n);
    double interference = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
      if (i == k) continue;
      cplx acc{};
      for (std::size_t m = 0; m < M; ++m) {
        cplx inner{};
        for (std::size_t n = 0; n < N; ++n) inner += std::conj(hd(k, m, n) + hb(k, m, n)) * v(i, m, n);
        acc += inner * ratio[i * M + m];
      }
      interference += std::norm(acc);
    }
    out[k] = std::norm(sig) / (interference + noise);
  }
  return out;
}

/// sum_k ln(1 + gamma_k), in nats.
inline double sum_rate(const std::vector<double>& sinr) {
  double s = 0.0;
  for (double g : sinr) {
    if (g < 0.0) throw std::invalid_argument("sum_rate: negative SINR");
    s += std::log1p(g);
  }
  return s;
}

inline RateReport rate_report(const Tensor& h, const Association& d, const Tensor& v, double noise) {
  RateReport r;
  r.sinr = sinr_direct(h, d, v, noise);
  r.rates.reserve(r.sinr.size());
  for (double g : r.sinr) r.rates.push_back(std::log1p(g));
  r.sum_rate = std::accumulate(r.rates.begin(), r.rates.end(), 0.0);
  return r;
}

inline double sum_rate(const Tensor& h, const Association& d, const Tensor& v, double noise) {
  return sum_rate(sinr_direct(h, d, v, noise));
}

/// sum_k ||v_km||^2 for each AP m.
inline std::vector<double> per_ap_power(const Tensor& v) {
  if (v.rank() != 3) throw std::invalid_argument("per_ap_power: precoder must be K x M x N");
  std::vector<double> p(v.dim(1), 0.0);
  for (std::size_t k = 0; k < v.dim(0); ++k)
    for (std::size_t m = 0; m < v.dim(1); ++m)
      for (std::size_t n = 0; n < v.dim(2); ++n) p[m] += std::norm(v(k, m, n));
  return p;
}

/// Scales each AP whose power exceeds P down to exactly P; feasible APs are untouched.
inline Tensor project_per_ap(Tensor v, double P) {
  if (!(P > 0.0)) throw std::invalid_argument("project_per_ap: P must be positive");
  const auto p = per_ap_power(v);
  for (std::size_t m = 0; m < p.size(); ++m) {
    if (p[m] <= P) continue;
    const double s = std::sqrt(P / p[m]);
    for (std::size_t k = 0; k < v.dim(0); ++k)
      for (std::size_t n = 0; n < v.dim(2); ++n) v(k, m, n) *= s;
  }
  return v;
}

}  // namespace cellfree
