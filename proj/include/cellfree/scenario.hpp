#pragma once

// Cell-free deployment geometry, UE-AP association and Rayleigh channels.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cellfree/tensor.hpp"

namespace cellfree {

inline constexpr double kInterSiteDistance = 400.0;
inline const double kDiscRadius = 400.0 / std::sqrt(3.0);
inline constexpr double kServingRadius = 300.0;

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent generator for sample `index` of a stream seeded by `seed`.
/// Streams for different indices do not depend on generation order.
inline Rng stream_rng(std::uint64_t seed, std::uint64_t index) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(index + 0x51ed270b27b5d4a1ULL)));
}

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance(Point a, Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// Binary K x M UE-AP association matrix (d_km = 1 iff AP m serves UE k).
class Association {
 public:
  Association() = default;
  Association(std::size_t K, std::size_t M, std::uint8_t fill = 0) : K_(K), M_(M), d_(K * M, fill) {}
  Association(std::size_t K, std::size_t M, std::vector<std::uint8_t> d) : K_(K), M_(M), d_(std::move(d)) {
    if (d_.size() != K * M) throw std::invalid_argument("Association: size mismatch");
    for (auto v : d_)
      if (v > 1) throw std::invalid_argument("Association: entries must be 0 or 1");
  }

  std::size_t ues() const noexcept { return K_; }
  std::size_t aps() const noexcept { return M_; }
  std::uint8_t operator()(std::size_t k, std::size_t m) const { return d_[k * M_ + m]; }
  std::uint8_t& operator()(std::size_t k, std::size_t m) { return d_[k * M_ + m]; }
  double mask(std::size_t k, std::size_t m) const { return d_[k * M_ + m] ? 1.0 : 0.0; }
  const std::vector<std::uint8_t>& raw() const noexcept { return d_; }

  std::size_t serving_count(std::size_t k) const {
    std::size_t c = 0;
    for (std::size_t m = 0; m < M_; ++m) c += d_[k * M_ + m];
    return c;
  }
  std::size_t served_count(std::size_t m) const {
    std::size_t c = 0;
    for (std::size_t k = 0; k < K_; ++k) c += d_[k * M_ + m];
    return c;
  }

  friend bool operator==(const Association&, const Association&) = default;

 private:
  std::size_t K_ = 0, M_ = 0;
  std::vector<std::uint8_t> d_;
};

struct Scenario {
  std::vector<Point> ap_positions;
  std::vector<Point> ue_positions;
  Association assoc;
  double power_budget = 1.0;
  double noise_power = 1.0;
  std::size_t n_antennas = 1;

  std::size_t ues() const { return ue_positions.size(); }
  std::size_t aps() const { return ap_positions.size(); }
};

/// Channel tensor h indexed (UE k, AP m, antenna n).
struct ChannelSet {
  Tensor h;
  std::size_t ues() const { return h.dim(0); }
  std::size_t aps() const { return h.dim(1); }
  std::size_t antennas() const { return h.dim(2); }
};

/// APs on a ceil(sqrt(M)) x ceil(sqrt(M)) grid with spacing `isd`, centred on
/// the origin, filled row-major.
inline std::vector<Point> place_aps(std::size_t M, double isd = kInterSiteDistance) {
  if (M == 0 || !(isd > 0.0)) throw std::invalid_argument("place_aps: need M >= 1 and isd > 0");
  const auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(M))));
  const double half = 0.5 * static_cast<double>(side - 1) * isd;
  std::vector<Point> out;
  out.reserve(M);
  for (std::size_t i = 0; i < M; ++i) {
    const std::size_t row = i / side, col = i % side;
    out.push_back({static_cast<double>(col) * isd - half, static_cast<double>(row) * isd - half});
  }
  return out;
}

/// K points uniform over the union of discs of radius `radius` around the APs,
/// by rejection from the union's bounding box.
inline std::vector<Point> sample_ues(const std::vector<Point>& aps, std::size_t K, Rng& rng,
                                     double radius = kDiscRadius) {
  if (aps.empty()) throw std::invalid_argument("sample_ues: no APs");
  double xmin = aps[0].x, xmax = aps[0].x, ymin = aps[0].y, ymax = aps[0].y;
  for (const auto& a : aps) {
    xmin = std::min(xmin, a.x);
    xmax = std::max(xmax, a.x);
    ymin = std::min(ymin, a.y);
    ymax = std::max(ymax, a.y);
  }
  std::uniform_real_distribution<double> ux(xmin - radius, xmax + radius);
  std::uniform_real_distribution<double> uy(ymin - radius, ymax + radius);
  std::vector<Point> out;
  out.reserve(K);
  while (out.size() < K) {
    const Point p{ux(rng), uy(rng)};
    for (const auto& a : aps) {
      if (distance(p, a) <= radius) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

inline Association associate(const std::vector<Point>& aps, const std::vector<Point>& ues,
                              double radius = kServingRadius) {
  if (aps.empty() || ues.empty()) throw std::invalid_argument("associate: empty positions");
  Association d(ues.size(), aps.size());
  for (std::size_t k = 0; k < ues.size(); ++k)
    for (std::size_t m = 0; m < aps.size(); ++m) d(k, m) = distance(ues[k], aps[m]) <= radius ? 1 : 0;
  return d;
}

/// Large-scale loss in dB; distances below 1 m are clamped to 1 m.
inline double path_loss_db(double d3d) { return 13.54 + 39.08 * std::log10(std::max(d3d, 1.0)); }

inline double path_gain(double d3d) { return std::pow(10.0, -path_loss_db(d3d) / 10.0); }

/// Noise power giving `edge_snr_db` for a UE at `edge_distance` from an AP
/// transmitting with power P.
inline double noise_power(double P, double edge_snr_db, double edge_distance = kDiscRadius) {
  if (!(P > 0.0)) throw std::invalid_argument("noise_power: P must be positive");
  return P * path_gain(edge_distance) / std::pow(10.0, edge_snr_db / 10.0);
}

/// h_km = sqrt(g_km) * e_km with e_km ~ CN(0, I_N).
inline ChannelSet sample_channel(const Scenario& sc, Rng& rng) {
  const std::size_t K = sc.ues(), M = sc.aps(), N = sc.n_antennas;
  std::normal_distribution<double> gauss(0.0, std::sqrt(0.5));
  ChannelSet ch{Tensor({K, M, N})};
  for (std::size_t k = 0; k < K; ++k) {
    for (std::size_t m = 0; m < M; ++m) {
      const double amp = std::sqrt(path_gain(distance(sc.ue_positions[k], sc.ap_positions[m])));
      for (std::size_t n = 0; n < N; ++n) {
        const double re = gauss(rng);
        const double im = gauss(rng);
        ch.h(k, m, n) = amp * cplx(re, im);
      }
    }
  }
  return ch;
}

/// (H_D, H_Dbar): channels with blocks kept where d_km = 1, resp. d_km = 0.
inline std::pair<Tensor, Tensor> masked_channels(const Tensor& h, const Association& d) {
  if (h.rank() != 3 || h.dim(0) != d.ues() || h.dim(1) != d.aps())
    throw std::invalid_argument("masked_channels: shape mismatch");
  Tensor hd(h.shape()), hb(h.shape());
  for (std::size_t k = 0; k < h.dim(0); ++k)
    for (std::size_t m = 0; m < h.dim(1); ++m)
      for (std::size_t n = 0; n < h.dim(2); ++n) {
        if (d(k, m))
          hd(k, m, n) = h(k, m, n);
        else
          hb(k, m, n) = h(k, m, n);
      }
  return {std::move(hd), std::move(hb)};
}

/// d_km = ||h~_km|| / ||h~_km + h^_km|| with 0/0 := 0.
inline Association reconstruct_association(const Tensor& hd, const Tensor& hb) {
  const std::size_t K = hd.dim(0), M = hd.dim(1), N = hd.dim(2);
  Association d(K, M);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m) {
      double num = 0.0, den = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        num += std::norm(hd(k, m, n));
        den += std::norm(hd(k, m, n) + hb(k, m, n));
      }
      d(k, m) = (den > 0.0 && std::sqrt(num / den) > 0.5) ? 1 : 0;
    }
  return d;
}

struct GeometryConfig {
  std::size_t K = 4;
  std::size_t M = 3;
  std::size_t N = 8;
  double power_budget = 1.0;
  double edge_snr_db = 5.0;
  double isd = kInterSiteDistance;
  double disc_radius = kDiscRadius;
  double serving_radius = kServingRadius;
};

/// One random UE drop with its association; AP layout and noise are fixed by `cfg`.
inline Scenario make_scenario(const GeometryConfig& cfg, Rng& rng) {
  Scenario sc;
  sc.ap_positions = place_aps(cfg.M, cfg.isd);
  sc.ue_positions = sample_ues(sc.ap_positions, cfg.K, rng, cfg.disc_radius);
  sc.assoc = associate(sc.ap_positions, sc.ue_positions, cfg.serving_radius);
  sc.power_budget = cfg.power_budget;
  sc.noise_power = noise_power(cfg.power_budget, cfg.edge_snr_db, cfg.disc_radius);
  sc.n_antennas = cfg.N;
  return sc;
}

}  // namespace cellfree
