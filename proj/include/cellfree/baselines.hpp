#pragma once

// Numerical baselines: association-restricted MRT and WMMSE under per-AP power
// constraints.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "cellfree/objective.hpp"
#include "cellfree/scenario.hpp"
#include "cellfree/tensor.hpp"

namespace cellfree {

/// v_km = d_km sqrt(P / K_m) h_km / ||h_km||, with K_m the number of UEs AP m serves.
/// Zero-norm served channels get a zero precoder; their power share is not reassigned.
inline Tensor mrt(const Tensor& h, const Association& d, double P) {
  const std::size_t K = h.dim(0), M = h.dim(1), N = h.dim(2);
  if (d.ues() != K || d.aps() != M) throw std::invalid_argument("mrt: association shape mismatch");
  Tensor v(h.shape());
  for (std::size_t m = 0; m < M; ++m) {
    const std::size_t served = d.served_count(m);
    if (served == 0) continue;
    const double amp = std::sqrt(P / static_cast<double>(served));
    for (std::size_t k = 0; k < K; ++k) {
      if (!d(k, m)) continue;
      double norm2 = 0.0;
      for (std::size_t n = 0; n < N; ++n) norm2 += std::norm(h(k, m, n));
      if (norm2 == 0.0) continue;
      const double s = amp / std::sqrt(norm2);
      for (std::size_t n = 0; n < N; ++n) v(k, m, n) = s * h(k, m, n);
    }
  }
  return v;
}

struct WmmseOptions {
  std::size_t max_outer_iters = 200;
  double objective_tol = 1e-6;    // relative change of the sum rate
  double power_tol = 1e-8;        // relative to P
  std::size_t bisection_iters = 60;
  std::size_t multiplier_sweeps = 50;
};

struct WmmseTrace {
  std::vector<double> sum_rates;  // nats, one per outer iteration (index 0: initial point)
  std::vector<double> final_powers;
  std::vector<double> multipliers;
  bool converged = false;
  bool regularized = false;  // a ridge was added to a singular precoder system
  std::size_t iterations = 0;
};

struct WmmseResult {
  Tensor v;
  WmmseTrace trace;
};

namespace detail {

class WmmseSolver {
 public:
  WmmseSolver(const Tensor& h, const Association& d, double P, double noise, const WmmseOptions& opt)
      : h_(h), d_(d), P_(P), noise_(noise), opt_(opt), K_(h.dim(0)), M_(h.dim(1)), N_(h.dim(2)) {
    serving_.resize(K_);
    for (std::size_t i = 0; i < K_; ++i) {
      for (std::size_t m = 0; m < M_; ++m)
        if (d(i, m)) serving_[i].push_back(m);
      if (serving_[i].empty()) throw std::invalid_argument("wmmse: a UE has no serving AP");
    }
    served_by_.resize(M_);
    for (std::size_t i = 0; i < K_; ++i)
      for (auto m : serving_[i]) served_by_[m].push_back(i);
    // G_i: column k stacks h_km over the APs serving UE i
    G_.resize(K_);
    for (std::size_t i = 0; i < K_; ++i) {
      const auto n = static_cast<Eigen::Index>(N_ * serving_[i].size());
      G_[i].resize(n, static_cast<Eigen::Index>(K_));
      for (std::size_t k = 0; k < K_; ++k)
        for (std::size_t s = 0; s < serving_[i].size(); ++s)
          for (std::size_t a = 0; a < N_; ++a)
            G_[i](static_cast<Eigen::Index>(s * N_ + a), static_cast<Eigen::Index>(k)) = h(k, serving_[i][s], a);
    }
    A_.resize(K_);
    b_.resize(K_);
    x_.resize(K_);
    mu_.assign(M_, 0.0);
  }

  WmmseResult run(const Tensor& v0) {
    WmmseResult res;
    auto& tr = res.trace;
    Tensor v = v0;
    double rate = sum_rate(h_, d_, v, noise_);
    tr.sum_rates.push_back(rate);
    Tensor best = v;
    double best_rate = rate;
    for (std::size_t it = 0; it < opt_.max_outer_iters; ++it) {
      build_systems(v);
      solve_multipliers();
      v = assemble();
      v = project_per_ap(std::move(v), P_);
      const double next = sum_rate(h_, d_, v, noise_);
      tr.sum_rates.push_back(next);
      tr.iterations = it + 1;
      if (next > best_rate) {
        best_rate = next;
        best = v;
      }
      const bool done = std::abs(next - rate) <= opt_.objective_tol * std::max(std::abs(rate), 1e-300);
      rate = next;
      if (done) {
        tr.converged = true;
        break;
      }
    }
    tr.final_powers = per_ap_power(best);
    tr.multipliers = mu_;
    tr.regularized = regularized_;
    res.v = std::move(best);
    return res;
  }

 private:
  // Receivers u_k and MSE weights w_k for the current precoder, then
  // A_i = sum_k w_k |u_k|^2 g_ki g_ki^H and b_i = w_i u_i g_ii.
  void build_systems(const Tensor& v) {
    Eigen::MatrixXcd C(static_cast<Eigen::Index>(K_), static_cast<Eigen::Index>(K_));
    for (std::size_t k = 0; k < K_; ++k)
      for (std::size_t i = 0; i < K_; ++i) {
        cplx acc{};
        for (auto m : serving_[i])
          for (std::size_t a = 0; a < N_; ++a) acc += std::conj(h_(k, m, a)) * v(i, m, a);
        C(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = acc;
      }
    std::vector<cplx> u(K_);
    Eigen::VectorXd weight(static_cast<Eigen::Index>(K_));
    std::vector<double> w(K_);
    for (std::size_t k = 0; k < K_; ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      const double total = C.row(kk).squaredNorm() + noise_;
      u[k] = C(kk, kk) / total;
      const double mse = 1.0 - std::norm(C(kk, kk)) / total;
      w[k] = 1.0 / std::max(mse, 1e-300);
      weight(kk) = w[k] * std::norm(u[k]);
    }
    for (std::size_t i = 0; i < K_; ++i) {
      A_[i] = G_[i] * weight.asDiagonal() * G_[i].adjoint();
      b_[i] = (w[i] * u[i]) * G_[i].col(static_cast<Eigen::Index>(i));
    }
  }

  // Each AP block gets max(mu_m, ridge) on its diagonal, so singular systems
  // stay solvable and the powers remain continuous in mu.
  Eigen::MatrixXcd system(std::size_t i) {
    Eigen::MatrixXcd sys = A_[i];
    const double ridge = 1e-12 * std::max(A_[i].trace().real(), 1e-300) / static_cast<double>(sys.rows());
    for (std::size_t s = 0; s < serving_[i].size(); ++s) {
      const double mu = mu_[serving_[i][s]];
      if (mu < ridge) regularized_ = true;
      for (std::size_t a = 0; a < N_; ++a) {
        const auto r = static_cast<Eigen::Index>(s * N_ + a);
        sys(r, r) += std::max(mu, ridge);
      }
    }
    return sys;
  }

  void solve_ue(std::size_t i) { x_[i] = system(i).ldlt().solve(b_[i]); }

  double ap_power(std::size_t m) const {
    double p = 0.0;
    for (auto i : served_by_[m]) {
      const auto& srv = serving_[i];
      const auto s = static_cast<std::size_t>(std::find(srv.begin(), srv.end(), m) - srv.begin());
      p += x_[i].segment(static_cast<Eigen::Index>(s * N_), static_cast<Eigen::Index>(N_)).squaredNorm();
    }
    return p;
  }

  double power_at(std::size_t m, double mu) {
    mu_[m] = mu;
    for (auto i : served_by_[m]) solve_ue(i);
    return ap_power(m);
  }

  // Root of p_m(mu) = P with the other multipliers fixed, bracketed and then
  // refined by Illinois false position on 1/sqrt(p), which is close to linear
  // in mu; falls back to the midpoint when the step leaves the bracket.
  // Leaves AP m feasible; mu_m = 0 whenever that already is.
  void bisect(std::size_t m) {
    if (served_by_[m].empty()) {
      mu_[m] = 0.0;
      return;
    }
    const double warm = mu_[m];
    const double p0 = power_at(m, 0.0);
    if (std::isfinite(p0) && p0 <= P_) return;
    const auto g = [&](double p) { return std::isfinite(p) ? 1.0 / std::sqrt(p) - 1.0 / std::sqrt(P_) : -1.0 / std::sqrt(P_); };
    double lo = 0.0, glo = g(p0);
    double hi = warm > 0.0 ? warm : 1.0, phi = power_at(m, hi);
    while (!(std::isfinite(phi) && phi <= P_)) {
      lo = hi;
      glo = g(phi);
      hi *= 2.0;
      phi = power_at(m, hi);
    }
    if (hi == warm)
      for (double down = 0.5 * warm; down > lo; down *= 0.5) {
        const double p = power_at(m, down);
        if (!(std::isfinite(p) && p <= P_)) {
          lo = down;
          glo = g(p);
          break;
        }
        hi = down;
        phi = p;
      }
    double ghi = g(phi);
    int side = 0;
    for (std::size_t it = 0; it < opt_.bisection_iters && P_ - phi > 1e-12 * P_; ++it) {
      double mid = ghi > glo ? hi - ghi * (hi - lo) / (ghi - glo) : 0.5 * (lo + hi);
      if (!(mid > lo && mid < hi)) mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      const double p = power_at(m, mid);
      if (std::isfinite(p) && p <= P_) {
        hi = mid;
        phi = p;
        ghi = g(p);
        if (side == 1) glo *= 0.5;
        side = 1;
      } else {
        lo = mid;
        glo = g(p);
        if (side == -1) ghi *= 0.5;
        side = -1;
      }
    }
    power_at(m, hi);
  }

  // Largest violation of feasibility and complementary slackness, relative to P.
  double kkt_violation() const {
    double worst = 0.0;
    for (std::size_t m = 0; m < M_; ++m) {
      const double r = (ap_power(m) - P_) / P_;
      worst = std::max(worst, mu_[m] > 0.0 ? std::abs(r) : std::max(r, 0.0));
    }
    return worst;
  }

  // One Newton step on p_m(mu) = P over the APs with positive multipliers,
  // using dp_m/dmu_b = -2 Re sum_i x_im^H [(A_i + Lambda_i)^-1 E_b x_i]_m.
  // Backtracks until the KKT violation drops, else leaves mu unchanged.
  void newton_step() {
    std::vector<Eigen::Index> slot(M_, -1);
    Eigen::Index n = 0;
    for (std::size_t m = 0; m < M_; ++m)
      if (mu_[m] > 0.0) slot[m] = n++;
    if (n == 0) return;
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd r(n);
    for (std::size_t m = 0; m < M_; ++m)
      if (slot[m] >= 0) r(slot[m]) = ap_power(m) - P_;
    const auto blk = [this](std::size_t s) { return static_cast<Eigen::Index>(s * N_); };
    const auto len = static_cast<Eigen::Index>(N_);
    for (std::size_t i = 0; i < K_; ++i) {
      const auto& srv = serving_[i];
      const auto ldlt = system(i).ldlt();
      for (std::size_t sb = 0; sb < srv.size(); ++sb) {
        if (slot[srv[sb]] < 0) continue;
        Eigen::VectorXcd e = Eigen::VectorXcd::Zero(x_[i].size());
        e.segment(blk(sb), len) = x_[i].segment(blk(sb), len);
        const Eigen::VectorXcd y = ldlt.solve(e);
        for (std::size_t sm = 0; sm < srv.size(); ++sm) {
          if (slot[srv[sm]] < 0) continue;
          J(slot[srv[sm]], slot[srv[sb]]) -= 2.0 * x_[i].segment(blk(sm), len).dot(y.segment(blk(sm), len)).real();
        }
      }
    }
    const Eigen::VectorXd step = J.fullPivLu().solve(-r);
    if (!step.allFinite()) return;
    const double before = kkt_violation();
    const auto mu_old = mu_;
    const auto x_old = x_;
    double t = 1.0;
    for (int halving = 0; halving < 8; ++halving, t *= 0.5) {
      for (std::size_t m = 0; m < M_; ++m)
        if (slot[m] >= 0) mu_[m] = std::max(0.0, mu_old[m] + t * step(slot[m]));
      for (std::size_t i = 0; i < K_; ++i) solve_ue(i);
      if (kkt_violation() < before) return;
    }
    mu_ = mu_old;
    x_ = x_old;
  }

  // Gauss-Seidel sweeps of per-AP root finding, each followed by a joint
  // Newton step, until every AP is feasible and slack only where mu_m = 0.
  void solve_multipliers() {
    for (std::size_t i = 0; i < K_; ++i) solve_ue(i);
    const double tol = opt_.power_tol;
    double best = std::numeric_limits<double>::infinity();
    std::size_t stalled = 0;
    for (std::size_t sweep = 0; sweep < opt_.multiplier_sweeps; ++sweep) {
      if (sweep > 0 && kkt_violation() <= tol) break;
      for (std::size_t m = 0; m < M_; ++m) bisect(m);
      if (kkt_violation() <= tol) break;
      newton_step();
      // rank-deficient systems can leave only the ratios of tiny multipliers determined
      const double viol = kkt_violation();
      if (viol < 0.5 * best) {
        best = viol;
        stalled = 0;
      } else if (++stalled >= 5) {
        break;
      }
    }
    // leave every AP feasible even if the sweep budget ran out
    for (std::size_t m = 0; m < M_; ++m)
      if (ap_power(m) > P_ * (1.0 + tol)) bisect(m);
  }

  Tensor assemble() const {
    Tensor v(h_.shape());
    for (std::size_t i = 0; i < K_; ++i)
      for (std::size_t s = 0; s < serving_[i].size(); ++s)
        for (std::size_t a = 0; a < N_; ++a) v(i, serving_[i][s], a) = x_[i](static_cast<Eigen::Index>(s * N_ + a));
    return v;
  }

  const Tensor& h_;
  const Association& d_;
  double P_, noise_;
  WmmseOptions opt_;
  std::size_t K_, M_, N_;
  std::vector<std::vector<std::size_t>> serving_, served_by_;
  std::vector<Eigen::MatrixXcd> G_, A_;
  std::vector<Eigen::VectorXcd> b_, x_;
  std::vector<double> mu_;
  bool regularized_ = false;
};

}  // namespace detail

/// Block-coordinate WMMSE restricted to each UE's serving APs, started from MRT.
/// Returns the best iterate; `trace.converged` is false if the iteration cap was hit.
inline WmmseResult wmmse(const Tensor& h, const Association& d, double P, double noise,
                         const WmmseOptions& opt = {}) {
  if (!(P > 0.0) || !(noise > 0.0)) throw std::invalid_argument("wmmse: P and noise must be positive");
  detail::WmmseSolver solver(h, d, P, noise, opt);
  return solver.run(mrt(h, d, P));
}

/// sum_rate(candidate) / sum_rate(reference).
inline double normalized_sum_rate(const Tensor& candidate, const Tensor& reference, const Tensor& h,
                                  const Association& d, double noise) {
  const double ref = sum_rate(h, d, reference, noise);
  if (!(ref > 0.0)) throw std::invalid_argument("normalized_sum_rate: reference sum rate is zero");
  return sum_rate(h, d, candidate, noise) / ref;
}

}  // namespace cellfree
