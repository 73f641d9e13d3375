#pragma once

// Joint permutations of UEs, APs and per-AP antennas, the six-orbit shared
// weight structure, and numerical checks of commutation and policy equivariance.
//
// Stacked form: X is NM x K with row m*N + n and column k. vec(X) is
// column-major, so entry (k, m, n) sits at k*NM + m*N + n.

#include <Eigen/Dense>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "cellfree/scenario.hpp"
#include "cellfree/tensor.hpp"

namespace cellfree {

using Perm = std::vector<std::size_t>;  // maps index i to position perm[i]

inline Perm identity_perm(std::size_t n) {
  Perm p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  return p;
}

inline Perm random_perm(std::size_t n, Rng& rng) {
  Perm p = identity_perm(n);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

inline bool is_bijection(const Perm& p) {
  std::vector<bool> seen(p.size(), false);
  for (auto v : p) {
    if (v >= p.size() || seen[v]) return false;
    seen[v] = true;
  }
  return true;
}

inline Perm inverse(const Perm& p) {
  Perm inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

/// outer after inner: i -> outer[inner[i]].
inline Perm compose(const Perm& outer, const Perm& inner) {
  Perm out(inner.size());
  for (std::size_t i = 0; i < inner.size(); ++i) out[i] = outer[inner[i]];
  return out;
}

/// Antenna permutation per AP (indexed by the AP's original position), AP
/// permutation and UE permutation.
struct PermTriple {
  std::vector<Perm> antenna_perms;
  Perm ap_perm;
  Perm ue_perm;

  std::size_t antennas() const { return antenna_perms.empty() ? 0 : antenna_perms.front().size(); }
  std::size_t aps() const { return ap_perm.size(); }
  std::size_t ues() const { return ue_perm.size(); }

  static PermTriple identity(std::size_t N, std::size_t M, std::size_t K) {
    return {std::vector<Perm>(M, identity_perm(N)), identity_perm(M), identity_perm(K)};
  }
  static PermTriple random(std::size_t N, std::size_t M, std::size_t K, Rng& rng) {
    PermTriple t;
    for (std::size_t m = 0; m < M; ++m) t.antenna_perms.push_back(random_perm(N, rng));
    t.ap_perm = random_perm(M, rng);
    t.ue_perm = random_perm(K, rng);
    return t;
  }

  bool valid() const {
    if (antenna_perms.size() != ap_perm.size() || !is_bijection(ap_perm) || !is_bijection(ue_perm)) return false;
    for (const auto& p : antenna_perms)
      if (p.size() != antennas() || !is_bijection(p)) return false;
    return true;
  }

  /// Where (m, n) lands in the stacked row index.
  std::size_t row(std::size_t m, std::size_t n) const { return ap_perm[m] * antennas() + antenna_perms[m][n]; }
};

/// The triple equivalent to applying `inner` first and then `outer`.
inline PermTriple compose(const PermTriple& outer, const PermTriple& inner) {
  PermTriple t;
  const std::size_t M = inner.aps();
  t.antenna_perms.resize(M);
  for (std::size_t m = 0; m < M; ++m)
    t.antenna_perms[m] = compose(outer.antenna_perms[inner.ap_perm[m]], inner.antenna_perms[m]);
  t.ap_perm = compose(outer.ap_perm, inner.ap_perm);
  t.ue_perm = compose(outer.ue_perm, inner.ue_perm);
  return t;
}

inline PermTriple inverse(const PermTriple& p) {
  PermTriple t;
  const std::size_t M = p.aps();
  t.ap_perm = inverse(p.ap_perm);
  t.ue_perm = inverse(p.ue_perm);
  t.antenna_perms.resize(M);
  // block at new position p.ap_perm[m] must be undone by the inverse of AP m's antenna map
  for (std::size_t m = 0; m < M; ++m) t.antenna_perms[p.ap_perm[m]] = inverse(p.antenna_perms[m]);
  return t;
}

inline Eigen::MatrixXcd stack(const Tensor& x) {
  const std::size_t K = x.dim(0), M = x.dim(1), N = x.dim(2);
  Eigen::MatrixXcd X(static_cast<Eigen::Index>(N * M), static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n)
        X(static_cast<Eigen::Index>(m * N + n), static_cast<Eigen::Index>(k)) = x(k, m, n);
  return X;
}

inline Tensor unstack(const Eigen::MatrixXcd& X, std::size_t M, std::size_t N) {
  const auto K = static_cast<std::size_t>(X.cols());
  if (static_cast<std::size_t>(X.rows()) != M * N) throw std::invalid_argument("unstack: row count is not N*M");
  Tensor x({K, M, N});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n)
        x(k, m, n) = X(static_cast<Eigen::Index>(m * N + n), static_cast<Eigen::Index>(k));
  return x;
}

/// A * X * Pi_K^T.
inline Eigen::MatrixXcd apply_3d_perm(const Eigen::MatrixXcd& X, const PermTriple& t) {
  const std::size_t N = t.antennas(), M = t.aps(), K = t.ues();
  if (static_cast<std::size_t>(X.rows()) != N * M || static_cast<std::size_t>(X.cols()) != K)
    throw std::invalid_argument("apply_3d_perm: shape mismatch");
  Eigen::MatrixXcd Y(X.rows(), X.cols());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n)
        Y(static_cast<Eigen::Index>(t.row(m, n)), static_cast<Eigen::Index>(t.ue_perm[k])) =
            X(static_cast<Eigen::Index>(m * N + n), static_cast<Eigen::Index>(k));
  return Y;
}

/// The same permutation on a K x M x N tensor.
inline Tensor permute_kmn(const Tensor& x, const PermTriple& t) {
  const std::size_t K = x.dim(0), M = x.dim(1), N = x.dim(2);
  Tensor y(x.shape());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) y(t.ue_perm[k], t.ap_perm[m], t.antenna_perms[m][n]) = x(k, m, n);
  return y;
}

inline Association permute_assoc(const Association& d, const PermTriple& t) {
  Association out(d.ues(), d.aps());
  for (std::size_t k = 0; k < d.ues(); ++k)
    for (std::size_t m = 0; m < d.aps(); ++m) out(t.ue_perm[k], t.ap_perm[m]) = d(k, m);
  return out;
}

/// Dense (Pi_K kron A) as a real permutation matrix of size NMK.
inline Eigen::MatrixXd kron_perm_matrix(const PermTriple& t) {
  const std::size_t N = t.antennas(), M = t.aps(), K = t.ues(), NM = N * M;
  const auto n = static_cast<Eigen::Index>(NM * K);
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t a = 0; a < N; ++a)
        Q(static_cast<Eigen::Index>(t.ue_perm[k] * NM + t.row(m, a)), static_cast<Eigen::Index>(k * NM + m * N + a)) =
            1.0;
  return Q;
}

/// Six free coefficients of a 3D-PE weight matrix.
struct SharedWeightSpec {
  cplx o1{}, o2{}, p{}, q1{}, q2{}, r{};
  std::size_t N = 1, M = 1, K = 1;
};

/// Entry at ((k,m,n), (k',m',n')) picks the coefficient of the pair's orbit:
/// o1 same edge; o2 same UE and AP; p same UE, other AP; q1 other UE, same
/// antenna; q2 other UE, same AP, other antenna; r other UE and other AP.
inline Eigen::MatrixXcd materialize_weight(const SharedWeightSpec& s) {
  if (s.N == 0 || s.M == 0 || s.K == 0) throw std::invalid_argument("materialize_weight: empty dimension");
  const std::size_t NM = s.N * s.M;
  const auto n = static_cast<Eigen::Index>(NM * s.K);
  Eigen::MatrixXcd W(n, n);
  for (std::size_t k = 0; k < s.K; ++k)
    for (std::size_t m = 0; m < s.M; ++m)
      for (std::size_t a = 0; a < s.N; ++a)
        for (std::size_t k2 = 0; k2 < s.K; ++k2)
          for (std::size_t m2 = 0; m2 < s.M; ++m2)
            for (std::size_t a2 = 0; a2 < s.N; ++a2) {
              cplx w;
              if (k == k2)
                w = m != m2 ? s.p : (a == a2 ? s.o1 : s.o2);
              else
                w = m != m2 ? s.r : (a == a2 ? s.q1 : s.q2);
              W(static_cast<Eigen::Index>(k * NM + m * s.N + a), static_cast<Eigen::Index>(k2 * NM + m2 * s.N + a2)) = w;
            }
  return W;
}

/// max |(Pi_K kron A) W - W (Pi_K kron A)| entrywise.
inline double check_commutation(const Eigen::MatrixXcd& W, const PermTriple& t) {
  const Eigen::MatrixXcd Q = kron_perm_matrix(t).cast<cplx>();
  if (W.rows() != W.cols() || W.rows() != Q.rows()) throw std::invalid_argument("check_commutation: size mismatch");
  return (Q * W - W * Q).cwiseAbs().maxCoeff();
}

/// Adjacent transpositions of UEs, of APs, and of antennas within each AP.
inline std::vector<PermTriple> generating_triples(std::size_t N, std::size_t M, std::size_t K) {
  std::vector<PermTriple> gens;
  const auto id = PermTriple::identity(N, M, K);
  for (std::size_t k = 0; k + 1 < K; ++k) {
    auto t = id;
    std::swap(t.ue_perm[k], t.ue_perm[k + 1]);
    gens.push_back(std::move(t));
  }
  for (std::size_t m = 0; m + 1 < M; ++m) {
    auto t = id;
    std::swap(t.ap_perm[m], t.ap_perm[m + 1]);
    gens.push_back(std::move(t));
  }
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t a = 0; a + 1 < N; ++a) {
      auto t = id;
      std::swap(t.antenna_perms[m][a], t.antenna_perms[m][a + 1]);
      gens.push_back(std::move(t));
    }
  return gens;
}

inline constexpr std::size_t kMaxCommutantSize = 16;

/// Dimension of {W : W commutes with Pi_K kron A for every triple}, as the
/// null-space dimension of the stacked constraints (I kron Q - Q^T kron I) vec(W) = 0
/// over a generating set. Rank threshold: 1e-8 * largest singular value.
inline std::size_t commutant_dimension(std::size_t N, std::size_t M, std::size_t K) {
  if (N == 0 || M == 0 || K == 0) throw std::invalid_argument("commutant_dimension: empty dimension");
  const std::size_t n = N * M * K;
  if (n > kMaxCommutantSize) throw std::invalid_argument("commutant_dimension: N*M*K too large for dense solve");
  const auto gens = generating_triples(N, M, K);
  if (gens.empty()) return n * n;
  const auto nn = static_cast<Eigen::Index>(n * n);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  Eigen::MatrixXd C(nn * static_cast<Eigen::Index>(gens.size()), nn);
  for (std::size_t g = 0; g < gens.size(); ++g) {
    const Eigen::MatrixXd Q = kron_perm_matrix(gens[g]);
    // vec(QW) = (I kron Q) vec(W); vec(WQ) = (Q^T kron I) vec(W)
    Eigen::MatrixXd block(nn, nn);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i)
      for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(n); ++j) {
        const auto rows = static_cast<Eigen::Index>(n);
        block.block(i * rows, j * rows, rows, rows) = I(i, j) * Q - Q(j, i) * I;
      }
    C.middleRows(static_cast<Eigen::Index>(g) * nn, nn) = block;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(C);
  const auto& sv = svd.singularValues();
  const double thresh = 1e-8 * sv(0);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > thresh ? 1 : 0;
  return n * n - rank;
}

/// A precoding policy on the stacked masked channels (H_D, H_Dbar) -> V.
using StackedPolicy = std::function<Eigen::MatrixXcd(const Eigen::MatrixXcd&, const Eigen::MatrixXcd&)>;

struct EquivarianceResult {
  bool pass = false;
  double max_deviation = 0.0;  // relative to max |A V Pi_K^T|
};

/// Compares A F(H_D, H_Dbar) Pi_K^T with F(A H_D Pi_K^T, A H_Dbar Pi_K^T).
inline EquivarianceResult check_policy_equivariance(const StackedPolicy& f, const Eigen::MatrixXcd& hd,
                                                    const Eigen::MatrixXcd& hb, const PermTriple& t, double tol) {
  const Eigen::MatrixXcd lhs = apply_3d_perm(f(hd, hb), t);
  const Eigen::MatrixXcd rhs = f(apply_3d_perm(hd, t), apply_3d_perm(hb, t));
  const double scale = std::max(lhs.cwiseAbs().maxCoeff(), 1e-300);
  const double dev = (lhs - rhs).cwiseAbs().maxCoeff() / scale;
  return {dev <= tol, dev};
}

}  // namespace cellfree
