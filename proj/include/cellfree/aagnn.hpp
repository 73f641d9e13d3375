#pragma once

/// \file aagnn.hpp
/// Association-aware edge GNN for cell-free precoding.
///
/// Hidden state is a K x M x N x F tensor: one F-wide complex feature per
/// (UE, AP, antenna) edge. Every layer sees the state split by association
/// (X_D keeps blocks with d_km = 1, X_Dbar the rest) and combines
///   - the edge itself                            (O1~, O1^)
///   - the other antennas of the same UE-AP pair  (O2~, O2^)
///   - all antennas of the UE's other APs         (P~,  P^)
///   - the same antenna of the AP toward other UEs (Q1~, Q1^)
/// Each coefficient is an F x F matrix on the feature axis; F = 1 gives the
/// scalar weight-sharing layer. With attention, the self/UE part t_km and the
/// per-neighbour messages z_am are reweighted by alpha * h_km^H t_km and
/// beta * h_km^H z_am.
///
/// No parameter depends on K, M or N, so a model runs on any system size.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellfree/autodiff.hpp"
#include "cellfree/dataset.hpp"
#include "cellfree/scenario.hpp"
#include "cellfree/tensor.hpp"

namespace cellfree {

enum class Activation { leaky, none };
enum class PowerMode { full, clip };

struct ModelConfig {
  std::size_t layers = 3;
  std::size_t features = 8;
  Activation activation = Activation::leaky;
  bool attention = true;
  std::uint64_t seed = 0;
  double leak_slope = 0.1;
  PowerMode power = PowerMode::full;
  double input_exponent = 1.0;
};

struct LayerParams {
  Tensor o1_tilde, o2_tilde, p_tilde, q1_tilde;  // F x F
  Tensor o1_hat, o2_hat, p_hat, q1_hat;          // F x F
  Tensor alpha, beta;                            // F

  template <class Self, class Fn>
  static void each(Self& self, Fn&& fn) {
    fn("o1_tilde", self.o1_tilde);
    fn("o2_tilde", self.o2_tilde);
    fn("p_tilde", self.p_tilde);
    fn("q1_tilde", self.q1_tilde);
    fn("o1_hat", self.o1_hat);
    fn("o2_hat", self.o2_hat);
    fn("p_hat", self.p_hat);
    fn("q1_hat", self.q1_hat);
    fn("alpha", self.alpha);
    fn("beta", self.beta);
  }
};

struct ModelParams {
  std::vector<LayerParams> layers;
  Tensor lift;      // 1 x F
  Tensor collapse;  // F x 1
  /// Channels are divided by this before entering the network.
  double input_scale = 1.0;

  /// Trainable tensors in a fixed order.
  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto& l : layers) LayerParams::each(l, [&](const char*, Tensor& t) { out.push_back(&t); });
    out.push_back(&lift);
    out.push_back(&collapse);
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers) LayerParams::each(l, [&](const char*, const Tensor& t) { out.push_back(&t); });
    out.push_back(&lift);
    out.push_back(&collapse);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* t : tensors()) n += t->size();
    return n;
  }
};

struct Model {
  ModelConfig config;
  ModelParams params;
};

/// RMS of ||h_km|| over a dataset.
inline double typical_channel_norm(const Dataset& ds) {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& s : ds.samples) {
    acc += s.h.squared_norm();
    n += s.h.dim(0) * s.h.dim(1);
  }
  return n && acc > 0.0 ? std::sqrt(acc / static_cast<double>(n)) : 1.0;
}

/// Layer matrices ~ CN(0, 1/F); lift ~ CN(0, 1) (identity when F = 1);
/// collapse ~ CN(0, 1/F) (identity when F = 1); alpha = beta = 0.1, which is
/// 0.1 / (typical ||h||^2) once channels are divided by `input_scale`.
inline Model init_model(const ModelConfig& cfg, double input_scale = 1.0) {
  if (cfg.layers < 1 || cfg.features < 1) throw std::invalid_argument("init_model: need L >= 1 and F >= 1");
  if (!(input_scale > 0.0)) throw std::invalid_argument("init_model: input_scale must be positive");
  const std::size_t F = cfg.features;
  Rng rng(splitmix64(cfg.seed ^ 0xa5a5a5a5ULL));
  auto gaussian = [&rng](Shape s, double std_dev) {
    std::normal_distribution<double> g(0.0, std_dev / std::sqrt(2.0));
    Tensor t(std::move(s));
    for (auto& z : t.data()) {
      const double re = g(rng);
      const double im = g(rng);
      z = cplx(re, im);
    }
    return t;
  };
  const double w_std = 1.0 / std::sqrt(static_cast<double>(F));
  Model model{cfg, {}};
  auto& p = model.params;
  p.input_scale = input_scale;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerParams lp;
    LayerParams::each(lp, [&](const char*, Tensor& t) { t = gaussian({F, F}, w_std); });
    lp.alpha = Tensor({F}, cplx(0.1));
    lp.beta = Tensor({F}, cplx(0.1));
    p.layers.push_back(std::move(lp));
  }
  p.lift = F == 1 ? Tensor({1, 1}, cplx(1.0)) : gaussian({1, F}, 1.0);
  p.collapse = F == 1 ? Tensor({1, 1}, cplx(1.0)) : gaussian({F, 1}, w_std);
  return model;
}

// ---------------------------------------------------------------------------
// Tape-level building blocks.

struct LayerVars {
  ad::Var o1_tilde, o2_tilde, p_tilde, q1_tilde;
  ad::Var o1_hat, o2_hat, p_hat, q1_hat;
  ad::Var alpha, beta;
};

struct ModelVars {
  std::vector<LayerVars> layers;
  ad::Var lift, collapse;
  std::vector<ad::Var> all;  // same order as ModelParams::tensors()
};

/// Places the parameters on a tape, as leaves when `trainable`.
inline ModelVars bind(ad::Tape& tape, const ModelParams& p, bool trainable) {
  ModelVars v;
  auto put = [&](const Tensor& t) {
    v.all.push_back(trainable ? tape.leaf(t) : tape.constant(t));
    return v.all.back();
  };
  for (const auto& l : p.layers) {
    LayerVars lv;
    lv.o1_tilde = put(l.o1_tilde);
    lv.o2_tilde = put(l.o2_tilde);
    lv.p_tilde = put(l.p_tilde);
    lv.q1_tilde = put(l.q1_tilde);
    lv.o1_hat = put(l.o1_hat);
    lv.o2_hat = put(l.o2_hat);
    lv.p_hat = put(l.p_hat);
    lv.q1_hat = put(l.q1_hat);
    lv.alpha = put(l.alpha);
    lv.beta = put(l.beta);
    v.layers.push_back(lv);
  }
  v.lift = put(p.lift);
  v.collapse = put(p.collapse);
  return v;
}

/// Rebinds a flat list of vars (ModelParams::tensors() order) into the layer structure.
inline ModelVars structure(const std::vector<ad::Var>& flat, std::size_t layers) {
  if (flat.size() != layers * 10 + 2) throw std::invalid_argument("structure: wrong parameter count");
  ModelVars v;
  v.all = flat;
  std::size_t i = 0;
  for (std::size_t l = 0; l < layers; ++l) {
    LayerVars lv;
    lv.o1_tilde = flat[i++];
    lv.o2_tilde = flat[i++];
    lv.p_tilde = flat[i++];
    lv.q1_tilde = flat[i++];
    lv.o1_hat = flat[i++];
    lv.o2_hat = flat[i++];
    lv.p_hat = flat[i++];
    lv.q1_hat = flat[i++];
    lv.alpha = flat[i++];
    lv.beta = flat[i++];
    v.layers.push_back(lv);
  }
  v.lift = flat[i++];
  v.collapse = flat[i++];
  return v;
}

/// state[k,m,n,:] = h_kmn * lift.
inline ad::Var input_lift(const ad::Var& h, const ad::Var& lift) {
  const auto& s = h.shape();
  return ad::matmul(ad::reshape(h, {s[0], s[1], s[2], 1}), lift);
}

/// X_D * A + X_Dbar * B on the feature axis.
inline ad::Var split_matmul(const ad::Var& x, const Association& d, const ad::Var& a, const ad::Var& b) {
  return ad::add(ad::matmul(ad::mask_assoc(x, d), a), ad::matmul(ad::mask_assoc(x, d, true), b));
}

/// Sum over the other entries along `axis`: expand(sum) - x.
inline ad::Var sum_others(const ad::Var& x, std::size_t axis) {
  return ad::sub(ad::expand(ad::sum_axis(x, axis), axis, x.shape()[axis]), x);
}

struct Aggregates {
  ad::Var u;  // same-UE information (other antennas, other APs)
  ad::Var w;  // same-antenna information from other UEs
  ad::Var z;  // per-UE messages whose sum over other UEs is w
};

inline Aggregates aggregate(const ad::Var& x, const Association& d, const LayerVars& p) {
  const std::size_t N = x.shape()[2];
  Aggregates out;
  const ad::Var antenna = sum_others(split_matmul(x, d, p.o2_tilde, p.o2_hat), 2);
  // all antennas of the UE's other APs: K x M x F, then broadcast over antennas
  const ad::Var per_ap = ad::sum_axis(split_matmul(x, d, p.p_tilde, p.p_hat), 2);
  const ad::Var other_aps = ad::expand(sum_others(per_ap, 1), 2, N);
  out.u = ad::add(antenna, other_aps);
  out.z = split_matmul(x, d, p.q1_tilde, p.q1_hat);
  out.w = sum_others(out.z, 0);
  return out;
}

inline ad::Var activate(const ad::Var& x, Activation act, double slope) {
  return act == Activation::leaky ? ad::leaky_relu(x, slope) : x;
}

inline ad::Var combine_plain(const ad::Var& x, const Association& d, const Aggregates& agg, const LayerVars& p,
                             Activation act, double slope) {
  const ad::Var self = split_matmul(x, d, p.o1_tilde, p.o1_hat);
  return activate(ad::add(ad::add(self, agg.u), agg.w), act, slope);
}

/// Constant forms of the network-side channel used by the attention weights.
struct AttentionChannel {
  Tensor conj_h4;     // conj(h) broadcast to K x M x N x F
  Tensor conj_h_mfkn;  // conj(h) as (M*F) x K x N
};

inline AttentionChannel attention_channel(const Tensor& h, std::size_t F) {
  const std::size_t K = h.dim(0), M = h.dim(1), N = h.dim(2);
  AttentionChannel c{Tensor({K, M, N, F}), Tensor({M * F, K, N})};
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        const cplx hc = std::conj(h(k, m, n));
        for (std::size_t f = 0; f < F; ++f) {
          c.conj_h4(k, m, n, f) = hc;
          c.conj_h_mfkn(m * F + f, k, n) = hc;
        }
      }
  return c;
}

/// x_km = (alpha h_km^H t_km) t_km + sum_{a != k} (beta h_km^H z_am) z_am, per feature.
inline ad::Var combine_attention(const ad::Var& x, const Association& d, const AttentionChannel& hc,
                                 const Aggregates& agg, const LayerVars& p, Activation act, double slope) {
  auto& tape = x.tape();
  const auto& s = x.shape();
  const std::size_t K = s[0], M = s[1], N = s[2], F = s[3];
  const ad::Var t = ad::add(split_matmul(x, d, p.o1_tilde, p.o1_hat), agg.u);

  const ad::Var self_corr = ad::mul_axis(ad::sum_axis(ad::mul_const(t, hc.conj_h4), 2), p.alpha, 2);
  const ad::Var self_part = ad::mul(ad::expand(self_corr, 2, N), t);

  // G[(m,f), k, a] = h_km^H z_am(f), diagonal a = k removed, scaled by beta_f
  const ad::Var z_nk = ad::reshape(ad::permute(agg.z, {1, 3, 2, 0}), {M * F, N, K});
  ad::Var corr = ad::bmm(tape.constant(hc.conj_h_mfkn), z_nk);
  Tensor off_diag({M * F, K, K}, cplx(1.0));
  for (std::size_t b = 0; b < M * F; ++b)
    for (std::size_t k = 0; k < K; ++k) off_diag(b, k, k) = 0.0;
  corr = ad::mul_const(corr, std::move(off_diag));
  corr = ad::reshape(ad::mul_axis(ad::reshape(corr, {M, F, K, K}), p.beta, 1), {M * F, K, K});
  const ad::Var z_kn = ad::reshape(ad::permute(agg.z, {1, 3, 0, 2}), {M * F, K, N});
  const ad::Var cross = ad::permute(ad::reshape(ad::bmm(corr, z_kn), {M, F, K, N}), {2, 0, 3, 1});

  return activate(ad::add(self_part, cross), act, slope);
}

/// Collapses features, masks by association and normalizes each AP's power:
/// full mode scales every non-silent AP to exactly P, clip mode only scales
/// APs above P.
inline ad::Var output_precoder(const ad::Var& x, const Association& d, const ad::Var& collapse, double P,
                               PowerMode mode = PowerMode::full) {
  const auto& s = x.shape();
  const ad::Var v = ad::mask_assoc(ad::reshape(ad::matmul(x, collapse), {s[0], s[1], s[2]}), d);
  const ad::Var power = ad::sum_axis(ad::sum_axis(ad::abs2(v), 2), 0);
  ad::Var gain;
  if (mode == PowerMode::full) {
    gain = ad::unary_real(
        power, [P](double q) { return q > 0.0 ? std::sqrt(P / q) : 0.0; },
        [P](double q) { return q > 0.0 ? -0.5 * std::sqrt(P) / (q * std::sqrt(q)) : 0.0; });
  } else {
    gain = ad::unary_real(
        power, [P](double q) { return q > P ? std::sqrt(P / q) : 1.0; },
        [P](double q) { return q > P ? -0.5 * std::sqrt(P) / (q * std::sqrt(q)) : 0.0; });
  }
  return ad::mul_axis(v, gain, 1);
}

/// Full network on a tape; returns the K x M x N precoder.
inline ad::Var forward(ad::Tape& tape, const ModelConfig& cfg, const ModelVars& vars, double input_scale,
                       const Tensor& h, const Association& d, double P) {
  if (h.rank() != 3 || h.dim(0) != d.ues() || h.dim(1) != d.aps()) throw std::invalid_argument("forward: shape mismatch");
  if (vars.layers.size() != cfg.layers) throw std::invalid_argument("forward: layer count mismatch");
  Tensor hs = h;
  hs *= cplx(1.0 / input_scale);
  if (cfg.input_exponent != 1.0)
    for (std::size_t k = 0; k < hs.dim(0); ++k)
      for (std::size_t m = 0; m < hs.dim(1); ++m) {
        double n2 = 0.0;
        for (std::size_t n = 0; n < hs.dim(2); ++n) n2 += std::norm(hs(k, m, n));
        const double g = n2 > 0.0 ? std::pow(n2, 0.5 * (cfg.input_exponent - 1.0)) : 0.0;
        for (std::size_t n = 0; n < hs.dim(2); ++n) hs(k, m, n) *= g;
      }
  const std::size_t F = cfg.features;
  AttentionChannel hc;
  if (cfg.attention) hc = attention_channel(hs, F);
  ad::Var x = input_lift(tape.constant(std::move(hs)), vars.lift);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto act = l + 1 < cfg.layers ? cfg.activation : Activation::none;
    const auto& p = vars.layers[l];
    const Aggregates agg = aggregate(x, d, p);
    x = cfg.attention ? combine_attention(x, d, hc, agg, p, act, cfg.leak_slope)
                      : combine_plain(x, d, agg, p, act, cfg.leak_slope);
  }
  return output_precoder(x, d, vars.collapse, P, cfg.power);
}

/// Inference without gradient tracking.
inline Tensor predict(const Model& model, const Tensor& h, const Association& d, double P) {
  ad::Tape tape;
  const ModelVars vars = bind(tape, model.params, false);
  return forward(tape, model.config, vars, model.params.input_scale, h, d, P).value();
}

// ---------------------------------------------------------------------------
// Checkpoint "AAGNN v1" (JSON).

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
  auto pair = [](cplx z) { return nlohmann::json::array({z.real(), z.imag()}); };
  nlohmann::json out = nlohmann::json::array();
  if (t.rank() == 1) {
    for (const auto& z : t.data()) out.push_back(pair(z));
    return out;
  }
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < t.dim(1); ++j) row.push_back(pair(t(i, j)));
    out.push_back(row);
  }
  return out;
}

inline cplx pair_from_json(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline Tensor vector_from_json(const nlohmann::json& j) {
  Tensor t({j.size()});
  for (std::size_t i = 0; i < j.size(); ++i) t[i] = pair_from_json(j[i]);
  return t;
}

inline Tensor matrix_from_json(const nlohmann::json& j) {
  const std::size_t rows = j.size(), cols = rows ? j[0].size() : 0;
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (j[i].size() != cols) throw std::runtime_error("checkpoint: ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) t(i, c) = pair_from_json(j[i][c]);
  }
  return t;
}

}  // namespace detail

inline nlohmann::json model_to_json(const Model& m) {
  nlohmann::ordered_json cfg;
  cfg["L"] = m.config.layers;
  cfg["F"] = m.config.features;
  cfg["activation"] = m.config.activation == Activation::leaky ? "leaky" : "none";
  cfg["attention"] = m.config.attention;
  cfg["seed"] = m.config.seed;
  cfg["leak_slope"] = m.config.leak_slope;
  cfg["power"] = m.config.power == PowerMode::full ? "full" : "clip";
  cfg["input_exponent"] = m.config.input_exponent;
  nlohmann::ordered_json out;
  out["format"] = "AAGNN v1";
  out["config"] = cfg;
  out["layers"] = nlohmann::json::array();
  for (const auto& l : m.params.layers) {
    nlohmann::ordered_json lj;
    LayerParams::each(l, [&](const char* name, const Tensor& t) { lj[name] = detail::tensor_to_json(t); });
    out["layers"].push_back(lj);
  }
  out["lift"] = detail::tensor_to_json(m.params.lift);
  out["collapse"] = detail::tensor_to_json(m.params.collapse);
  out["input_scale"] = m.params.input_scale;
  return out;
}

inline Model model_from_json(const nlohmann::json& j) {
  Model m;
  const auto& c = j.at("config");
  m.config.layers = c.at("L").get<std::size_t>();
  m.config.features = c.at("F").get<std::size_t>();
  m.config.activation = c.at("activation").get<std::string>() == "none" ? Activation::none : Activation::leaky;
  m.config.attention = c.at("attention").get<bool>();
  m.config.seed = c.at("seed").get<std::uint64_t>();
  m.config.leak_slope = c.value("leak_slope", 0.1);
  m.config.power = c.value("power", std::string("full")) == "clip" ? PowerMode::clip : PowerMode::full;
  m.config.input_exponent = c.value("input_exponent", 1.0);
  const std::size_t F = m.config.features;
  for (const auto& lj : j.at("layers")) {
    LayerParams lp;
    LayerParams::each(lp, [&](const char* name, Tensor& t) {
      const std::string n = name;
      t = (n == "alpha" || n == "beta") ? detail::vector_from_json(lj.at(n)) : detail::matrix_from_json(lj.at(n));
      const Shape want = t.rank() == 1 ? Shape{F} : Shape{F, F};
      if (t.shape() != want) throw std::runtime_error("checkpoint: bad shape for " + n);
    });
    m.params.layers.push_back(std::move(lp));
  }
  if (m.params.layers.size() != m.config.layers) throw std::runtime_error("checkpoint: layer count mismatch");
  m.params.lift = detail::matrix_from_json(j.at("lift"));
  m.params.collapse = detail::matrix_from_json(j.at("collapse"));
  if (m.params.lift.shape() != Shape{1, F} || m.params.collapse.shape() != Shape{F, 1})
    throw std::runtime_error("checkpoint: bad lift/collapse shape");
  m.params.input_scale = j.value("input_scale", 1.0);
  return m;
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  write_file_atomic(path, model_to_json(m).dump(1));
}

inline Model load_model(const std::filesystem::path& path) {
  return model_from_json(nlohmann::json::parse(read_file(path)));
}

}  // namespace cellfree
