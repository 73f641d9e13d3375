#pragma once

/// \file training.hpp
/// Unsupervised training on the negative batch-mean sum rate, evaluation
/// against cached WMMSE references, and the cache itself.

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellfree/aagnn.hpp"
#include "cellfree/autodiff.hpp"
#include "cellfree/baselines.hpp"
#include "cellfree/dataset.hpp"
#include "cellfree/objective.hpp"
#include "cellfree/parallel.hpp"

namespace cellfree {

/// Sum rate (nats) of precoder v as a real scalar tape node.
inline ad::Var tape_sum_rate(ad::Tape& tape, const ad::Var& v, const Tensor& h, const Association& d, double noise) {
  const std::size_t K = h.dim(0), M = h.dim(1), N = h.dim(2), MN = M * N;
  Tensor hc({1, K, MN});
  for (std::size_t i = 0; i < h.size(); ++i) hc[i] = std::conj(h[i]);
  // C[k, i] = sum_{m,n} conj(h_kmn) d_im v_imn
  const ad::Var vs = ad::permute(ad::reshape(ad::mask_assoc(v, d), {1, K, MN}), {0, 2, 1});
  const ad::Var power = ad::reshape(ad::abs2(ad::bmm(tape.constant(std::move(hc)), vs)), {K, K});
  Tensor eye({K, K});
  for (std::size_t k = 0; k < K; ++k) eye(k, k) = 1.0;
  const ad::Var signal = ad::sum_axis(ad::mul_const(power, std::move(eye)), 1);
  const ad::Var total = ad::sum_axis(power, 1);
  const ad::Var denom = ad::add_scalar(ad::sub(total, signal), noise);
  return ad::sum_all(ad::log1p(ad::div(signal, denom)));
}

/// -(1/B) sum over the batch of the model's sum rate, on one tape.
inline ad::Var batch_loss(ad::Tape& tape, const Model& model, const ModelVars& vars, const Dataset& ds,
                          const std::vector<std::size_t>& batch, double scale) {
  ad::Var acc;
  for (auto i : batch) {
    const auto& s = ds.samples.at(i);
    const ad::Var v = forward(tape, model.config, vars, model.params.input_scale, s.h, s.assoc, ds.power_budget);
    const ad::Var r = tape_sum_rate(tape, v, s.h, s.assoc, ds.noise_power);
    acc = acc.valid() ? ad::add(acc, r) : r;
  }
  return ad::scale(acc, -scale);
}

/// Loss value only.
inline double loss(const Model& model, const Dataset& ds, const std::vector<std::size_t>& batch) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  double s = 0.0;
  for (auto i : batch) {
    const auto& smp = ds.samples.at(i);
    s += sum_rate(smp.h, smp.assoc, predict(model, smp.h, smp.assoc, ds.power_budget), ds.noise_power);
  }
  return -s / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------

class WmmseCache {
 public:
  WmmseCache() = default;
  explicit WmmseCache(std::string digest) : digest_(std::move(digest)) {}

  const std::string& digest() const { return digest_; }
  std::size_t size() const { return rates_.size(); }
  void set(std::size_t index, double rate) { rates_[index] = rate; }
  bool contains(std::size_t index) const { return rates_.count(index) != 0; }

  double at(std::size_t index) const {
    const auto it = rates_.find(index);
    if (it == rates_.end())
      throw std::out_of_range("WMMSE cache has no reference for sample " + std::to_string(index));
    return it->second;
  }

  /// Throws if the cache was built for different data.
  void require_matches(const Dataset& ds) const {
    const std::string d = dataset_digest(ds);
    if (d != digest_) throw std::runtime_error("stale WMMSE cache: digest " + digest_ + " does not match dataset " + d);
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["digest"] = digest_;
    j["entries"] = nlohmann::json::array();
    for (const auto& [i, r] : rates_) j["entries"].push_back({{"index", i}, {"sum_rate_nats", r}});
    return j;
  }

  static WmmseCache from_json(const nlohmann::json& j) {
    WmmseCache c(j.at("digest").get<std::string>());
    for (const auto& e : j.at("entries")) c.set(e.at("index").get<std::size_t>(), e.at("sum_rate_nats").get<double>());
    return c;
  }

 private:
  std::string digest_;
  std::map<std::size_t, double> rates_;
};

inline WmmseCache build_wmmse_cache(const Dataset& ds, const WmmseOptions& opt = {}, std::size_t workers = 1) {
  std::vector<double> rates(ds.size());
  parallel_for(ds.size(), workers, [&](std::size_t i) {
    const auto& s = ds.samples[i];
    const auto res = wmmse(s.h, s.assoc, ds.power_budget, ds.noise_power, opt);
    rates[i] = sum_rate(s.h, s.assoc, res.v, ds.noise_power);
  });
  WmmseCache c(dataset_digest(ds));
  for (std::size_t i = 0; i < rates.size(); ++i) c.set(i, rates[i]);
  return c;
}

inline void save_wmmse_cache(const std::filesystem::path& path, const WmmseCache& c) {
  write_file_atomic(path, c.to_json().dump(1) + "\n");
}

inline WmmseCache load_wmmse_cache(const std::filesystem::path& path) {
  return WmmseCache::from_json(nlohmann::json::parse(read_file(path)));
}

/// Loads `path` if it matches `ds`, otherwise builds and writes a fresh cache.
inline WmmseCache ensure_wmmse_cache(const std::filesystem::path& path, const Dataset& ds, const WmmseOptions& opt = {},
                                     std::size_t workers = 1) {
  if (std::filesystem::exists(path)) {
    auto c = load_wmmse_cache(path);
    if (c.digest() == dataset_digest(ds)) return c;
  }
  auto c = build_wmmse_cache(ds, opt, workers);
  save_wmmse_cache(path, c);
  return c;
}

// ---------------------------------------------------------------------------

struct EvalResult {
  double mean_norm_rate = 0.0;
  std::vector<double> sum_rates;  // nats
  std::vector<double> ratios;
};

using Policy = std::function<Tensor(const Sample&)>;

/// Normalized sum rate of an arbitrary policy against the cached references.
inline EvalResult evaluate_policy(const Policy& policy, const Dataset& ds, const WmmseCache& cache,
                                  std::size_t workers = 1) {
  cache.require_matches(ds);
  for (std::size_t i = 0; i < ds.size(); ++i) (void)cache.at(i);
  EvalResult r;
  r.sum_rates.resize(ds.size());
  r.ratios.resize(ds.size());
  parallel_for(ds.size(), workers, [&](std::size_t i) {
    const auto& s = ds.samples[i];
    r.sum_rates[i] = sum_rate(s.h, s.assoc, policy(s), ds.noise_power);
    const double ref = cache.at(i);
    if (!(ref > 0.0)) throw std::invalid_argument("evaluate: zero reference sum rate for sample " + std::to_string(i));
    r.ratios[i] = r.sum_rates[i] / ref;
  });
  r.mean_norm_rate = r.ratios.empty() ? 0.0 : std::accumulate(r.ratios.begin(), r.ratios.end(), 0.0) / r.ratios.size();
  return r;
}

inline EvalResult evaluate(const Model& model, const Dataset& ds, const WmmseCache& cache, std::size_t workers = 1) {
  return evaluate_policy([&](const Sample& s) { return predict(model, s.h, s.assoc, ds.power_budget); }, ds, cache,
                         workers);
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 64;
  double learning_rate = 0.005;
  std::size_t epochs = 40;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;  // 0 disables evaluation
  double grad_clip = 0.0;      // global-norm clip; 0 disables
  std::size_t workers = 1;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double eval_norm_rate = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
};

/// Adam with first and second moments kept separately for real and imaginary parts.
class Adam {
 public:
  Adam(const std::vector<Tensor*>& params, double lr, double b1, double b2, double eps)
      : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {
    for (auto* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
  }

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto upd = [&](double& m, double& v, double g) {
      m = b1_ * m + (1.0 - b1_) * g;
      v = b2_ * v + (1.0 - b2_) * g * g;
      return lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
    };
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto& x = *params[p];
      for (std::size_t i = 0; i < x.size(); ++i) {
        double mr = m_[p][i].real(), mi = m_[p][i].imag();
        double vr = v_[p][i].real(), vi = v_[p][i].imag();
        const double dr = upd(mr, vr, grads[p][i].real());
        const double di = upd(mi, vi, grads[p][i].imag());
        m_[p][i] = cplx(mr, mi);
        v_[p][i] = cplx(vr, vi);
        x[i] -= cplx(dr, di);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// Thrown when a batch produces a non-finite loss or gradient; carries the
/// parameters from before that batch.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, Model last_good) : std::runtime_error(what), last_good(std::move(last_good)) {}
  Model last_good;
};

/// Loss and dL/dz̄ for every parameter on one batch, split over `workers`
/// shards whose gradients are summed in shard order.
inline std::pair<double, std::vector<Tensor>> loss_and_grad(const Model& model, const Dataset& ds,
                                                            const std::vector<std::size_t>& batch,
                                                            std::size_t workers = 1) {
  const std::size_t shards = std::max<std::size_t>(1, std::min(workers, batch.size()));
  std::vector<double> losses(shards, 0.0);
  std::vector<std::vector<Tensor>> grads(shards);
  const double scale = 1.0 / static_cast<double>(batch.size());
  parallel_for(shards, shards, [&](std::size_t s) {
    std::vector<std::size_t> part;
    for (std::size_t i = s; i < batch.size(); i += shards) part.push_back(batch[i]);
    ad::Tape tape;
    const ModelVars vars = bind(tape, model.params, true);
    const ad::Var l = batch_loss(tape, model, vars, ds, part, scale);
    tape.backward(l);
    losses[s] = l.value()[0].real();
    for (const auto& v : vars.all) grads[s].push_back(tape.grad(v));
  });
  for (std::size_t s = 1; s < shards; ++s) {
    losses[0] += losses[s];
    for (std::size_t p = 0; p < grads[0].size(); ++p) grads[0][p] += grads[s][p];
  }
  return {losses[0], std::move(grads[0])};
}

using EpochCallback = std::function<void(const EpochRecord&, const Model&)>;

/// Shuffled mini-batch Adam on the negative sum rate. Evaluation uses
/// `eval_ds` and `cache` when both are given.
inline History train(Model& model, const TrainConfig& cfg, const Dataset& train_ds, const Dataset* eval_ds = nullptr,
                     const WmmseCache* cache = nullptr, const EpochCallback& on_epoch = {}) {
  if (cfg.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(cfg.learning_rate >= 0.0)) throw std::invalid_argument("train: learning_rate must be non-negative");
  if (train_ds.size() == 0) throw std::invalid_argument("train: empty training set");
  if (eval_ds && (eval_ds->power_budget != train_ds.power_budget || eval_ds->noise_power != train_ds.noise_power))
    throw std::invalid_argument("train: training and evaluation sets use different P or noise power");
  History hist;
  auto params = model.params.tensors();
  Adam opt(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng rng(splitmix64(cfg.seed ^ 0x7e11ULL));
  std::vector<std::size_t> order(train_ds.size());
  std::iota(order.begin(), order.end(), 0);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(order.size(), start + cfg.batch_size)));
      auto [l, grads] = loss_and_grad(model, train_ds, batch, cfg.workers);
      double gnorm2 = 0.0;
      for (const auto& g : grads) gnorm2 += g.squared_norm();
      if (!std::isfinite(l) || !std::isfinite(gnorm2))
        throw TrainingAborted("train: non-finite loss or gradient at epoch " + std::to_string(epoch) +
                                  ", batch starting at position " + std::to_string(start),
                              model);
      if (cfg.grad_clip > 0.0 && gnorm2 > cfg.grad_clip * cfg.grad_clip) {
        const double s = cfg.grad_clip / std::sqrt(gnorm2);
        for (auto& g : grads) g *= cplx(s);
      }
      opt.step(params, grads);
      loss_sum += l * static_cast<double>(batch.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    if (eval_ds && cache && cfg.eval_every && epoch % cfg.eval_every == 0)
      rec.eval_norm_rate = evaluate(model, *eval_ds, *cache, cfg.workers).mean_norm_rate;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    hist.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, model);
  }
  return hist;
}

}  // namespace cellfree
