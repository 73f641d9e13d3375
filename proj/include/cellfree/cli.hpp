#pragma once

// Experiment commands behind the `cellfree` executable. Each command reads a
// resolved RunConfig, writes its artifacts into `out_dir` and returns an exit code.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellfree/aagnn.hpp"
#include "cellfree/baselines.hpp"
#include "cellfree/dataset.hpp"
#include "cellfree/training.hpp"
#include "cellfree/verify.hpp"

namespace cellfree::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct SweepConfig {
  std::string axis = "K";  // samples | K | N | M
  std::vector<double> values;
  std::vector<std::string> methods = {"aagnn", "aagnn_woa", "mrt"};
  std::vector<std::uint64_t> seeds;  // training repeats for the samples axis; empty = {seed}
};

struct RunConfig {
  GeometryConfig geometry;
  std::uint64_t seed = 1;
  std::size_t train_size = 1000;
  std::size_t test_size = 200;
  std::size_t workers = 1;
  std::string out_dir = "run";
  std::string train_data;  // default <out_dir>/train.cfds
  std::string test_data;   // default <out_dir>/test.cfds
  std::string checkpoint;  // default <out_dir>/model.json
  std::string checkpoint_woa;
  ModelConfig model;
  TrainConfig train;
  WmmseOptions wmmse;
  SweepConfig sweep;

  fs::path out() const { return fs::path(out_dir); }
  fs::path train_path() const { return train_data.empty() ? out() / "train.cfds" : fs::path(train_data); }
  fs::path test_path() const { return test_data.empty() ? out() / "test.cfds" : fs::path(test_data); }
  fs::path checkpoint_path() const { return checkpoint.empty() ? out() / "model.json" : fs::path(checkpoint); }
};

// ---------------------------------------------------------------------------
// Config (de)serialization. Keys mirror the struct fields; absent keys keep
// defaults. Model initialization and batch shuffling both use `seed`.

inline json to_json(const RunConfig& c) {
  json j;
  j["K"] = c.geometry.K;
  j["M"] = c.geometry.M;
  j["N"] = c.geometry.N;
  j["P"] = c.geometry.power_budget;
  j["edge_snr_db"] = c.geometry.edge_snr_db;
  j["seed"] = c.seed;
  j["train_size"] = c.train_size;
  j["test_size"] = c.test_size;
  j["workers"] = c.workers;
  j["out_dir"] = c.out_dir;
  j["train_data"] = c.train_data;
  j["test_data"] = c.test_data;
  j["checkpoint"] = c.checkpoint;
  j["checkpoint_woa"] = c.checkpoint_woa;
  j["model"] = {{"layers", c.model.layers},
                {"features", c.model.features},
                {"attention", c.model.attention},
                {"activation", c.model.activation == Activation::leaky ? "leaky" : "none"},
                {"leak_slope", c.model.leak_slope},
                {"power", c.model.power == PowerMode::full ? "full" : "clip"},
                {"input_exponent", c.model.input_exponent}};
  j["train"] = {{"batch_size", c.train.batch_size}, {"learning_rate", c.train.learning_rate},
                {"epochs", c.train.epochs},         {"eval_every", c.train.eval_every},
                {"grad_clip", c.train.grad_clip}};
  j["wmmse"] = {{"max_outer_iters", c.wmmse.max_outer_iters},
                {"objective_tol", c.wmmse.objective_tol},
                {"power_tol", c.wmmse.power_tol}};
  j["sweep"] = {{"axis", c.sweep.axis}, {"values", c.sweep.values}, {"methods", c.sweep.methods},
                {"seeds", c.sweep.seeds}};
  return j;
}

namespace detail {

template <class T>
void take(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace detail

inline RunConfig from_json(const json& j) {
  using detail::take;
  RunConfig c;
  take(j, "K", c.geometry.K);
  take(j, "M", c.geometry.M);
  take(j, "N", c.geometry.N);
  take(j, "P", c.geometry.power_budget);
  take(j, "edge_snr_db", c.geometry.edge_snr_db);
  take(j, "seed", c.seed);
  take(j, "train_size", c.train_size);
  take(j, "test_size", c.test_size);
  take(j, "workers", c.workers);
  take(j, "out_dir", c.out_dir);
  take(j, "train_data", c.train_data);
  take(j, "test_data", c.test_data);
  take(j, "checkpoint", c.checkpoint);
  take(j, "checkpoint_woa", c.checkpoint_woa);
  c.model.seed = c.seed;
  c.train.seed = c.seed;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    take(m, "layers", c.model.layers);
    take(m, "features", c.model.features);
    take(m, "attention", c.model.attention);
    take(m, "leak_slope", c.model.leak_slope);
    take(m, "input_exponent", c.model.input_exponent);
    if (m.contains("activation")) {
      const auto a = m.at("activation").get<std::string>();
      if (a != "leaky" && a != "none") throw std::invalid_argument("config: model.activation must be leaky or none");
      c.model.activation = a == "leaky" ? Activation::leaky : Activation::none;
    }
    if (m.contains("power")) {
      const auto p = m.at("power").get<std::string>();
      if (p != "full" && p != "clip") throw std::invalid_argument("config: model.power must be full or clip");
      c.model.power = p == "full" ? PowerMode::full : PowerMode::clip;
    }
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    take(t, "batch_size", c.train.batch_size);
    take(t, "learning_rate", c.train.learning_rate);
    take(t, "epochs", c.train.epochs);
    take(t, "eval_every", c.train.eval_every);
    take(t, "grad_clip", c.train.grad_clip);
  }
  if (j.contains("wmmse")) {
    const auto& w = j.at("wmmse");
    take(w, "max_outer_iters", c.wmmse.max_outer_iters);
    take(w, "objective_tol", c.wmmse.objective_tol);
    take(w, "power_tol", c.wmmse.power_tol);
  }
  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    take(s, "axis", c.sweep.axis);
    take(s, "values", c.sweep.values);
    take(s, "methods", c.sweep.methods);
    take(s, "seeds", c.sweep.seeds);
  }
  c.train.workers = c.workers;
  if (c.geometry.K < 1 || c.geometry.M < 1 || c.geometry.N < 1) throw std::invalid_argument("config: K, M, N must be >= 1");
  if (!(c.geometry.power_budget > 0.0)) throw std::invalid_argument("config: P must be positive");
  if (c.train.batch_size < 1) throw std::invalid_argument("config: train.batch_size must be >= 1");
  if (!(c.train.learning_rate > 0.0)) throw std::invalid_argument("config: train.learning_rate must be positive");
  if (c.workers < 1) throw std::invalid_argument("config: workers must be >= 1");
  return c;
}

/// defaults <- file <- overrides, each a (possibly partial) JSON object.
inline RunConfig resolve(const json& file, const json& overrides) {
  json merged = to_json(RunConfig{});
  merged.merge_patch(file);
  merged.merge_patch(overrides);
  return from_json(merged);
}

// ---------------------------------------------------------------------------
// CSV helpers.

inline std::string num(double x) {
  if (std::isnan(x)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

class Csv {
 public:
  explicit Csv(const std::vector<std::string>& header) { row(header); }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << quote(cells[i]);
    out_ << '\n';
  }
  static std::string quote(const std::string& cell) {
    if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
    std::string q = "\"";
    for (char ch : cell) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  }
  std::string str() const { return out_.str(); }
  void write(const fs::path& p) const { write_file_atomic(p, str()); }

 private:
  std::ostringstream out_;
};

inline std::string history_csv(const History& h) {
  Csv csv({"epoch", "train_loss", "eval_norm_rate", "seconds"});
  for (const auto& r : h.epochs) csv.row({std::to_string(r.epoch), num(r.train_loss), num(r.eval_norm_rate), num(r.seconds)});
  return csv.str();
}

inline double mean_of(const std::vector<double>& x) {
  return x.empty() ? 0.0 : std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

/// Population standard deviation.
inline double std_of(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// Shared steps.

inline void echo_config(const RunConfig& c, const std::string& command, json extra = json::object()) {
  fs::create_directories(c.out());
  json j = to_json(c);
  j["command"] = command;
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_file_atomic(c.out() / (command + ".config.json"), j.dump(2) + "\n");
}

inline Dataset load_required(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw std::runtime_error(std::string("missing ") + what + " dataset: " + p.string());
  return load_cfds(p);
}

inline Model load_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw std::runtime_error("missing checkpoint: " + p.string());
  return load_model(p);
}

inline fs::path cache_path(const RunConfig& c, const Dataset& ds) {
  return c.out() / ("wmmse_cache_" + dataset_digest(ds).substr(0, 16) + ".json");
}

inline WmmseCache cache_for(const RunConfig& c, const Dataset& ds) {
  return ensure_wmmse_cache(cache_path(c, ds), ds, c.wmmse, c.workers);
}

inline std::string method_name(const Model& m) { return m.config.attention ? "aagnn" : "aagnn_woa"; }

inline Model train_model(const RunConfig& c, ModelConfig mc, const Dataset& tr, const Dataset* te,
                         const WmmseCache* cache, History* hist, std::ostream& log) {
  Model model = init_model(mc, typical_channel_norm(tr));
  const History h = train(model, c.train, tr, te, cache, [&log](const EpochRecord& r, const Model&) {
    log << "epoch " << r.epoch << " loss " << num(r.train_loss) << " eval " << num(r.eval_norm_rate) << " t "
        << num(r.seconds) << "s\n";
  });
  if (hist) *hist = h;
  return model;
}

// ---------------------------------------------------------------------------
// Commands.

inline int cmd_gen_data(const RunConfig& c, std::ostream& log) {
  const Dataset tr = generate_dataset(c.geometry, c.train_size, c.seed);
  const Dataset te = generate_dataset(c.geometry, c.test_size, splitmix64(c.seed ^ 0x7e57ULL));
  fs::create_directories(c.train_path().parent_path().empty() ? "." : c.train_path().parent_path());
  fs::create_directories(c.test_path().parent_path().empty() ? "." : c.test_path().parent_path());
  save_cfds(c.train_path(), tr);
  save_cfds(c.test_path(), te);
  json sc;
  sc["K"] = c.geometry.K;
  sc["M"] = c.geometry.M;
  sc["N"] = c.geometry.N;
  sc["P"] = c.geometry.power_budget;
  sc["noise_power"] = tr.noise_power;
  sc["edge_snr_db"] = c.geometry.edge_snr_db;
  sc["ap_positions"] = json::array();
  for (const auto& p : place_aps(c.geometry.M, c.geometry.isd)) sc["ap_positions"].push_back({p.x, p.y});
  sc["train"] = {{"path", c.train_path().string()}, {"count", tr.size()}, {"digest", dataset_digest(tr)}};
  sc["test"] = {{"path", c.test_path().string()}, {"count", te.size()}, {"digest", dataset_digest(te)}};
  echo_config(c, "gen-data");
  write_file_atomic(c.out() / "scenario.json", sc.dump(2) + "\n");
  log << "wrote " << tr.size() << " training and " << te.size() << " test samples to " << c.out().string() << "\n";
  return 0;
}

inline int cmd_verify(const RunConfig& c, std::ostream& log) {
  const auto results = verify::run_all();
  Csv csv({"check_name", "status", "detail"});
  bool ok = true;
  for (const auto& r : results) {
    csv.row({r.name, r.pass ? "PASS" : "FAIL", r.detail});
    log << (r.pass ? "PASS " : "FAIL ") << r.name << "  " << r.detail << "\n";
    ok = ok && r.pass;
  }
  fs::create_directories(c.out());
  csv.write(c.out() / "verify.csv");
  echo_config(c, "verify");
  return ok ? 0 : 1;
}

inline void write_eval_csv(const fs::path& p, const Dataset& te, const WmmseCache& cache,
                           const std::vector<std::pair<std::string, EvalResult>>& methods) {
  Csv csv({"sample_id", "method", "sum_rate_nats", "norm_rate"});
  for (const auto& [name, r] : methods)
    for (std::size_t i = 0; i < te.size(); ++i) csv.row({std::to_string(i), name, num(r.sum_rates[i]), num(r.ratios[i])});
  for (std::size_t i = 0; i < te.size(); ++i) csv.row({std::to_string(i), "wmmse", num(cache.at(i)), num(1.0)});
  csv.write(p);
}

inline EvalResult eval_mrt(const Dataset& te, const WmmseCache& cache, std::size_t workers) {
  return evaluate_policy([&](const Sample& s) { return mrt(s.h, s.assoc, te.power_budget); }, te, cache, workers);
}

inline int cmd_train(const RunConfig& c, std::ostream& log) {
  const Dataset tr = load_required(c.train_path(), "training");
  const Dataset te = load_required(c.test_path(), "test");
  fs::create_directories(c.out());
  echo_config(c, "train", {{"train_digest", dataset_digest(tr)}, {"test_digest", dataset_digest(te)}});
  const WmmseCache cache = cache_for(c, te);
  Model model = init_model(c.model, typical_channel_norm(tr));
  History hist;
  try {
    train(model, c.train, tr, &te, &cache, [&](const EpochRecord& r, const Model&) {
      hist.epochs.push_back(r);
      log << "epoch " << r.epoch << " loss " << num(r.train_loss) << " eval " << num(r.eval_norm_rate) << "\n";
      write_file_atomic(c.out() / "history.csv", history_csv(hist));
    });
  } catch (const TrainingAborted& e) {
    save_model(c.checkpoint_path(), e.last_good);
    write_file_atomic(c.out() / "history.csv", history_csv(hist));
    log << "training aborted: " << e.what() << "; last good parameters saved to " << c.checkpoint_path().string()
        << "\n";
    return 1;
  }
  write_file_atomic(c.out() / "history.csv", history_csv(hist));
  save_model(c.checkpoint_path(), model);
  const EvalResult r = evaluate(model, te, cache, c.workers);
  write_eval_csv(c.out() / "eval.csv", te, cache, {{method_name(model), r}, {"mrt", eval_mrt(te, cache, c.workers)}});
  log << "final mean normalized sum rate " << num(r.mean_norm_rate) << "\n";
  return 0;
}

inline int cmd_eval(const RunConfig& c, std::ostream& log) {
  const Dataset te = load_required(c.test_path(), "test");
  const Model model = load_checkpoint(c.checkpoint_path());
  fs::create_directories(c.out());
  echo_config(c, "eval", {{"test_digest", dataset_digest(te)}});
  const WmmseCache cache = cache_for(c, te);
  std::vector<std::pair<std::string, EvalResult>> rows{{method_name(model), evaluate(model, te, cache, c.workers)}};
  if (!c.checkpoint_woa.empty()) {
    const Model woa = load_checkpoint(c.checkpoint_woa);
    rows.emplace_back(method_name(woa), evaluate(woa, te, cache, c.workers));
  }
  rows.emplace_back("mrt", eval_mrt(te, cache, c.workers));
  write_eval_csv(c.out() / "eval.csv", te, cache, rows);
  for (const auto& [name, r] : rows) log << name << " mean normalized sum rate " << num(r.mean_norm_rate) << "\n";
  return 0;
}

inline int cmd_baseline(const RunConfig& c, std::ostream& log) {
  const Dataset te = load_required(c.test_path(), "test");
  fs::create_directories(c.out());
  echo_config(c, "baseline", {{"test_digest", dataset_digest(te)}});
  std::vector<WmmseResult> res(te.size());
  parallel_for(te.size(), c.workers, [&](std::size_t i) {
    const auto& s = te.samples[i];
    res[i] = wmmse(s.h, s.assoc, te.power_budget, te.noise_power, c.wmmse);
  });
  Csv csv({"sample_id", "method", "sum_rate_nats", "converged", "iters"});
  WmmseCache cache(dataset_digest(te));
  std::size_t converged = 0;
  for (std::size_t i = 0; i < te.size(); ++i) {
    const auto& s = te.samples[i];
    const double rm = sum_rate(s.h, s.assoc, mrt(s.h, s.assoc, te.power_budget), te.noise_power);
    const double rw = sum_rate(s.h, s.assoc, res[i].v, te.noise_power);
    cache.set(i, rw);
    converged += res[i].trace.converged ? 1 : 0;
    csv.row({std::to_string(i), "mrt", num(rm), "1", "0"});
    csv.row({std::to_string(i), "wmmse", num(rw), res[i].trace.converged ? "1" : "0",
             std::to_string(res[i].trace.iterations)});
  }
  csv.write(c.out() / "baseline.csv");
  save_wmmse_cache(cache_path(c, te), cache);
  log << "wmmse converged on " << converged << " of " << te.size() << " samples\n";
  return 0;
}

inline Dataset with_axis(const GeometryConfig& base, const std::string& axis, std::size_t value, std::size_t count,
                         std::uint64_t seed) {
  GeometryConfig g = base;
  if (axis == "K")
    g.K = value;
  else if (axis == "N")
    g.N = value;
  else if (axis == "M")
    g.M = value;
  else
    throw std::invalid_argument("sweep: unknown axis " + axis);
  return generate_dataset(g, count, seed);
}

inline int cmd_sweep(const RunConfig& c, std::ostream& log) {
  const auto& s = c.sweep;
  if (s.values.empty()) throw std::invalid_argument("sweep: no axis values given");
  for (const auto& m : s.methods)
    if (m != "aagnn" && m != "aagnn_woa" && m != "mrt") throw std::invalid_argument("sweep: unknown method " + m);
  const auto has = [&s](const char* m) { return std::find(s.methods.begin(), s.methods.end(), m) != s.methods.end(); };
  fs::create_directories(c.out());
  echo_config(c, "sweep");
  Csv csv({"axis", "axis_value", "method", "mean_norm_rate", "std", "n", "seed"});
  auto emit = [&](double value, const std::string& method, const EvalResult& r, std::uint64_t seed) {
    csv.row({s.axis, num(value), method, num(r.mean_norm_rate), num(std_of(r.ratios)), std::to_string(r.ratios.size()),
             std::to_string(seed)});
    log << s.axis << "=" << num(value) << " " << method << " " << num(r.mean_norm_rate) << "\n";
    csv.write(c.out() / "sweep.csv");
  };
  if (s.axis == "samples") {
    const Dataset tr = load_required(c.train_path(), "training");
    const Dataset te = load_required(c.test_path(), "test");
    const WmmseCache cache = cache_for(c, te);
    const std::vector<std::uint64_t> seeds = s.seeds.empty() ? std::vector<std::uint64_t>{c.seed} : s.seeds;
    for (double value : s.values) {
      const auto n = static_cast<std::size_t>(value);
      if (n < 1 || n > tr.size() || static_cast<double>(n) != value)
        throw std::invalid_argument("sweep: sample count " + num(value) + " outside 1.." + std::to_string(tr.size()));
      const Dataset sub = head(tr, n);
      for (auto seed : seeds) {
        RunConfig rc = c;
        rc.train.seed = seed;
        for (bool attention : {true, false}) {
          if (!has(attention ? "aagnn" : "aagnn_woa")) continue;
          ModelConfig mc = c.model;
          mc.attention = attention;
          mc.seed = seed;
          rc.train.eval_every = 0;
          const Model m = train_model(rc, mc, sub, nullptr, nullptr, nullptr, log);
          emit(value, method_name(m), evaluate(m, te, cache, c.workers), seed);
        }
        if (has("mrt")) emit(value, "mrt", eval_mrt(te, cache, c.workers), seed);
      }
    }
  } else {
    std::vector<Model> models;
    if (has("aagnn")) models.push_back(load_checkpoint(c.checkpoint_path()));
    if (has("aagnn_woa")) {
      if (c.checkpoint_woa.empty()) throw std::runtime_error("missing checkpoint: sweep method aagnn_woa needs checkpoint_woa");
      models.push_back(load_checkpoint(c.checkpoint_woa));
    }
    for (double value : s.values) {
      const auto v = static_cast<std::size_t>(value);
      if (v < 1 || static_cast<double>(v) != value) throw std::invalid_argument("sweep: bad axis value " + num(value));
      const Dataset te = with_axis(c.geometry, s.axis, v, c.test_size, splitmix64(c.seed ^ 0x7e57ULL));
      const WmmseCache cache = cache_for(c, te);
      for (const auto& m : models) emit(value, method_name(m), evaluate(m, te, cache, c.workers), c.seed);
      if (has("mrt")) emit(value, "mrt", eval_mrt(te, cache, c.workers), c.seed);
    }
  }
  csv.write(c.out() / "sweep.csv");
  return 0;
}

}  // namespace cellfree::cli
