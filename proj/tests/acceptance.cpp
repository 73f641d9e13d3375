// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance <path to cellfree executable>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "cellfree/cli.hpp"

using namespace cellfree;
using verify::CheckResult;
using verify::detail::num;

namespace {

std::size_t workers() { return std::max(1u, std::thread::hardware_concurrency()); }

GeometryConfig desk() {
  GeometryConfig g;
  g.K = 4;
  g.N = 8;
  g.M = 3;
  g.edge_snr_db = 5.0;
  return g;
}

CheckResult combine(const std::string& name, const std::vector<CheckResult>& parts) {
  CheckResult r{name, true, ""};
  for (const auto& p : parts) {
    r.pass = r.pass && p.pass;
    r.detail += (r.detail.empty() ? "" : "; ") + p.name + (p.pass ? " ok" : " FAILED") + " (" + p.detail + ")";
  }
  return r;
}

CheckResult wmmse_oracle() {
  Rng rng(12);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  double worst_drop = 0.0, worst_power = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t K = dim(rng), M = dim(rng), N = dim(rng);
    const Tensor h = verify::detail::gaussian_tensor({K, M, N}, rng);
    const Association d = verify::detail::random_assoc(K, M, rng, true);
    const auto res = wmmse(h, d, 1.0, 0.05);
    const auto& r = res.trace.sum_rates;
    for (std::size_t i = 1; i < r.size(); ++i) worst_drop = std::max(worst_drop, r[i - 1] - r[i]);
    for (double p : per_ap_power(res.v)) worst_power = std::max(worst_power, p - 1.0);
  }
  double worst_single = 0.0;
  for (int t = 0; t < 20; ++t) {
    const std::size_t M = 1 + t % 4, N = 1 + (t / 4) % 4;
    const Tensor h = verify::detail::gaussian_tensor({1, M, N}, rng);
    const Association d(1, M, 1);
    const double P = 1.5, noise = 0.2;
    double amp = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n) s += std::norm(h(0, m, n));
      amp += std::sqrt(P * s);
    }
    const double optimum = std::log1p(amp * amp / noise);
    worst_single = std::max(worst_single, verify::detail::rel(sum_rate(h, d, wmmse(h, d, P, noise).v, noise), optimum));
  }
  return {"wmmse_oracle", worst_drop <= 1e-8 && worst_power <= 1e-8 && worst_single <= 1e-4,
          "100 instances: max drop " + num(worst_drop) + ", max excess power " + num(worst_power) +
              "; 20 single-UE instances: max relative gap " + num(worst_single)};
}

CheckResult baseline_ordering() {
  const Dataset ds = generate_dataset(desk(), 200, 31);
  std::vector<int> ok(ds.size(), 0);
  parallel_for(ds.size(), workers(), [&](std::size_t i) {
    const auto& s = ds.samples[i];
    const double w = sum_rate(s.h, s.assoc, wmmse(s.h, s.assoc, ds.power_budget, ds.noise_power).v, ds.noise_power);
    const double m = sum_rate(s.h, s.assoc, mrt(s.h, s.assoc, ds.power_budget), ds.noise_power);
    ok[i] = w >= m ? 1 : 0;
  });
  const int wins = std::count(ok.begin(), ok.end(), 1);
  return {"baseline_ordering", wins >= 190, std::to_string(wins) + " of 200 instances with wmmse >= mrt"};
}

struct Trained {
  std::uint64_t seed;
  Model att, woa;
  double att_rate = 0.0, woa_rate = 0.0;
};

std::vector<Trained> train_desk(std::ostream& log) {
  std::vector<Trained> out;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Dataset tr = generate_dataset(desk(), 1000, seed);
    const Dataset te = generate_dataset(desk(), 200, splitmix64(seed ^ 0x7e57ULL));
    const WmmseCache cache = build_wmmse_cache(te, {}, workers());
    Trained t{seed, {}, {}};
    for (bool attention : {true, false}) {
      ModelConfig mc;
      mc.attention = attention;
      mc.seed = seed;
      TrainConfig tc;
      tc.seed = seed;
      tc.eval_every = 0;
      tc.workers = workers();
      Model m = init_model(mc, typical_channel_norm(tr));
      const auto t0 = std::chrono::steady_clock::now();
      train(m, tc, tr, nullptr, nullptr);
      const double rate = evaluate(m, te, cache, workers()).mean_norm_rate;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << "  seed " << seed << (attention ? " aagnn " : " aagnn_woa ") << num(rate) << " (" << num(secs) << " s)\n";
      (attention ? t.att : t.woa) = std::move(m);
      (attention ? t.att_rate : t.woa_rate) = rate;
    }
    out.push_back(std::move(t));
  }
  return out;
}

CheckResult desk_learning(const std::vector<Trained>& runs) {
  std::vector<double> r;
  std::string each;
  for (const auto& t : runs) {
    r.push_back(t.att_rate);
    each += (each.empty() ? "" : ", ") + num(t.att_rate);
  }
  std::sort(r.begin(), r.end());
  const double median = r[r.size() / 2];
  return {"desk_scale_learning", median >= 0.80, "median " + num(median) + " over seeds [" + each + "], target 0.80"};
}

CheckResult trained_equivariance(const std::vector<Trained>& runs) {
  const auto& t = runs.front();
  const double scale = t.att.params.input_scale / std::sqrt(8.0);
  double worst = 0.0;
  for (const Model* m : {&t.att, &t.woa})
    worst = std::max(worst, verify::model_equivariance_deviation(*m, 4, 3, 8, 100, 77, scale));
  return {"trained_equivariance", worst <= 1e-6, "100 triples at K=4 M=3 N=8, max relative deviation " + num(worst)};
}

CheckResult end_to_end_equivariance(const std::vector<Trained>& runs) {
  return combine("end_to_end_3d_pe", {verify::model_equivariance_check(true), verify::model_equivariance_check(false),
                                      trained_equivariance(runs)});
}

CheckResult generalization(const std::vector<Trained>& runs, std::ostream& log) {
  bool ran = true;
  std::string err;
  const auto sweep = [&](const char* axis, std::size_t lo, std::size_t hi) {
    for (std::size_t v = lo; v <= hi; ++v) {
      try {
        const Dataset te = cli::with_axis(desk(), axis, v, 20, 500 + v);
        const WmmseCache cache = build_wmmse_cache(te, {}, workers());
        const double r = evaluate(runs.front().att, te, cache, workers()).mean_norm_rate;
        if (!std::isfinite(r)) throw std::runtime_error("non-finite rate");
      } catch (const std::exception& e) {
        ran = false;
        err += std::string(" ") + axis + "=" + std::to_string(v) + ": " + e.what();
      }
    }
  };
  sweep("K", 2, 8);
  sweep("N", 4, 12);
  sweep("M", 1, 5);

  const Dataset te8 = cli::with_axis(desk(), "K", 8, 200, 808);
  const WmmseCache cache8 = build_wmmse_cache(te8, {}, workers());
  std::vector<double> att, woa;
  for (const auto& t : runs) {
    att.push_back(evaluate(t.att, te8, cache8, workers()).mean_norm_rate);
    woa.push_back(evaluate(t.woa, te8, cache8, workers()).mean_norm_rate);
    log << "  K=8 seed " << t.seed << " aagnn " << num(att.back()) << " aagnn_woa " << num(woa.back()) << "\n";
  }
  const double a = cli::mean_of(att), w = cli::mean_of(woa);
  return {"generalization", ran && a > w,
          std::string(ran ? "all K 2..8, N 4..12, M 1..5 evaluated" : "errors:" + err) + "; K=8 mean aagnn " + num(a) +
              " vs aagnn_woa " + num(w)};
}

CheckResult roundtrips(const std::vector<Trained>& runs, const std::string& exe) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / ("cellfree_acceptance_" + std::to_string(getpid()));
  fs::create_directories(dir);
  const Model& m = runs.front().att;
  save_model(dir / "model.json", m);
  const Model back = load_model(dir / "model.json");
  bool same = model_to_json(back).dump() == model_to_json(m).dump();
  const auto a = m.params.tensors(), b = back.params.tensors();
  for (std::size_t i = 0; same && i < a.size(); ++i) same = *a[i] == *b[i];
  CheckResult trained{"trained_checkpoint_file", same, std::to_string(m.params.parameter_count()) + " parameters"};

  const std::string cmd = "\"" + exe + "\" verify -o \"" + (dir / "verify").string() + "\" > \"" +
                          (dir / "verify.log").string() + "\" 2>&1";
  const int rc = exe.empty() ? -1 : std::system(cmd.c_str());
  CheckResult cli_verify{"verify_command", rc == 0, "exit status " + std::to_string(rc)};
  fs::remove_all(dir);
  return combine("roundtrips_and_verify",
                 {verify::dataset_roundtrip_check(), verify::checkpoint_roundtrip_check(), trained, cli_verify});
}

}  // namespace

int main(int argc, char** argv) {
  const std::string exe = argc > 1 ? argv[1] : "";
  std::vector<CheckResult> results;
  const auto report = [&results](CheckResult r) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << ": " << r.detail << std::endl;
    results.push_back(std::move(r));
  };

  report(verify::objective_equivalence_check(1000, 4));
  report(combine("commutant_dimension", verify::commutant_checks()));
  report(verify::weight_sharing_check(50, 7));
  std::cout << "training desk-scale models (3 seeds, with and without attention)" << std::endl;
  const auto runs = train_desk(std::cout);
  report(end_to_end_equivariance(runs));
  report(combine("gradient_check", {verify::gradient_check(true), verify::gradient_check(false)}));
  report(wmmse_oracle());
  report(baseline_ordering());
  report(desk_learning(runs));
  report(generalization(runs, std::cout));
  report(roundtrips(runs, exe));

  const auto failed = std::count_if(results.begin(), results.end(), [](const CheckResult& r) { return !r.pass; });
  std::cout << results.size() - failed << " of " << results.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
