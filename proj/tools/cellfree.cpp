// cellfree: data generation, baselines, training, evaluation, sweeps and self-checks.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "cellfree/cli.hpp"

using namespace cellfree;
using cli::json;

namespace {

struct Flags {
  std::string config;
  std::optional<std::string> out, train_data, test_data, checkpoint, checkpoint_woa, axis, activation, power;
  std::optional<std::size_t> K, M, N, train_size, test_size, workers, layers, features, epochs, batch_size, eval_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> P, edge_snr_db, lr, grad_clip, leak_slope, input_exponent;
  std::optional<bool> attention;
  std::vector<double> values;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
};

void add_flags(CLI::App& app, Flags& f) {
  app.add_option("-c,--config", f.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  app.add_option("-o,--out", f.out, "Output directory");
  app.add_option("--seed", f.seed, "Seed for data, initialization and shuffling");
  app.add_option("--K", f.K, "Number of UEs");
  app.add_option("--M", f.M, "Number of APs");
  app.add_option("--N", f.N, "Antennas per AP");
  app.add_option("--P", f.P, "Per-AP power budget");
  app.add_option("--edge-snr-db", f.edge_snr_db, "SNR at the cell edge in dB");
  app.add_option("--train-size", f.train_size, "Training samples to generate");
  app.add_option("--test-size", f.test_size, "Test samples to generate");
  app.add_option("--workers", f.workers, "Worker threads for sample-level parallelism");
  app.add_option("--train-data", f.train_data, "Training CFDS file");
  app.add_option("--test-data", f.test_data, "Test CFDS file");
  app.add_option("--checkpoint", f.checkpoint, "Model checkpoint");
  app.add_option("--checkpoint-woa", f.checkpoint_woa, "No-attention model checkpoint");
  app.add_option("--layers", f.layers, "GNN layers");
  app.add_option("--features", f.features, "Feature width");
  app.add_flag("--attention,!--no-attention", f.attention, "Attention layers on or off");
  app.add_option("--activation", f.activation, "leaky or none")->check(CLI::IsMember({"leaky", "none"}));
  app.add_option("--leak-slope", f.leak_slope, "Leaky rectifier slope");
  app.add_option("--power", f.power, "Output power rule: full or clip")->check(CLI::IsMember({"full", "clip"}));
  app.add_option("--input-exponent", f.input_exponent, "Per-link channel magnitude exponent fed to the model");
  app.add_option("--epochs", f.epochs, "Training epochs");
  app.add_option("--batch-size", f.batch_size, "Mini-batch size");
  app.add_option("--lr", f.lr, "Learning rate");
  app.add_option("--eval-every", f.eval_every, "Evaluate every n epochs (0: never)");
  app.add_option("--grad-clip", f.grad_clip, "Global gradient-norm clip (0: off)");
  app.add_option("--axis", f.axis, "Sweep axis")->check(CLI::IsMember({"samples", "K", "N", "M"}));
  app.add_option("--values", f.values, "Sweep axis values");
  app.add_option("--methods", f.methods, "Sweep methods (aagnn, aagnn_woa, mrt)");
  app.add_option("--seeds", f.seeds, "Training seeds for the samples sweep");
}

template <class T>
void put(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

json overrides(const Flags& f) {
  json j = json::object(), model = json::object(), train = json::object(), sweep = json::object();
  put(j, "out_dir", f.out);
  put(j, "seed", f.seed);
  put(j, "K", f.K);
  put(j, "M", f.M);
  put(j, "N", f.N);
  put(j, "P", f.P);
  put(j, "edge_snr_db", f.edge_snr_db);
  put(j, "train_size", f.train_size);
  put(j, "test_size", f.test_size);
  put(j, "workers", f.workers);
  put(j, "train_data", f.train_data);
  put(j, "test_data", f.test_data);
  put(j, "checkpoint", f.checkpoint);
  put(j, "checkpoint_woa", f.checkpoint_woa);
  put(model, "layers", f.layers);
  put(model, "features", f.features);
  put(model, "attention", f.attention);
  put(model, "activation", f.activation);
  put(model, "leak_slope", f.leak_slope);
  put(model, "power", f.power);
  put(model, "input_exponent", f.input_exponent);
  put(train, "epochs", f.epochs);
  put(train, "batch_size", f.batch_size);
  put(train, "learning_rate", f.lr);
  put(train, "eval_every", f.eval_every);
  put(train, "grad_clip", f.grad_clip);
  put(sweep, "axis", f.axis);
  if (!f.values.empty()) sweep["values"] = f.values;
  if (!f.methods.empty()) sweep["methods"] = f.methods;
  if (!f.seeds.empty()) sweep["seeds"] = f.seeds;
  if (!model.empty()) j["model"] = model;
  if (!train.empty()) j["train"] = train;
  if (!sweep.empty()) j["sweep"] = sweep;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cell-free MIMO precoding lab: AAGNN training and WMMSE/MRT baselines"};
  app.require_subcommand(1);
  Flags flags;
  using Command = int (*)(const cli::RunConfig&, std::ostream&);
  const std::vector<std::tuple<const char*, const char*, Command>> commands = {
      {"gen-data", "Generate training and test datasets", cli::cmd_gen_data},
      {"verify", "Run the self-check battery; exits nonzero on failure", cli::cmd_verify},
      {"train", "Train a model and write history.csv, eval.csv and a checkpoint", cli::cmd_train},
      {"eval", "Evaluate a checkpoint against cached WMMSE references", cli::cmd_eval},
      {"baseline", "Run MRT and WMMSE on the test set", cli::cmd_baseline},
      {"sweep", "Sweep training set size or system dimensions", cli::cmd_sweep},
  };
  std::vector<std::pair<CLI::App*, Command>> subs;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_flags(*sub, flags);
    subs.emplace_back(sub, fn);
  }
  CLI11_PARSE(app, argc, argv);
  try {
    json file = json::object();
    if (!flags.config.empty()) {
      std::ifstream in(flags.config);
      file = json::parse(in);
    }
    const cli::RunConfig cfg = cli::resolve(file, overrides(flags));
    for (const auto& [sub, fn] : subs)
      if (sub->parsed()) return fn(cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
