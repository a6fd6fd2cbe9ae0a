// npq: dataset generation, training, evaluation and verification suites.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "npq/harness.hpp"
#include "npq/oracle.hpp"
#include "npq/properties.hpp"
#include "npq/tasks.hpp"

namespace {

void apply_overrides(npq::TrainConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    cfg.set(npq::trim(kv.substr(0, eq)), npq::trim(kv.substr(eq + 1)));
  }
}

npq::TrainConfig resolve_config(const std::string& path, const std::vector<std::string>& sets) {
  npq::TrainConfig cfg = path.empty() ? npq::TrainConfig{} : npq::load_config(path);
  apply_overrides(cfg, sets);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural priority queue on algorithmic reasoning tasks"};
  app.require_subcommand(1);

  struct {
    std::size_t count = 1, nodes = 16;
    double p_edge = 0.5;
    std::uint64_t seed = 0;
    std::string out;
  } gen;
  auto* generate = app.add_subcommand("generate", "Write shortest-path samples as JSONL");
  generate->add_option("--count", gen.count, "Number of samples")->required();
  generate->add_option("--nodes", gen.nodes, "Nodes per graph")->required();
  generate->add_option("--p-edge", gen.p_edge, "Edge probability")->capture_default_str();
  generate->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  generate->add_option("--out", gen.out, "Output path")->required();

  std::string config_path;
  std::vector<std::string> sets;
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  train->add_option("--config", config_path, "Flat key = value config")->required();
  train->add_option("--set", sets, "Override a config key (key=value)");

  std::string checkpoint, data;
  auto* eval = app.add_subcommand("eval", "Parent accuracy of a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--data", data)->required();

  struct {
    std::size_t traces = 100, max_len = 20, nodes = 6;
    std::uint64_t seed = 0;
  } ver;
  auto* verify = app.add_subcommand("verify", "Check the queue against a classical priority queue");
  verify->add_option("--traces", ver.traces)->capture_default_str();
  verify->add_option("--max-len", ver.max_len)->capture_default_str();
  verify->add_option("--nodes", ver.nodes)->capture_default_str();
  verify->add_option("--seed", ver.seed)->capture_default_str();

  struct {
    std::size_t cases = 200, max_n = 8, fuzz = 10000, runs = 50;
    std::uint64_t seed = 0;
  } prop;
  auto* proptest = app.add_subcommand("proptest", "Equivariance, conservation and bookkeeping suites");
  proptest->add_option("--cases", prop.cases, "Equivariance cases")->capture_default_str();
  proptest->add_option("--max-nodes", prop.max_n)->capture_default_str();
  proptest->add_option("--fuzz", prop.fuzz, "Request/grant instances")->capture_default_str();
  proptest->add_option("--runs", prop.runs, "Bookkeeping runs")->capture_default_str();
  proptest->add_option("--seed", prop.seed)->capture_default_str();

  struct {
    std::vector<std::string> models{"baseline", "NPQ_W", "NPQ_M"};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::size_t train_count = 200, val_count = 32, test_count = 32, train_nodes = 16, test_nodes = 64, jobs = 1;
    double p_edge = 0.5;
    std::uint64_t data_seed = 2024;
    std::string out;
  } exp;
  auto* experiment = app.add_subcommand("experiment", "Multi-seed comparison table");
  experiment->add_option("--config", config_path, "Base config (optional)");
  experiment->add_option("--set", sets, "Override a config key (key=value)");
  experiment->add_option("--models", exp.models)->delimiter(',')->capture_default_str();
  experiment->add_option("--seeds", exp.seeds)->delimiter(',')->capture_default_str();
  experiment->add_option("--train-count", exp.train_count)->capture_default_str();
  experiment->add_option("--val-count", exp.val_count)->capture_default_str();
  experiment->add_option("--test-count", exp.test_count)->capture_default_str();
  experiment->add_option("--train-nodes", exp.train_nodes)->capture_default_str();
  experiment->add_option("--test-nodes", exp.test_nodes)->capture_default_str();
  experiment->add_option("--p-edge", exp.p_edge)->capture_default_str();
  experiment->add_option("--data-seed", exp.data_seed)->capture_default_str();
  experiment->add_option("--jobs", exp.jobs, "Runs trained concurrently")->capture_default_str();
  experiment->add_option("--out", exp.out, "Write the JSON report here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (generate->parsed()) {
      npq::generate_dataset(gen.count, gen.nodes, gen.p_edge, gen.seed, gen.out);
      return 0;
    }

    if (train->parsed()) {
      if (!std::filesystem::exists(config_path)) {
        std::cerr << "error: config file '" << config_path << "' not found\n";
        return 2;
      }
      const npq::TrainConfig cfg = resolve_config(config_path, sets);
      const npq::Splits splits = npq::load_splits(cfg);
      const npq::TrainResult r = npq::train(cfg, splits);
      if (!cfg.out_dir.empty()) npq::write_outputs(cfg, r);
      std::cout << r.metrics.to_json().dump() << '\n';
      return 0;
    }

    if (eval->parsed()) {
      const npq::Model model = npq::load_checkpoint(checkpoint);
      const auto samples = npq::read_jsonl(data);
      const double acc = npq::evaluate(model, samples);
      std::cout << "model,samples,accuracy\n" << model.config().name() << ',' << samples.size() << ',' << acc << '\n';
      return 0;
    }

    if (verify->parsed()) {
      npq::Rng rng(ver.seed);
      npq::ReductionBinding binding;
      nlohmann::json out{{"traces", ver.traces}, {"divergent", 0}, {"failures", nlohmann::json::array()}};
      std::size_t divergent = 0;
      for (std::size_t k = 0; k < ver.traces; ++k) {
        const auto trace = npq::random_trace(rng, ver.max_len, ver.nodes, binding.hidden);
        const auto rep = npq::run_reduction(trace, binding, ver.nodes);
        if (!rep.ok()) {
          ++divergent;
          auto j = npq::to_json(rep);
          j["trace"] = k;
          out["failures"].push_back(j);
        }
      }
      out["divergent"] = divergent;
      std::cout << out.dump(2) << '\n';
      return divergent == 0 ? 0 : 1;
    }

    if (proptest->parsed()) {
      const auto eq = npq::check_equivariance(prop.cases, prop.max_n, prop.seed);
      const auto gc = npq::check_grant_conservation(prop.fuzz, prop.seed);
      const auto vb = npq::check_variant_bookkeeping(prop.runs, prop.seed);
      nlohmann::json out = nlohmann::json::array({eq.to_json(), gc.to_json(), vb.to_json()});
      std::cout << out.dump(2) << '\n';
      return eq.ok() && gc.ok() && vb.ok() ? 0 : 1;
    }

    if (experiment->parsed()) {
      const npq::TrainConfig base = resolve_config(config_path, sets);
      npq::Splits splits;
      splits.train = npq::generate_samples(exp.train_count, exp.train_nodes, exp.p_edge, exp.data_seed);
      splits.val = npq::generate_samples(exp.val_count, exp.train_nodes, exp.p_edge, exp.data_seed + 1);
      splits.test = npq::generate_samples(exp.test_count, exp.test_nodes, exp.p_edge, exp.data_seed + 2);
      const auto report = npq::run_experiment(base, exp.models, exp.seeds, splits, exp.jobs);
      std::cout << report.table();
      if (!exp.out.empty()) std::ofstream(exp.out) << report.to_json().dump(2) << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
