#pragma once

// Training, evaluation and multi-seed experiments on the shortest-path task.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "npq/npq.hpp"
#include "npq/processor.hpp"
#include "npq/tasks.hpp"
#include "npq/tensor.hpp"

namespace npq {

using ad::Tape;
using Dataset = std::vector<DijkstraSample>;

// ---------------------------------------------------------------------------
// Models

struct ModelConfig {
  ProcessorConfig processor;
  std::optional<NpqConfig> npq;  // empty: plain MPNN baseline
  std::size_t steps = 0;         // processor steps; 0 means one per node

  std::string name() const { return npq ? npq->name() : "baseline"; }
  std::size_t steps_for(std::size_t n) const { return steps == 0 ? std::max<std::size_t>(n, 1) : steps; }
};

inline std::string to_string(Aggregator a) { return a == Aggregator::Max ? "max" : "sum"; }
inline Aggregator parse_aggregator(const std::string& s) {
  if (s == "max") return Aggregator::Max;
  if (s == "sum") return Aggregator::Sum;
  throw std::invalid_argument("aggregator must be max|sum, got '" + s + "'");
}

// "baseline", "NPQ_M", "NPQ_W", optionally followed by -P and -SA or -SV.
inline std::optional<NpqConfig> parse_model_name(const std::string& name) {
  if (name == "baseline") return std::nullopt;
  NpqConfig c;
  std::string rest;
  if (name.rfind("NPQ_M", 0) == 0) {
    c.popping = Popping::Max;
  } else if (name.rfind("NPQ_W", 0) == 0) {
    c.popping = Popping::Weighted;
  } else {
    throw std::invalid_argument("unknown model '" + name + "'");
  }
  rest = name.substr(5);
  if (rest.rfind("-P", 0) == 0) {
    c.persistent = true;
    rest = rest.substr(2);
  }
  if (rest == "-SA") {
    c.scope = Scope::SendAll;
  } else if (rest == "-SV") {
    c.scope = Scope::SingleValue;
  } else if (!rest.empty()) {
    throw std::invalid_argument("unknown model '" + name + "'");
  }
  return c;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  nlohmann::json j{{"name", m.name()},
                   {"hidden", m.processor.hidden},
                   {"steps", m.steps},
                   {"aggregator", to_string(m.processor.aggregator)},
                   {"node_features", m.processor.node_features},
                   {"edge_features", m.processor.edge_features},
                   {"graph_features", m.processor.graph_features}};
  if (m.npq) {
    j["npq"] = {{"popping", to_string(m.npq->popping)},
                {"persistent", m.npq->persistent},
                {"scope", to_string(m.npq->scope)},
                {"heads", m.npq->heads}};
  }
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  m.processor.hidden = j.at("hidden").get<std::size_t>();
  m.steps = j.at("steps").get<std::size_t>();
  m.processor.aggregator = parse_aggregator(j.at("aggregator").get<std::string>());
  m.processor.node_features = j.at("node_features").get<std::size_t>();
  m.processor.edge_features = j.at("edge_features").get<std::size_t>();
  m.processor.graph_features = j.at("graph_features").get<std::size_t>();
  if (j.contains("npq")) {
    const auto& q = j.at("npq");
    NpqConfig c;
    c.popping = parse_popping(q.at("popping").get<std::string>());
    c.persistent = q.at("persistent").get<bool>();
    c.scope = parse_scope(q.at("scope").get<std::string>());
    c.heads = q.at("heads").get<std::size_t>();
    m.npq = c;
  }
  return m;
}

class Model {
 public:
  static Model create(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.cfg_ = cfg;
    Rng rng(seed);
    m.proc_ = Processor::create(m.params_, cfg.processor, rng);
    if (cfg.npq) m.npq_ = NeuralPq::create(m.params_, *cfg.npq, cfg.processor.hidden, rng);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const Processor& processor() const { return proc_; }
  const std::optional<NeuralPq>& queue() const { return npq_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  ParentScores forward(Context& ctx, const Graph& g) const {
    const std::size_t steps = cfg_.steps_for(g.n);
    if (!npq_) return proc_.run(ctx, g, steps).scores;
    NpqMemory memory(*npq_);
    return proc_.run(ctx, g, steps, &memory).scores;
  }

  nlohmann::json checkpoint() const { return {{"model", to_json(cfg_)}, {"parameters", params_.to_json()}}; }

  static Model from_checkpoint(const nlohmann::json& j) {
    Model m = create(model_config_from_json(j.at("model")), 0);
    ParamStore loaded = ParamStore::from_json(j.at("parameters"));
    if (loaded.names() != m.params_.names()) throw std::invalid_argument("checkpoint parameters do not match the model");
    for (const auto& [name, value] : loaded) {
      if (value.shape() != m.params_.value(name).shape()) {
        throw std::invalid_argument("checkpoint parameter " + name + " has shape " + value.shape_string());
      }
    }
    m.params_ = std::move(loaded);
    return m;
  }

 private:
  ModelConfig cfg_;
  ParamStore params_;
  Processor proc_;
  std::optional<NeuralPq> npq_;
};

inline void save_checkpoint(const std::filesystem::path& path, const Model& m, const nlohmann::json& extra = {}) {
  nlohmann::json j = m.checkpoint();
  if (extra.is_object()) {
    for (const auto& [k, v] : extra.items()) j[k] = v;
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << j.dump() << '\n';
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return Model::from_checkpoint(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------------------
// Loss and accuracy

// Row of `scores` holding candidate `parent[i]` for node i.
inline std::vector<std::size_t> target_rows(const ParentScores& s, const std::vector<std::size_t>& parent) {
  if (parent.size() != s.n) throw std::invalid_argument("parent array has wrong length");
  std::vector<std::size_t> rows(s.n, s.node.size());
  for (std::size_t r = 0; r < s.node.size(); ++r) {
    if (s.candidate[r] == parent[s.node[r]]) rows[s.node[r]] = r;
  }
  for (std::size_t i = 0; i < s.n; ++i) {
    if (rows[i] == s.node.size()) {
      throw std::invalid_argument("ground-truth parent " + std::to_string(parent[i]) + " of node " +
                                  std::to_string(i) + " is not a candidate");
    }
  }
  return rows;
}

// Mean over nodes of -log softmax(candidate scores)[true parent].
inline Tensor parent_loss(const ParentScores& s, const std::vector<std::size_t>& parent) {
  Tensor logp = ad::segment_log_softmax(s.scores, s.node, s.n);
  return ad::scale(ad::mean(ad::gather_rows(logp, target_rows(s, parent))), -1.0);
}

inline double parent_accuracy(const ParentScores& s, const std::vector<std::size_t>& parent) {
  const auto pred = s.predictions();
  std::size_t hit = 0;
  for (std::size_t i = 0; i < s.n; ++i) hit += pred[i] == parent[i];
  return s.n == 0 ? 1.0 : static_cast<double>(hit) / static_cast<double>(s.n);
}

// Node accuracy averaged per sample, then over samples.
inline double evaluate(const Model& model, const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  double total = 0.0;
  for (const auto& sample : data) {
    Context ctx(model.params());
    total += parent_accuracy(model.forward(ctx, sample.graph), sample.parent);
  }
  return total / static_cast<double>(data.size());
}

struct GuessEstimate {
  double mean = 0.0;
  double stddev = 0.0;  // across trials
};

// Accuracy of a predictor that picks uniformly among each node's candidates.
inline GuessEstimate random_guess_accuracy(const Dataset& data, std::size_t trials, std::uint64_t seed) {
  if (data.empty() || trials == 0) throw std::invalid_argument("random_guess_accuracy: nothing to simulate");
  Rng rng(seed);
  std::vector<double> results;
  for (std::size_t t = 0; t < trials; ++t) {
    double total = 0.0;
    for (const auto& sample : data) {
      const auto nbrs = sample.graph.in_neighbours();
      std::size_t hit = 0;
      for (std::size_t i = 0; i < sample.graph.n; ++i) {
        std::uniform_int_distribution<std::size_t> pick(0, nbrs[i].size());
        const std::size_t k = pick(rng);
        hit += (k == nbrs[i].size() ? i : nbrs[i][k]) == sample.parent[i];
      }
      total += static_cast<double>(hit) / static_cast<double>(sample.graph.n);
    }
    results.push_back(total / static_cast<double>(data.size()));
  }
  GuessEstimate e;
  e.mean = std::accumulate(results.begin(), results.end(), 0.0) / static_cast<double>(trials);
  double ss = 0.0;
  for (double r : results) ss += (r - e.mean) * (r - e.mean);
  e.stddev = trials > 1 ? std::sqrt(ss / static_cast<double>(trials - 1)) : 0.0;
  return e;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  bool use_npq = false;
  NpqConfig npq;
  std::size_t hidden = 32;
  std::size_t steps = 0;
  Aggregator aggregator = Aggregator::Max;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  std::size_t epochs = 40;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t patience = 0;  // epochs without improvement before stopping; 0 disables
  std::string train_data;
  std::string val_data;
  std::string test_data;
  std::string out_dir;

  std::string model_name() const { return use_npq ? npq.name() : "baseline"; }

  ModelConfig model_config() const {
    ModelConfig m;
    m.processor.hidden = hidden;
    m.processor.aggregator = aggregator;
    m.steps = steps;
    if (use_npq) m.npq = npq;
    return m;
  }

  void set(const std::string& key, const std::string& value) {
    auto bad = [&] { return std::invalid_argument("bad value '" + value + "' for config key '" + key + "'"); };
    auto as_size = [&](auto& out) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(value, &used);
      } catch (const std::logic_error&) {
        throw bad();
      }
      if (used != value.size() || v < 0) throw bad();
      out = static_cast<std::remove_reference_t<decltype(out)>>(v);
    };
    auto as_double = [&](double& out) {
      std::size_t used = 0;
      try {
        out = std::stod(value, &used);
      } catch (const std::logic_error&) {
        throw bad();
      }
      if (used != value.size()) throw bad();
    };
    if (key == "model") {
      // "baseline", "npq" (configured by the npq.* keys), or a variant name
      // such as NPQ_W-P-SV, which sets popping, persistence and scope.
      if (value == "npq") {
        use_npq = true;
      } else if (auto parsed = parse_model_name(value)) {
        use_npq = true;
        parsed->heads = npq.heads;
        npq = *parsed;
      } else if (value == "baseline") {
        use_npq = false;
      } else {
        throw bad();
      }
    } else if (key == "npq.popping") {
      npq.popping = parse_popping(value);
    } else if (key == "npq.persistent") {
      if (value != "true" && value != "false") throw bad();
      npq.persistent = value == "true";
    } else if (key == "npq.scope") {
      npq.scope = parse_scope(value);
    } else if (key == "hidden") {
      as_size(hidden);
    } else if (key == "steps") {
      as_size(steps);
    } else if (key == "aggregator") {
      aggregator = parse_aggregator(value);
    } else if (key == "npq.heads") {
      as_size(npq.heads);
    } else if (key == "lr") {
      as_double(lr);
    } else if (key == "beta1") {
      as_double(beta1);
    } else if (key == "beta2") {
      as_double(beta2);
    } else if (key == "adam_eps") {
      as_double(adam_eps);
    } else if (key == "grad_clip") {
      as_double(grad_clip);
    } else if (key == "epochs") {
      as_size(epochs);
    } else if (key == "batch_size") {
      as_size(batch_size);
    } else if (key == "seed") {
      as_size(seed);
    } else if (key == "patience") {
      as_size(patience);
    } else if (key == "train_data") {
      train_data = value;
    } else if (key == "val_data") {
      val_data = value;
    } else if (key == "test_data") {
      test_data = value;
    } else if (key == "out_dir") {
      out_dir = value;
    } else {
      throw std::invalid_argument("unknown config key '" + key + "'");
    }
  }

  void validate() const {
    if (hidden == 0) throw std::invalid_argument("hidden must be positive");
    npq.validate();
    if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("betas must be in [0, 1)");
    if (!(adam_eps > 0)) throw std::invalid_argument("adam_eps must be positive");
    if (!(grad_clip >= 0)) throw std::invalid_argument("grad_clip must be non-negative");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  }

  nlohmann::json to_json() const {
    return {{"model", model_name()},   {"hidden", hidden},         {"steps", steps},
            {"aggregator", to_string(aggregator)}, {"npq.popping", to_string(npq.popping)},
            {"npq.persistent", npq.persistent}, {"npq.scope", to_string(npq.scope)}, {"npq.heads", npq.heads},
            {"lr", lr},
            {"beta1", beta1},          {"beta2", beta2},           {"adam_eps", adam_eps},
            {"grad_clip", grad_clip},  {"epochs", epochs},         {"batch_size", batch_size},
            {"seed", seed},            {"patience", patience},     {"train_data", train_data},
            {"val_data", val_data},    {"test_data", test_data},   {"out_dir", out_dir}};
  }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Flat `key = value` lines; `#` starts a comment.
inline void apply_config_text(TrainConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  TrainConfig cfg;
  apply_config_text(cfg, buf.str());
  return cfg;
}

// ---------------------------------------------------------------------------
// Optimiser

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& params, const std::map<std::string, std::vector<double>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads) {
      auto w = params.value(name).mutable_data();
      auto& m = m_[name];
      auto& v = v_[name];
      m.resize(g.size(), 0.0);
      v.resize(g.size(), 0.0);
      for (std::size_t k = 0; k < g.size(); ++k) {
        m[k] = b1_ * m[k] + (1 - b1_) * g[k];
        v[k] = b2_ * v[k] + (1 - b2_) * g[k] * g[k];
        w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, std::size_t epoch, double loss)
      : std::runtime_error("non-finite loss " + std::to_string(loss) + " at optimiser step " + std::to_string(step) +
                           " (epoch " + std::to_string(epoch) + ")"),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;  // 0: the initial model
  double best_val = 0.0;
  double last_val = 0.0;
  std::optional<double> test_best;
  std::optional<double> test_last;
  double wall_clock_s = 0.0;
  std::uint64_t seed = 0;

  std::string csv() const {
    std::ostringstream out;
    out << "epoch,train_loss,val_acc\n" << std::setprecision(17);
    for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_acc << '\n';
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"seed", seed},         {"epochs", epochs.size()}, {"best_epoch", best_epoch},
                     {"best_val_acc", best_val}, {"last_val_acc", last_val}, {"wall_clock_s", wall_clock_s}};
    if (test_best) j["test_acc_best"] = *test_best;
    if (test_last) j["test_acc_last"] = *test_last;
    return j;
  }
};

struct TrainResult {
  Metrics metrics;
  Model best;
  Model last;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;  // optional
};

inline Splits load_splits(const TrainConfig& cfg) {
  if (cfg.train_data.empty() || cfg.val_data.empty()) throw std::invalid_argument("train_data and val_data are required");
  Splits s;
  s.train = read_jsonl(cfg.train_data);
  s.val = read_jsonl(cfg.val_data);
  if (!cfg.test_data.empty()) s.test = read_jsonl(cfg.test_data);
  if (s.train.empty() || s.val.empty()) throw std::invalid_argument("training and validation sets must be nonempty");
  return s;
}

// Summed parameter gradients of the mean loss over `batch`; returns the mean loss.
inline double batch_gradients(const Model& model, const Dataset& data, std::span<const std::size_t> batch,
                              std::map<std::string, std::vector<double>>& grads) {
  grads.clear();
  for (const auto& [name, value] : model.params()) grads[name].assign(value.size(), 0.0);
  double loss_sum = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t idx : batch) {
    Tape tape;
    Context ctx(model.params(), &tape);
    const auto& sample = data[idx];
    Tensor loss = parent_loss(model.forward(ctx, sample.graph), sample.parent);
    loss_sum += loss.item();
    if (!std::isfinite(loss.item())) return loss.item();
    tape.backward(loss);
    for (const auto& [name, g] : ctx.gradients()) {
      auto& acc = grads[name];
      const auto src = g.data();
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += w * src[k];
    }
  }
  return loss_sum * w;
}

inline void clip_gradients(std::map<std::string, std::vector<double>>& grads, double max_norm) {
  if (max_norm <= 0) return;
  double ss = 0.0;
  for (const auto& [name, g] : grads) {
    for (double x : g) ss += x * x;
  }
  const double norm = std::sqrt(ss);
  if (norm <= max_norm) return;
  const double f = max_norm / norm;
  for (auto& [name, g] : grads) {
    for (double& x : g) x *= f;
  }
}

inline TrainResult train(const TrainConfig& cfg, const Splits& data) {
  cfg.validate();
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("training and validation sets must be nonempty");
  const auto start = std::chrono::steady_clock::now();
  Model model = Model::create(cfg.model_config(), cfg.seed);
  Adam adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult r{{}, model, model};
  r.metrics.seed = cfg.seed;
  r.metrics.best_val = evaluate(model, data.val);
  r.metrics.last_val = r.metrics.best_val;

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::map<std::string, std::vector<double>> grads;
  std::size_t step = 0, stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + b, e - b);
      const double loss = batch_gradients(model, data.train, batch, grads);
      if (!std::isfinite(loss)) throw TrainingDiverged(step, epoch, loss);
      loss_total += loss * static_cast<double>(batch.size());
      clip_gradients(grads, cfg.grad_clip);
      adam.step(model.params(), grads);
      ++step;
    }
    const double val = evaluate(model, data.val);
    r.metrics.epochs.push_back({epoch, loss_total / static_cast<double>(order.size()), val});
    r.metrics.last_val = val;
    if (val > r.metrics.best_val) {
      r.metrics.best_val = val;
      r.metrics.best_epoch = epoch;
      r.best = model;
      stale = 0;
    } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
      break;
    }
  }
  r.last = model;
  if (!data.test.empty()) {
    r.metrics.test_best = evaluate(r.best, data.test);
    r.metrics.test_last = evaluate(r.last, data.test);
  }
  r.metrics.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Writes metrics.csv, best.json, last.json and summary.json into cfg.out_dir.
inline void write_outputs(const TrainConfig& cfg, const TrainResult& r) {
  const std::filesystem::path dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "metrics.csv") << r.metrics.csv();
  save_checkpoint(dir / "best.json", r.best, {{"epoch", r.metrics.best_epoch}, {"val_acc", r.metrics.best_val}});
  save_checkpoint(dir / "last.json", r.last,
                  {{"epoch", r.metrics.epochs.empty() ? 0 : r.metrics.epochs.back().epoch}, {"val_acc", r.metrics.last_val}});
  nlohmann::json summary = r.metrics.to_json();
  summary["config"] = cfg.to_json();
  std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Multi-seed experiments

struct RunSummary {
  std::string model;
  std::uint64_t seed = 0;
  Metrics metrics;
};

struct ModelRow {
  std::string model;
  double best_mean = 0, best_std = 0;
  double last_mean = 0, last_std = 0;
  double val_mean = 0;
};

struct ExperimentReport {
  std::vector<RunSummary> runs;
  std::vector<ModelRow> rows;
  GuessEstimate random_guess;

  std::string table() const {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "| Method | Best | Last |\n|---|---|---|\n";
    for (const auto& r : rows) {
      out << "| " << r.model << " | " << 100 * r.best_mean << "% ± " << 100 * r.best_std << " | "
          << 100 * r.last_mean << "% ± " << 100 * r.last_std << " |\n";
    }
    out << "\nrandom guess: " << 100 * random_guess.mean << "%\n";
    return out.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"random_guess", random_guess.mean}, {"rows", nlohmann::json::array()},
                     {"runs", nlohmann::json::array()}};
    for (const auto& r : rows) {
      j["rows"].push_back({{"model", r.model},
                           {"best_mean", r.best_mean},
                           {"best_std", r.best_std},
                           {"last_mean", r.last_mean},
                           {"last_std", r.last_std},
                           {"val_mean", r.val_mean}});
    }
    for (const auto& r : runs) {
      auto m = r.metrics.to_json();
      m["model"] = r.model;
      j["runs"].push_back(m);
    }
    return j;
  }
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double m = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return {m, xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0};
}

// Trains every (model, seed) pair on the same splits. Runs share no mutable
// state, so up to `jobs` of them train at once.
inline ExperimentReport run_experiment(const TrainConfig& base, const std::vector<std::string>& models,
                                       const std::vector<std::uint64_t>& seeds, const Splits& data,
                                       std::size_t jobs = 1) {
  if (data.test.empty()) throw std::invalid_argument("experiment needs a test split");
  std::vector<std::pair<std::string, std::uint64_t>> plan;
  for (const auto& m : models) {
    for (auto s : seeds) plan.emplace_back(m, s);
  }
  ExperimentReport report;
  report.runs.resize(plan.size());
  jobs = std::max<std::size_t>(jobs, 1);
  for (std::size_t b = 0; b < plan.size(); b += jobs) {
    std::vector<std::future<Metrics>> running;
    for (std::size_t k = b; k < std::min(plan.size(), b + jobs); ++k) {
      TrainConfig cfg = base;
      cfg.set("model", plan[k].first);
      cfg.seed = plan[k].second;
      running.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async,
                                   [cfg, &data] { return train(cfg, data).metrics; }));
    }
    for (std::size_t k = 0; k < running.size(); ++k) report.runs[b + k] = {plan[b + k].first, plan[b + k].second, running[k].get()};
  }
  for (const auto& m : models) {
    std::vector<double> best, last, val;
    for (const auto& r : report.runs) {
      if (r.model != m) continue;
      best.push_back(*r.metrics.test_best);
      last.push_back(*r.metrics.test_last);
      val.push_back(r.metrics.best_val);
    }
    ModelRow row{m};
    std::tie(row.best_mean, row.best_std) = mean_std(best);
    std::tie(row.last_mean, row.last_std) = mean_std(last);
    row.val_mean = mean_std(val).first;
    report.rows.push_back(row);
  }
  report.random_guess = random_guess_accuracy(data.test, 1000, 12345);
  return report;
}

}  // namespace npq
