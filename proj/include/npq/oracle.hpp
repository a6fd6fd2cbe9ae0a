#pragma once

// Classical max-key priority queue, and a harness that drives a Max-popping
// neural queue with exact injected functions next to it and records every
// place where the two disagree.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <iterator>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "npq/npq.hpp"

namespace npq {

// Entries with unique keys and unique values; pop() removes the entry whose
// key is largest under Compare.
template <class Key = double, class Value = std::vector<double>, class Compare = std::less<Key>>
class ClassicalPq {
 public:
  void push(const Key& key, Value value) {
    if (entries_.count(key) != 0) throw std::invalid_argument("ClassicalPq: duplicate key");
    for (const auto& [k, v] : entries_) {
      if (v == value) throw std::invalid_argument("ClassicalPq: duplicate value");
    }
    entries_.emplace(key, std::move(value));
  }

  std::pair<Key, Value> pop() {
    if (entries_.empty()) throw std::logic_error("ClassicalPq: pop on empty queue");
    auto it = std::prev(entries_.end());
    std::pair<Key, Value> out = *it;
    entries_.erase(it);
    return out;
  }

  const Key& top_key() const {
    if (entries_.empty()) throw std::logic_error("ClassicalPq: top of empty queue");
    return std::prev(entries_.end())->first;
  }

  bool erase(const Key& key) { return entries_.erase(key) != 0; }
  bool contains(const Key& key) const { return entries_.count(key) != 0; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<Key, Value, Compare>& entries() const { return entries_; }

 private:
  std::map<Key, Value, Compare> entries_;
};

struct TraceStep {
  std::optional<std::pair<double, std::vector<double>>> push;  // (key, value)
  std::optional<std::size_t> pop_to;                           // destination node
};

struct PqTrace {
  std::vector<TraceStep> steps;

  // Pops must find a non-empty queue (pop happens before the same step's
  // push), destinations must be valid nodes, pushed keys must be fresh.
  void validate(std::size_t nodes) const {
    std::size_t live = 0;
    std::vector<double> keys;
    for (std::size_t t = 0; t < steps.size(); ++t) {
      const TraceStep& s = steps[t];
      if (s.pop_to) {
        if (*s.pop_to >= nodes) throw std::invalid_argument("trace step " + std::to_string(t) + ": pop to unknown node");
        if (live == 0) throw std::invalid_argument("trace step " + std::to_string(t) + ": pop on empty queue");
        --live;
      }
      if (s.push) {
        if (std::find(keys.begin(), keys.end(), s.push->first) != keys.end()) {
          throw std::invalid_argument("trace step " + std::to_string(t) + ": duplicate key");
        }
        keys.push_back(s.push->first);
        ++live;
      }
    }
  }
};

using PayloadPq = ClassicalPq<double, std::vector<double>>;

// One timestep of the classical queue: pop the max-key entry to the
// designated node (every other node gets a zero vector), then push.
inline std::vector<std::vector<double>> classical_step(PayloadPq& pq, const TraceStep& step, std::size_t nodes,
                                                       std::size_t width) {
  std::vector<std::vector<double>> out(nodes, std::vector<double>(width, 0.0));
  if (step.pop_to) {
    if (pq.empty()) throw std::invalid_argument("classical_step: pop on empty queue");
    out.at(*step.pop_to) = pq.pop().second;
  }
  if (step.push) pq.push(step.push->first, step.push->second);
  return out;
}

// Value encoding for the reduction: coordinate 0 carries the key, the other
// coordinates the payload. Node inputs z are [pop-here, push, encoding...],
// with the push columns populated on node 0 only.
struct ReductionBinding {
  std::size_t hidden = 4;

  double key(std::span<const double> v) const { return v[0]; }  // kappa

  std::vector<double> payload(std::span<const double> v) const {  // omega
    std::vector<double> p(v.begin(), v.end());
    p[0] = 0.0;
    return p;
  }

  std::vector<double> encode(double key, const std::vector<double>& payload) const {
    if (payload.size() != hidden) throw std::invalid_argument("payload width must equal hidden");
    std::vector<double> v = payload;
    v[0] = key;
    return v;
  }

  std::size_t input_width() const { return 2 + hidden; }

  Tensor node_inputs(const TraceStep& step, std::size_t nodes) const {
    Tensor z(nodes, input_width(), 0.0);
    auto d = z.mutable_data();
    if (step.pop_to) d[*step.pop_to * input_width()] = 1.0;
    if (step.push) {
      d[1] = 1.0;
      const auto v = encode(step.push->first, step.push->second);
      std::copy(v.begin(), v.end(), d.begin() + 2);
    }
    return z;
  }

  // LeakyReLU^-1 of the key, so that the attention score equals the key.
  static double leaky_inverse(double k) { return k >= 0 ? k : k / ad::kLeakySlope; }

  void install(NeuralPq& pq) const {
    const std::size_t width = input_width(), h = hidden;
    auto column = [](const Tensor& z, std::size_t c) {
      std::vector<std::size_t> idx{c};
      return ad::gather_cols(z, idx);
    };
    NpqSlots& s = pq.slots();
    s.pop_logits = [column](Context&, const Tensor& z) { return column(z, 0); };
    s.pop_gate = [](const Tensor& x) { return x; };
    s.query = [](Context&, std::size_t, const Tensor& z) { return Tensor(z.rows(), 1, 0.0); };
    s.key = [](Context&, std::size_t, const Tensor& v) {
      std::vector<double> k(v.rows());
      for (std::size_t j = 0; j < v.rows(); ++j) k[j] = leaky_inverse(v(j, 0));
      return Tensor::column(std::move(k));
    };
    s.combine = [](Context&, std::span<const Tensor> alphas) { return alphas[0]; };
    s.message = [binding = *this](Context&, const Tensor& v) {
      std::vector<double> out;
      for (std::size_t r = 0; r < v.rows(); ++r) {
        auto p = binding.payload(v.row_span(r));
        out.insert(out.end(), p.begin(), p.end());
      }
      return Tensor(v.rows(), v.cols(), std::move(out));
    };
    s.push_value = [width, h](Context&, const Tensor& z) {
      std::vector<std::size_t> idx(h);
      std::iota(idx.begin(), idx.end(), width - h);
      return ad::gather_cols(z, idx);
    };
    s.push_value_act = [](const Tensor& x) { return x; };
    s.push_logits = [column](Context&, const Tensor& z) { return column(z, 1); };
    s.push_gate = [](const Tensor& x) { return x; };
  }
};

struct Divergence {
  std::size_t step = 0;
  std::optional<std::size_t> node;
  std::string what;
  std::string expected;
  std::string actual;
};

struct ReductionReport {
  std::size_t steps = 0;
  std::vector<Divergence> divergences;
  bool ok() const { return divergences.empty(); }
};

inline std::string format_vector(std::span<const double> v) {
  std::ostringstream os;
  os << "[";
  for (std::size_t k = 0; k < v.size(); ++k) os << (k ? ", " : "") << v[k];
  os << "]";
  return os.str();
}

// Builds a Max-popping, per-node, non-persistent queue with the binding's
// exact functions installed.
inline NeuralPq reduction_queue(const ReductionBinding& binding) {
  ParamStore scratch;
  Rng rng(0);
  NpqConfig cfg{Popping::Max, false, Scope::PerNode, 1};
  NeuralPq pq = NeuralPq::create(scratch, cfg, binding.hidden, rng, "reduction");
  binding.install(pq);
  return pq;
}

// Runs the trace through both queues. After each step checks that the live
// neural values decode to exactly the classical payloads and keys, that every
// strength is exactly 1, that grants equal requests, and that each node's
// queue message equals the classical output (1e-12). `npq` is normally
// reduction_queue(binding).
inline ReductionReport run_reduction(const PqTrace& trace, const ReductionBinding& binding, std::size_t nodes,
                                     const NeuralPq& npq) {
  trace.validate(nodes);
  ParamStore none;
  Context ctx(none);
  PqState state = PqState::empty(binding.hidden);
  PayloadPq classical;
  ReductionReport report;

  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const TraceStep& step = trace.steps[t];
    const Tensor z = binding.node_inputs(step, nodes);
    const PopOutcome pop = npq.pop(ctx, z, state);
    const MessageSet msgs = npq.messages(ctx, pop);
    const auto expected = classical_step(classical, step, nodes, binding.hidden);

    if (!pop.grants.empty() && !std::equal(pop.grants.data().begin(), pop.grants.data().end(),
                                           pop.requests.data().begin())) {
      report.divergences.push_back({t, std::nullopt, "grants differ from requests",
                                    format_vector(pop.requests.data()), format_vector(pop.grants.data())});
    }
    for (std::size_t i = 0; i < nodes; ++i) {
      std::vector<double> got(binding.hidden, 0.0);
      for (std::size_t r = 0; r < msgs.target.size(); ++r) {
        if (msgs.target[r] != i) continue;
        auto row = msgs.messages.row_span(r);
        for (std::size_t k = 0; k < got.size(); ++k) got[k] += row[k];
      }
      double err = 0.0;
      for (std::size_t k = 0; k < got.size(); ++k) err = std::max(err, std::abs(got[k] - expected[i][k]));
      if (err > 1e-12) {
        report.divergences.push_back({t, i, "node output", format_vector(expected[i]), format_vector(got)});
      }
    }

    state = npq.push(ctx, state, z);

    std::vector<std::vector<double>> neural_payloads, classical_payloads;
    std::vector<double> neural_keys, classical_keys;
    for (std::size_t j = 0; j < state.size(); ++j) {
      neural_payloads.push_back(binding.payload(state.values.row_span(j)));
      neural_keys.push_back(binding.key(state.values.row_span(j)));
      if (state.strengths.data()[j] != 1.0) {
        report.divergences.push_back({t, std::nullopt, "strength of slot " + std::to_string(j), "1",
                                      std::to_string(state.strengths.data()[j])});
      }
    }
    for (const auto& [k, v] : classical.entries()) {
      classical_payloads.push_back(v);
      classical_keys.push_back(k);
    }
    std::sort(neural_payloads.begin(), neural_payloads.end());
    std::sort(classical_payloads.begin(), classical_payloads.end());
    std::sort(neural_keys.begin(), neural_keys.end());
    if (neural_payloads != classical_payloads) {
      report.divergences.push_back({t, std::nullopt, "live payload set", std::to_string(classical_payloads.size()) + " entries",
                                    std::to_string(neural_payloads.size()) + " entries"});
    }
    if (neural_keys != classical_keys) {
      report.divergences.push_back({t, std::nullopt, "live key set", format_vector(classical_keys),
                                    format_vector(neural_keys)});
    }
    ++report.steps;
  }
  return report;
}

inline ReductionReport run_reduction(const PqTrace& trace, const ReductionBinding& binding, std::size_t nodes) {
  return run_reduction(trace, binding, nodes, reduction_queue(binding));
}

// Random valid trace: unique integer keys in [-20, 20], payloads made unique
// by an id in coordinate 1.
inline PqTrace random_trace(Rng& rng, std::size_t max_len, std::size_t nodes, std::size_t hidden) {
  if (hidden < 2) throw std::invalid_argument("random_trace: hidden must be at least 2");
  std::vector<double> keys;
  for (int k = -20; k <= 20; ++k) keys.push_back(k);
  std::shuffle(keys.begin(), keys.end(), rng);
  std::uniform_int_distribution<std::size_t> len_dist(0, max_len);
  std::uniform_int_distribution<std::size_t> node_dist(0, nodes - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);

  PqTrace trace;
  const std::size_t len = std::min(len_dist(rng), keys.size());
  std::size_t live = 0, next_key = 0;
  for (std::size_t t = 0; t < len; ++t) {
    TraceStep s;
    if (live > 0 && unit(rng) < 0.5) {
      s.pop_to = node_dist(rng);
      --live;
    }
    if (unit(rng) < 0.6) {
      std::vector<double> payload(hidden, 0.0);
      payload[1] = static_cast<double>(next_key + 1);
      for (std::size_t k = 2; k < hidden; ++k) payload[k] = coord(rng);
      s.push = std::make_pair(keys[next_key++], payload);
      ++live;
    }
    trace.steps.push_back(std::move(s));
  }
  return trace;
}

inline nlohmann::json to_json(const ReductionReport& r) {
  nlohmann::json divs = nlohmann::json::array();
  for (const Divergence& d : r.divergences) {
    nlohmann::json j = {{"step", d.step}, {"what", d.what}, {"expected", d.expected}, {"actual", d.actual}};
    j["node"] = d.node ? nlohmann::json(*d.node) : nlohmann::json(nullptr);
    divs.push_back(j);
  }
  return {{"steps", r.steps}, {"divergences", divs}, {"ok", r.ok()}};
}

}  // namespace npq
