#pragma once

// Neural priority queue memory for the message-passing processor.
//
// State is a list of value vectors with a strength in (0, 1) each. Every step
// each node requests fractions of the queue entries, guided by multi-head
// additive attention and its pop strength; the queue grants the requests,
// scaling them down where an entry is over-subscribed. The granted mixture is
// the node's popped value, sent as an extra message. The push then removes the
// granted mass (dropping entries that reach zero) and appends one new value
// computed from all node embeddings.
//
// Variants:
//   persistent   entries are never deleted and there are no strengths; popping
//                is a read (argmax or attention-weighted mixture).
//   SendAll      every node receives all nodes' popped values.
//   SingleValue  one graph-level pop whose value is delivered to every node.

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "npq/processor.hpp"
#include "npq/tensor.hpp"

namespace npq {

enum class Popping { Max, Weighted };
enum class Scope { PerNode, SendAll, SingleValue };

// Strengths at or below this are treated as zero and their entries removed.
inline constexpr double kSlotEpsilon = 1e-9;

struct NpqConfig {
  Popping popping = Popping::Weighted;
  bool persistent = false;
  Scope scope = Scope::PerNode;
  std::size_t heads = 1;

  std::string name() const {
    std::string s = popping == Popping::Max ? "NPQ_M" : "NPQ_W";
    if (persistent) s += "-P";
    if (scope == Scope::SendAll) s += "-SA";
    if (scope == Scope::SingleValue) s += "-SV";
    return s;
  }

  void validate() const {
    if (heads == 0) throw std::invalid_argument("npq.heads must be positive");
  }
};

inline std::string to_string(Popping p) { return p == Popping::Max ? "max" : "weighted"; }
inline std::string to_string(Scope s) {
  switch (s) {
    case Scope::PerNode: return "per_node";
    case Scope::SendAll: return "send_all";
    case Scope::SingleValue: return "single_value";
  }
  return "per_node";
}
inline Popping parse_popping(const std::string& s) {
  if (s == "max") return Popping::Max;
  if (s == "weighted") return Popping::Weighted;
  throw std::invalid_argument("npq.popping must be max|weighted, got '" + s + "'");
}
inline Scope parse_scope(const std::string& s) {
  if (s == "per_node") return Scope::PerNode;
  if (s == "send_all") return Scope::SendAll;
  if (s == "single_value") return Scope::SingleValue;
  throw std::invalid_argument("npq.scope must be per_node|send_all|single_value, got '" + s + "'");
}

struct PqState {
  Tensor values;     // m x d_h
  Tensor strengths;  // 1 x m; 1 x 0 and unused when persistent

  std::size_t size() const { return values.rows(); }

  static PqState empty(std::size_t hidden) { return {Tensor(0, hidden), Tensor(1, 0)}; }
};

// Every learned function of the queue. Defaults are linear layers with the
// standard activations; tests and the priority-queue reduction replace them
// with exact functions.
struct NpqSlots {
  std::function<Tensor(Context&, const Tensor& z)> pop_logits;                   // f_s^pop, n x 1
  std::function<Tensor(const Tensor&)> pop_gate;                                 // sigmoid
  std::function<Tensor(Context&, std::size_t head, const Tensor& z)> query;      // f_a1^h, n x 1
  std::function<Tensor(Context&, std::size_t head, const Tensor& values)> key;   // f_a2^h, m x 1
  std::function<Tensor(Context&, std::span<const Tensor> alphas)> combine;       // f_a, n x m
  std::function<Tensor(Context&, const Tensor& popped)> message;                 // f_m^pq
  std::function<Tensor(Context&, const Tensor& z)> push_value;                   // f_v, n x d_h
  std::function<Tensor(const Tensor&)> push_value_act;                           // tanh
  std::function<Tensor(Context&, const Tensor& z)> push_logits;                  // f_s^push, n x 1
  std::function<Tensor(const Tensor&)> push_gate;                                // sigmoid
};

// ---------------------------------------------------------------------------
// Pop pieces

// Max: s_pop * onehot(argmax c), ties to the lowest slot. Weighted: s_pop * c.
// `coefficients` is r x m, `pop_strength` r x 1.
inline Tensor pop_requests(const Tensor& coefficients, const Tensor& pop_strength, Popping mode) {
  if (pop_strength.cols() != 1 || pop_strength.rows() != coefficients.rows()) {
    ad::detail::shape_error("pop_requests", coefficients, pop_strength);
  }
  if (mode == Popping::Weighted || coefficients.cols() == 0) {
    return ad::scale_rows(coefficients, pop_strength);
  }
  Tensor onehot(coefficients.rows(), coefficients.cols(), 0.0);
  auto d = onehot.mutable_data();
  const auto best = ad::argmax_rows(coefficients);
  for (std::size_t i = 0; i < best.size(); ++i) d[i * coefficients.cols() + best[i]] = 1.0;
  return ad::scale_rows(onehot, pop_strength);
}

// Column totals of the requests: how much of each slot is asked for in all.
inline Tensor total_pop_request(const Tensor& requests) { return ad::sum_rows(requests); }

// Per slot: 1 when the total request fits in the strength, else s / total.
// A zero total keeps the factor at 1 (all grants are then 0 anyway).
inline Tensor grant_scale(const Tensor& strengths, const Tensor& total) {
  if (strengths.shape() != total.shape()) ad::detail::shape_error("grant_scale", strengths, total);
  const std::size_t m = total.cols();
  std::vector<double> out(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double s = strengths.data()[j], t = total.data()[j];
    out[j] = (t <= s || t == 0.0) ? 1.0 : s / t;
  }
  ad::Tape* tape = ad::detail::common_tape({&strengths, &total});
  return ad::detail::finish(tape, Tensor(1, m, std::move(out)), ad::detail::ids({&strengths, &total}),
                            [strengths, total, m](std::span<const double> g, ad::Tape& t) {
                              std::vector<double> ds(m, 0.0), dt(m, 0.0);
                              for (std::size_t j = 0; j < m; ++j) {
                                const double s = strengths.data()[j], tot = total.data()[j];
                                if (tot <= s || tot == 0.0) continue;
                                ds[j] = g[j] / tot;
                                dt[j] = -g[j] * s / (tot * tot);
                              }
                              t.accumulate(strengths, ds);
                              t.accumulate(total, dt);
                            });
}

// q_j^(i) = p_j^(i) if sum_k p_j^(k) <= s_j, else p_j^(i) / sum_k p_j^(k) * s_j.
inline Tensor grant(const Tensor& requests, const Tensor& strengths) {
  if (strengths.rows() != 1 || strengths.cols() != requests.cols()) {
    ad::detail::shape_error("grant", requests, strengths);
  }
  Tensor factor = grant_scale(strengths, total_pop_request(requests));
  return ad::transpose(ad::scale_rows(ad::transpose(requests), ad::transpose(factor)));
}

// sum_j q_j v_j per row of q; zero rows for an empty queue.
inline Tensor popped_value(const Tensor& grants, const Tensor& values) {
  return ad::matmul(grants, values);
}

struct PopOutcome {
  Tensor coefficients;  // r x m; r = n, or 1 for SingleValue
  Tensor pop_strength;  // r x 1; empty when persistent
  Tensor requests;      // r x m; empty when persistent
  Tensor grants;        // r x m; empty when persistent
  Tensor popped;        // r x d_h
  // Rows of `popped` delivered to each node (V_i). Empty sets when the queue is empty.
  std::vector<std::vector<std::size_t>> delivered;
};

class NeuralPq {
 public:
  NeuralPq() = default;

  static NeuralPq create(ParamStore& store, const NpqConfig& cfg, std::size_t hidden, Rng& rng,
                         const std::string& prefix = "npq") {
    cfg.validate();
    NeuralPq q;
    q.cfg_ = cfg;
    q.hidden_ = hidden;
    auto f_s_pop = LinearLayer::create(store, prefix + ".f_s_pop", hidden, 1, rng);
    std::vector<LinearLayer> f_a1, f_a2;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      f_a1.push_back(LinearLayer::create(store, prefix + ".f_a1." + std::to_string(h), hidden, 1, rng));
      f_a2.push_back(LinearLayer::create(store, prefix + ".f_a2." + std::to_string(h), hidden, 1, rng));
    }
    auto f_a = LinearLayer::create(store, prefix + ".f_a", cfg.heads, 1, rng);
    auto f_m_pq = LinearLayer::create(store, prefix + ".f_m_pq", hidden, hidden, rng);
    auto f_v = LinearLayer::create(store, prefix + ".f_v", hidden, hidden, rng);
    auto f_s_push = LinearLayer::create(store, prefix + ".f_s_push", hidden, 1, rng);

    NpqSlots& s = q.slots_;
    s.pop_logits = [f_s_pop](Context& ctx, const Tensor& z) { return f_s_pop(ctx, z); };
    s.pop_gate = [](const Tensor& x) { return ad::sigmoid(x); };
    s.query = [f_a1](Context& ctx, std::size_t h, const Tensor& z) { return f_a1.at(h)(ctx, z); };
    s.key = [f_a2](Context& ctx, std::size_t h, const Tensor& v) { return f_a2.at(h)(ctx, v); };
    s.combine = [f_a](Context& ctx, std::span<const Tensor> alphas) {
      const std::size_t n = alphas[0].rows(), m = alphas[0].cols();
      std::vector<Tensor> flat;
      for (const Tensor& a : alphas) flat.push_back(ad::reshape(a, n * m, 1));
      return ad::reshape(f_a(ctx, ad::concat_cols(std::span<const Tensor>(flat))), n, m);
    };
    s.message = [f_m_pq](Context& ctx, const Tensor& v) { return f_m_pq(ctx, v); };
    s.push_value = [f_v](Context& ctx, const Tensor& z) { return f_v(ctx, z); };
    s.push_value_act = [](const Tensor& x) { return ad::tanh(x); };
    s.push_logits = [f_s_push](Context& ctx, const Tensor& z) { return f_s_push(ctx, z); };
    s.push_gate = [](const Tensor& x) { return ad::sigmoid(x); };
    return q;
  }

  const NpqConfig& config() const { return cfg_; }
  std::size_t hidden() const { return hidden_; }
  NpqSlots& slots() { return slots_; }
  const NpqSlots& slots() const { return slots_; }

  // sigmoid(f_s^pop(z_i)) per node, n x 1.
  Tensor pop_strength(Context& ctx, const Tensor& z) const { return slots_.pop_gate(slots_.pop_logits(ctx, z)); }

  // c_j^(i), n x m. Each head scores LeakyReLU(f_a1(z_i) + f_a2(v_j)) and
  // normalises over slots; f_a mixes the heads and a second softmax over
  // slots gives the coefficients. Empty queue -> n x 0.
  Tensor attention(Context& ctx, const Tensor& z, const PqState& pq) const {
    if (pq.size() == 0) return Tensor(z.rows(), 0);
    std::vector<Tensor> alphas;
    alphas.reserve(cfg_.heads);
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      Tensor e = ad::leaky_relu(ad::outer_sum(slots_.query(ctx, h, z), slots_.key(ctx, h, pq.values)));
      alphas.push_back(ad::softmax(e, ad::Axis::Cols));
    }
    return ad::softmax(slots_.combine(ctx, alphas), ad::Axis::Cols);
  }

  PopOutcome pop(Context& ctx, const Tensor& z, const PqState& pq) const {
    const std::size_t n = z.rows();
    PopOutcome out;
    out.delivered.assign(n, {});
    if (pq.size() == 0) return out;

    const bool single = cfg_.scope == Scope::SingleValue;
    Tensor c = attention(ctx, z, pq);
    out.coefficients = single ? ad::softmax(ad::sum_rows(c), ad::Axis::Cols) : c;

    if (cfg_.persistent) {
      out.popped = cfg_.popping == Popping::Max
                       ? ad::gather_rows(pq.values, ad::argmax_rows(out.coefficients))
                       : ad::matmul(out.coefficients, pq.values);
    } else {
      auto [strength, req] = requests(ctx, z, out.coefficients);
      out.pop_strength = strength;
      out.requests = req;
      out.grants = grant(out.requests, pq.strengths);
      out.popped = popped_value(out.grants, pq.values);
    }

    for (std::size_t i = 0; i < n; ++i) {
      switch (cfg_.scope) {
        case Scope::PerNode: out.delivered[i] = {i}; break;
        case Scope::SendAll:
          out.delivered[i].resize(n);
          std::iota(out.delivered[i].begin(), out.delivered[i].end(), 0);
          break;
        case Scope::SingleValue: out.delivered[i] = {0}; break;
      }
    }
    return out;
  }

  // f_m^pq over every delivered popped value, flattened with targets.
  MessageSet messages(Context& ctx, const PopOutcome& pop) const {
    MessageSet set;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < pop.delivered.size(); ++i) {
      for (std::size_t r : pop.delivered[i]) {
        rows.push_back(r);
        set.target.push_back(i);
      }
    }
    if (rows.empty()) {
      set.messages = Tensor(0, hidden_);
      return set;
    }
    Tensor encoded = slots_.message(ctx, pop.popped);
    if (encoded.cols() != hidden_) {
      throw std::invalid_argument("pq message width " + std::to_string(encoded.cols()) +
                                  " does not match the aggregator width " + std::to_string(hidden_));
    }
    set.messages = ad::gather_rows(encoded, rows);
    return set;
  }

  // Removes granted mass, drops emptied entries, appends the new value. The
  // grants are recomputed from (state, z): per slot the removed mass is
  // min(total request, strength).
  PqState push(Context& ctx, const PqState& pq, const Tensor& z) const {
    Tensor value = slots_.push_value_act(ad::sum_rows(slots_.push_value(ctx, z)));
    if (value.cols() != hidden_) throw std::invalid_argument("push value width does not match the queue");
    if (cfg_.persistent) {
      return {ad::concat_rows({pq.values, value}), Tensor(1, 0)};
    }

    PqState next = pq;
    if (pq.size() > 0) {
      Tensor c = attention(ctx, z, pq);
      if (cfg_.scope == Scope::SingleValue) c = ad::softmax(ad::sum_rows(c), ad::Axis::Cols);
      Tensor total = total_pop_request(requests(ctx, z, c).second);
      Tensor remaining = ad::sub(pq.strengths, ad::minimum(total, pq.strengths));
      std::vector<std::size_t> keep;
      for (std::size_t j = 0; j < remaining.cols(); ++j)
        if (remaining.data()[j] > kSlotEpsilon) keep.push_back(j);
      next.values = ad::gather_rows(pq.values, keep);
      next.strengths = keep.empty() ? Tensor(1, 0) : ad::gather_cols(remaining, keep);
    }

    Tensor strength = slots_.push_gate(ad::sum_rows(slots_.push_logits(ctx, z)));
    if (strength.item() > kSlotEpsilon) {
      next.values = ad::concat_rows({next.values, value});
      next.strengths = ad::concat_cols({next.strengths, strength});
    }
    return next;
  }

 private:
  // (pop strength, requests) for the given coefficient rows.
  std::pair<Tensor, Tensor> requests(Context& ctx, const Tensor& z, const Tensor& coefficient_rows) const {
    Tensor logits = slots_.pop_logits(ctx, z);
    Tensor strength = cfg_.scope == Scope::SingleValue ? slots_.pop_gate(ad::sum_rows(logits))
                                                       : slots_.pop_gate(logits);
    Tensor req = pop_requests(coefficient_rows, strength, cfg_.popping);
    return {strength, req};
  }

  NpqConfig cfg_;
  std::size_t hidden_ = 0;
  NpqSlots slots_;
};

// MemoryModule adapter that threads a PqState through Processor::run.
class NpqMemory : public MemoryModule {
 public:
  explicit NpqMemory(const NeuralPq& pq) : pq_(&pq), state_(PqState::empty(pq.hidden())) {}
  NpqMemory(const NeuralPq& pq, PqState initial) : pq_(&pq), state_(std::move(initial)) {}

  MessageSet pop_messages(Context& ctx, const Tensor& z) override {
    last_pop_ = pq_->pop(ctx, z, state_);
    return pq_->messages(ctx, last_pop_);
  }

  void push(Context& ctx, const Tensor& z) override { state_ = pq_->push(ctx, state_, z); }

  const PqState& state() const { return state_; }
  const PopOutcome& last_pop() const { return last_pop_; }

 private:
  const NeuralPq* pq_;
  PqState state_;
  PopOutcome last_pop_;
};

struct NpqStepResult {
  Tensor H;
  PqState pq;
  PopOutcome pop;
  MessageSet messages;
};

// One framework step: z, node messages, pops as extra messages, readout, push.
// Uses and updates nothing in `state` except reading H; the caller owns the
// new H and queue state.
inline NpqStepResult npq_step(Context& ctx, const Processor& proc, const NeuralPq& npq, const Graph& g,
                              EncodedState state, const PqState& pq) {
  state.Z = proc.recurrent_encode(ctx, state);
  NpqStepResult r;
  r.pop = npq.pop(ctx, state.Z, pq);
  r.messages = npq.messages(ctx, r.pop);
  r.H = proc.mpnn_step(ctx, g, state, r.messages);
  r.pq = npq.push(ctx, pq, state.Z);
  return r;
}

}  // namespace npq
