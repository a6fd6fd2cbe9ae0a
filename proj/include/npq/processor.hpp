#pragma once

// Encode-process-decode MLP message-passing network.
//
//   h_i = f_n(x_i)   h_ij = f_e(e_ij)   h_g = f_g(g)
//   z_i = f_A(h_i, h_i^{t-1})
//   m_ij = f_m(z_i, z_j, h_ij, h_g)          (i sends to j)
//   m_i = max over {m_ji : j in N_i} and any extra messages
//   h_i^t = f_r(z_i, m_i)
//
// f_A is a single linear layer on the concatenation, f_m and f_r are 2-layer
// ReLU MLPs. An empty message set aggregates to the zero vector.

#include <algorithm>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "npq/graph.hpp"
#include "npq/tensor.hpp"

namespace npq {

using ad::Context;
using ad::LinearLayer;
using ad::Mlp;
using ad::ParamStore;

enum class Aggregator { Max, Sum };

struct ProcessorConfig {
  std::size_t node_features = 1;
  std::size_t edge_features = 1;
  std::size_t graph_features = 1;
  std::size_t hidden = 32;
  Aggregator aggregator = Aggregator::Max;
};

struct EncodedState {
  Tensor H;     // n x d_h, latent node state h_i^{t}
  Tensor Henc;  // n x d_h, encoded node inputs
  Tensor Eenc;  // |E| x d_h, encoded edge inputs
  Tensor genc;  // 1 x d_h, encoded graph input
  Tensor Z;     // n x d_h, recurrent encoding of the current step
  // Edge and graph block of f_m's first layer (plus its bias). Constant
  // across steps, so it is evaluated once per encode.
  Tensor edge_term;
};

// Extra messages for the aggregator: row k is delivered to node target[k].
struct MessageSet {
  Tensor messages;
  std::vector<std::size_t> target;

  bool empty() const { return target.empty(); }
  std::size_t count_for(std::size_t node) const {
    return static_cast<std::size_t>(std::count(target.begin(), target.end(), node));
  }
};

// A memory module plugged into the processor: each step it may send messages
// (pop side) computed from z, then updates its own state from z (push side).
class MemoryModule {
 public:
  virtual ~MemoryModule() = default;
  virtual MessageSet pop_messages(Context& ctx, const Tensor& z) = 0;
  virtual void push(Context& ctx, const Tensor& z) = 0;
};

// One score per (node, candidate parent) pair. Rows [0, n) are the self
// candidates; the remaining rows follow the graph's edge order.
struct ParentScores {
  Tensor scores;
  std::vector<std::size_t> node;
  std::vector<std::size_t> candidate;
  std::size_t n = 0;

  // Highest-scoring candidate per node; ties go to the earlier row.
  std::vector<std::size_t> predictions() const {
    std::vector<std::size_t> best(n, 0);
    std::vector<double> top(n, -std::numeric_limits<double>::infinity());
    std::vector<bool> seen(n, false);
    for (std::size_t r = 0; r < node.size(); ++r) {
      const double s = scores.data()[r];
      if (!seen[node[r]] || s > top[node[r]]) {
        seen[node[r]] = true;
        top[node[r]] = s;
        best[node[r]] = candidate[r];
      }
    }
    return best;
  }
};

struct RunResult {
  EncodedState state;
  ParentScores scores;
};

class Processor {
 public:
  Processor() = default;

  static Processor create(ParamStore& store, const ProcessorConfig& cfg, Rng& rng,
                          const std::string& prefix = "processor") {
    Processor p;
    p.cfg_ = cfg;
    const std::size_t h = cfg.hidden;
    p.f_n_ = LinearLayer::create(store, prefix + ".f_n", cfg.node_features, h, rng);
    p.f_e_ = LinearLayer::create(store, prefix + ".f_e", cfg.edge_features, h, rng);
    p.f_g_ = LinearLayer::create(store, prefix + ".f_g", cfg.graph_features, h, rng);
    p.f_A_ = LinearLayer::create(store, prefix + ".f_A", 2 * h, h, rng);
    p.f_m_ = Mlp::create(store, prefix + ".f_m", 4 * h, h, h, rng);
    p.f_r_ = Mlp::create(store, prefix + ".f_r", 2 * h, h, h, rng);
    p.dec_query_ = LinearLayer::create(store, prefix + ".decoder.query", h, h, rng);
    p.dec_key_ = LinearLayer::create(store, prefix + ".decoder.key", h, h, rng);
    p.dec_edge_ = LinearLayer::create(store, prefix + ".decoder.edge", h, h, rng);
    p.dec_self_ = prefix + ".decoder.self";
    store.add(p.dec_self_, ad::glorot(1, h, rng));
    return p;
  }

  const ProcessorConfig& config() const { return cfg_; }
  std::size_t hidden() const { return cfg_.hidden; }

  EncodedState encode(Context& ctx, const Graph& g) const {
    if (g.node_feats.cols() != cfg_.node_features || g.edge_feats.cols() != cfg_.edge_features ||
        g.graph_feat.cols() != cfg_.graph_features) {
      throw std::invalid_argument("encode: feature widths " + std::to_string(g.node_feats.cols()) + "/" +
                                  std::to_string(g.edge_feats.cols()) + "/" +
                                  std::to_string(g.graph_feat.cols()) + " do not match the processor");
    }
    EncodedState s;
    s.Henc = f_n_(ctx, g.node_feats);
    s.Eenc = f_e_(ctx, g.edge_feats);
    s.genc = f_g_(ctx, g.graph_feat);
    s.H = Tensor(g.n, cfg_.hidden, 0.0);
    const std::size_t h = cfg_.hidden;
    Tensor wt = ctx.param_t(f_m_.first().weight_name());
    Tensor graph_part = ad::add(ad::matmul(s.genc, ad::row_block(wt, 3 * h, h)),
                                ctx.param(f_m_.first().bias_name()));
    s.edge_term = ad::add_bias(ad::matmul(s.Eenc, ad::row_block(wt, 2 * h, h)), graph_part);
    return s;
  }

  Tensor recurrent_encode(Context& ctx, const EncodedState& s) const {
    if (s.H.shape() != s.Henc.shape()) {
      throw std::invalid_argument("recurrent_encode: H " + s.H.shape_string() + " vs encoded inputs " +
                                  s.Henc.shape_string());
    }
    return f_A_(ctx, ad::concat_cols({s.Henc, s.H}));
  }

  // Node-to-node messages m_ji for every edge (j -> i), in edge order.
  Tensor edge_messages(Context& ctx, const Graph& g, const EncodedState& s) const {
    const std::size_t h = cfg_.hidden;
    std::vector<std::size_t> senders, receivers;
    senders.reserve(g.edges.size());
    receivers.reserve(g.edges.size());
    for (const Edge& e : g.edges) {
      senders.push_back(e.from);
      receivers.push_back(e.to);
    }
    Tensor wt = ctx.param_t(f_m_.first().weight_name());
    Tensor from_sender = ad::matmul(s.Z, ad::row_block(wt, 0, h));
    Tensor from_receiver = ad::matmul(s.Z, ad::row_block(wt, h, h));
    Tensor pre = ad::add(ad::add(ad::gather_rows(from_sender, senders), ad::gather_rows(from_receiver, receivers)),
                         s.edge_term);
    return f_m_.second()(ctx, ad::relu(pre));
  }

  // One message-passing update using s.Z. Returns the new H.
  Tensor mpnn_step(Context& ctx, const Graph& g, const EncodedState& s, const MessageSet& extra = {}) const {
    if (s.Z.rows() != g.n) throw std::invalid_argument("mpnn_step: Z rows do not match the graph");
    Tensor messages = edge_messages(ctx, g, s);
    std::vector<std::size_t> segment;
    segment.reserve(g.edges.size() + extra.target.size());
    for (const Edge& e : g.edges) segment.push_back(e.to);
    if (!extra.empty()) {
      if (extra.messages.cols() != cfg_.hidden) {
        throw std::invalid_argument("mpnn_step: extra messages have width " +
                                    std::to_string(extra.messages.cols()) + ", aggregator expects " +
                                    std::to_string(cfg_.hidden));
      }
      if (extra.messages.rows() != extra.target.size()) {
        throw std::invalid_argument("mpnn_step: extra message count does not match targets");
      }
      messages = ad::concat_rows({messages, extra.messages});
      segment.insert(segment.end(), extra.target.begin(), extra.target.end());
    }
    const auto op = cfg_.aggregator == Aggregator::Max ? ad::Reduce::Max : ad::Reduce::Sum;
    Tensor aggregated = ad::segment_reduce(messages, segment, g.n, op);
    return f_r_(ctx, ad::concat_cols({s.Z, aggregated}));
  }

  // Score of candidate j for node i: <query(H_i), key(H_j) + edge(h_ji)>, with a
  // learned vector in place of the edge term for the self candidate.
  ParentScores decode_parents(Context& ctx, const Graph& g, const EncodedState& s) const {
    ParentScores out;
    out.n = g.n;
    std::vector<std::size_t> self_rows(g.n, 0);
    for (std::size_t i = 0; i < g.n; ++i) {
      out.node.push_back(i);
      out.candidate.push_back(i);
    }
    for (const Edge& e : g.edges) {
      out.node.push_back(e.to);
      out.candidate.push_back(e.from);
    }
    Tensor q = ad::gather_rows(dec_query_(ctx, s.H), out.node);
    Tensor k = ad::gather_rows(dec_key_(ctx, s.H), out.candidate);
    Tensor self = ad::gather_rows(ctx.param(dec_self_), self_rows);
    Tensor edge = g.edges.empty() ? self : ad::concat_rows({self, dec_edge_(ctx, s.Eenc)});
    out.scores = ad::row_dot(q, ad::add(k, edge));
    return out;
  }

  // z = f_A(...), then one mpnn step with the memory's messages, then the
  // memory's push. Updates s.Z and s.H in place.
  void step(Context& ctx, const Graph& g, EncodedState& s, MemoryModule* memory = nullptr) const {
    s.Z = recurrent_encode(ctx, s);
    MessageSet extra;
    if (memory != nullptr) extra = memory->pop_messages(ctx, s.Z);
    Tensor next = mpnn_step(ctx, g, s, extra);
    if (memory != nullptr) memory->push(ctx, s.Z);
    s.H = next;
  }

  RunResult run(Context& ctx, const Graph& g, std::size_t steps, MemoryModule* memory = nullptr) const {
    if (steps < 1) throw std::invalid_argument("run: need at least one processor step");
    RunResult r;
    r.state = encode(ctx, g);
    for (std::size_t t = 0; t < steps; ++t) step(ctx, g, r.state, memory);
    r.scores = decode_parents(ctx, g, r.state);
    return r;
  }

  const Mlp& f_m() const { return f_m_; }
  const Mlp& f_r() const { return f_r_; }
  const LinearLayer& f_A() const { return f_A_; }
  const LinearLayer& f_n() const { return f_n_; }
  const LinearLayer& f_e() const { return f_e_; }
  const LinearLayer& f_g() const { return f_g_; }

 private:
  ProcessorConfig cfg_;
  LinearLayer f_n_, f_e_, f_g_, f_A_;
  Mlp f_m_, f_r_;
  LinearLayer dec_query_, dec_key_, dec_edge_;
  std::string dec_self_;
};

}  // namespace npq
