#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include "npq/npq.hpp"
#include "npq/processor.hpp"

using namespace npq;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(r * c);
  for (double& x : v) x = normal(rng);
  return Tensor(r, c, std::move(v));
}

Graph feature_graph(std::size_t n, double p, Rng& rng) {
  Graph g = sample_er_graph(n, p, rng);
  g.node_feats = random_matrix(n, 1, rng);
  g.graph_feat = random_matrix(1, 1, rng);
  return g;
}

Graph single_node() {
  Graph g;
  g.n = 1;
  g.node_feats = Tensor(1, 1, 0.5);
  g.edge_feats = Tensor(0, 1);
  g.graph_feat = Tensor(1, 1, 0.0);
  return g;
}

bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

// Plain-loop reference of one baseline step, written from the update
// equations without the tensor library's fused layout.
using Vec = std::vector<double>;
Vec linear(const ParamStore& ps, const std::string& name, const Vec& x) {
  const Tensor& w = ps.value(name + ".weight");
  const Tensor& b = ps.value(name + ".bias");
  Vec y(w.rows());
  for (std::size_t o = 0; o < w.rows(); ++o) {
    double acc = b(0, o);
    for (std::size_t i = 0; i < w.cols(); ++i) acc += w(o, i) * x[i];
    y[o] = acc;
  }
  return y;
}
Vec relu(Vec v) {
  for (double& x : v) x = std::max(x, 0.0);
  return v;
}
Vec cat(const std::vector<Vec>& parts) {
  Vec out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}
Vec mlp(const ParamStore& ps, const std::string& name, const Vec& x) {
  return linear(ps, name + ".1", relu(linear(ps, name + ".0", x)));
}
Vec row(const Tensor& t, std::size_t r) { return Vec(t.row_span(r).begin(), t.row_span(r).end()); }

std::vector<Vec> reference_step(const ParamStore& ps, const Graph& g, const std::vector<Vec>& H) {
  const std::string p = "processor";
  std::vector<Vec> Z(g.n), out(g.n);
  const Vec hg = linear(ps, p + ".f_g", row(g.graph_feat, 0));
  for (std::size_t i = 0; i < g.n; ++i) Z[i] = linear(ps, p + ".f_A", cat({linear(ps, p + ".f_n", row(g.node_feats, i)), H[i]}));
  const std::size_t h = hg.size();
  std::vector<Vec> agg(g.n, Vec(h, 0.0));
  std::vector<bool> any(g.n, false);
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    const Edge e = g.edges[k];
    const Vec m = mlp(ps, p + ".f_m", cat({Z[e.from], Z[e.to], linear(ps, p + ".f_e", row(g.edge_feats, k)), hg}));
    for (std::size_t c = 0; c < h; ++c) agg[e.to][c] = any[e.to] ? std::max(agg[e.to][c], m[c]) : m[c];
    any[e.to] = true;
  }
  for (std::size_t i = 0; i < g.n; ++i) out[i] = mlp(ps, p + ".f_r", cat({Z[i], agg[i]}));
  return out;
}

// A memory module that never sends and never stores anything.
class SilentMemory : public MemoryModule {
 public:
  MessageSet pop_messages(Context&, const Tensor&) override { return {}; }
  void push(Context&, const Tensor&) override {}
};

class ProcessorTest : public ::testing::Test {
 protected:
  Rng rng{7};
  ParamStore store;
  ProcessorConfig cfg;
  Processor proc;
  void SetUp() override {
    cfg.hidden = 8;
    proc = Processor::create(store, cfg, rng);
  }
};

}  // namespace

TEST_F(ProcessorTest, ZeroFeaturesZeroBiasGiveZeroEncodings) {
  for (const auto& name : store.names()) {
    if (name.ends_with(".bias")) store.value(name) = Tensor(1, store.value(name).cols(), 0.0);
  }
  Graph g = sample_er_graph(5, 0.6, rng);
  g.node_feats = Tensor(g.n, g.node_feats.cols(), 0.0);
  g.edge_feats = Tensor(g.edges.size(), g.edge_feats.cols(), 0.0);
  g.graph_feat = Tensor(1, g.graph_feat.cols(), 0.0);
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  for (const Tensor* t : {&s.Henc, &s.Eenc, &s.genc, &s.H}) {
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
  }
}

TEST_F(ProcessorTest, SingleNodeShapes) {
  Context ctx(store);
  EncodedState s = proc.encode(ctx, single_node());
  EXPECT_EQ(s.Henc.rows(), 1u);
  s.Z = proc.recurrent_encode(ctx, s);
  EXPECT_EQ(s.Z.shape(), (std::array<std::size_t, 2>{1, cfg.hidden}));
}

TEST_F(ProcessorTest, EncodeIsReproducible) {
  Graph g = feature_graph(6, 0.5, rng);
  Context a(store), b(store);
  EncodedState x = proc.encode(a, g), y = proc.encode(b, g);
  EXPECT_TRUE(same(x.Henc, y.Henc));
  EXPECT_TRUE(same(x.Eenc, y.Eenc));
  EXPECT_TRUE(same(x.edge_term, y.edge_term));
}

TEST_F(ProcessorTest, EncodeRejectsWidthMismatch) {
  Graph g = feature_graph(4, 0.5, rng);
  g.node_feats = Tensor(4, 2);
  Context ctx(store);
  EXPECT_THROW(proc.encode(ctx, g), std::invalid_argument);
}

TEST_F(ProcessorTest, RecurrentEncodeWithIdentityFirstHalf) {
  const std::size_t h = cfg.hidden;
  std::vector<double> w(h * 2 * h, 0.0);
  for (std::size_t i = 0; i < h; ++i) w[i * 2 * h + i] = 1.0;
  store.value("processor.f_A.weight") = Tensor(h, 2 * h, w);
  store.value("processor.f_A.bias") = Tensor(1, h, 0.0);
  Graph g = feature_graph(5, 0.5, rng);
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  EXPECT_TRUE(same(proc.recurrent_encode(ctx, s), s.Henc));
  s.H = Tensor(3, h);
  EXPECT_THROW(proc.recurrent_encode(ctx, s), std::invalid_argument);
}

TEST_F(ProcessorTest, IsolatedNodeAggregatesZeroMessage) {
  Graph g = single_node();
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  s.Z = proc.recurrent_encode(ctx, s);
  Tensor next = proc.mpnn_step(ctx, g, s);
  Tensor want = proc.f_r()(ctx, ad::concat_cols({s.Z, Tensor(1, cfg.hidden, 0.0)}));
  EXPECT_TRUE(same(next, want));
}

TEST_F(ProcessorTest, SymmetricTwoNodeGraph) {
  Graph g = sample_er_graph(2, 1.0, rng);
  g.node_feats = Tensor(2, 1, 0.3);
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  s.Z = proc.recurrent_encode(ctx, s);
  Tensor next = proc.mpnn_step(ctx, g, s);
  for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_EQ(next(0, c), next(1, c));
}

TEST_F(ProcessorTest, MatchesPlainLoopReference) {
  for (int trial = 0; trial < 10; ++trial) {
    Graph g = feature_graph(6, 0.5, rng);
    Context ctx(store);
    EncodedState s = proc.encode(ctx, g);
    s.H = random_matrix(g.n, cfg.hidden, rng);
    std::vector<Vec> H;
    for (std::size_t i = 0; i < g.n; ++i) H.push_back(row(s.H, i));
    proc.step(ctx, g, s);
    const auto want = reference_step(store, g, H);
    for (std::size_t i = 0; i < g.n; ++i) {
      for (std::size_t c = 0; c < cfg.hidden; ++c) EXPECT_NEAR(s.H(i, c), want[i][c], 1e-12);
    }
  }
}

TEST_F(ProcessorTest, ExtraMessageWidthChecked) {
  Graph g = feature_graph(3, 1.0, rng);
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  s.Z = proc.recurrent_encode(ctx, s);
  MessageSet bad{Tensor(1, cfg.hidden + 1), {0}};
  EXPECT_THROW(proc.mpnn_step(ctx, g, s, bad), std::invalid_argument);
}

TEST_F(ProcessorTest, ExtraMessagesJoinTheMax) {
  Graph g = feature_graph(3, 1.0, rng);
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  s.Z = proc.recurrent_encode(ctx, s);
  MessageSet huge{Tensor(1, cfg.hidden, 1e6), {1}};
  Tensor with = proc.mpnn_step(ctx, g, s, huge);
  Tensor want_row = proc.f_r()(ctx, ad::concat_cols({ad::row_block(s.Z, 1, 1), Tensor(1, cfg.hidden, 1e6)}));
  EXPECT_LE(max_diff(ad::row_block(with, 1, 1), want_row), 1e-9);
  Tensor without = proc.mpnn_step(ctx, g, s);
  EXPECT_TRUE(same(ad::row_block(with, 0, 1), ad::row_block(without, 0, 1)));
}

TEST_F(ProcessorTest, AggregationIgnoresMessageOrder) {
  Graph g = feature_graph(7, 0.6, rng);
  Context ctx(store);
  EncodedState s = proc.encode(ctx, g);
  s.Z = proc.recurrent_encode(ctx, s);
  Tensor m = proc.edge_messages(ctx, g, s);
  std::vector<std::size_t> seg, order(g.edges.size());
  for (const Edge& e : g.edges) seg.push_back(e.to);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> seg2;
  for (std::size_t k : order) seg2.push_back(seg[k]);
  for (auto op : {ad::Reduce::Max, ad::Reduce::Sum}) {
    Tensor a = ad::segment_reduce(m, seg, g.n, op);
    Tensor b = ad::segment_reduce(ad::gather_rows(m, order), seg2, g.n, op);
    if (op == ad::Reduce::Max) {
      EXPECT_TRUE(same(a, b));
    } else {
      EXPECT_LE(max_diff(a, b), 1e-12);
    }
  }
}

TEST_F(ProcessorTest, StepIsPermutationEquivariant) {
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + trial % 7;
    Graph g = feature_graph(n, 0.5, rng);
    Permutation p = Permutation::random(n, rng);
    Graph pg = permute_graph(g, p);
    Context ctx(store);
    EncodedState a = proc.encode(ctx, g), b = proc.encode(ctx, pg);
    a.H = random_matrix(n, cfg.hidden, rng);
    b.H = permute_rows(a.H, p);
    a.Z = proc.recurrent_encode(ctx, a);
    b.Z = proc.recurrent_encode(ctx, b);
    EXPECT_LE(max_diff(permute_rows(a.Z, p), b.Z), 1e-9);
    proc.step(ctx, g, a);
    proc.step(ctx, pg, b);
    EXPECT_LE(max_diff(permute_rows(a.H, p), b.H), 1e-9);
  }
}

TEST_F(ProcessorTest, DecodeSingleNodePredictsItself) {
  Graph g = single_node();
  Context ctx(store);
  RunResult r = proc.run(ctx, g, 1);
  EXPECT_EQ(r.scores.predictions(), std::vector<std::size_t>{0});
}

TEST_F(ProcessorTest, PredictionsStayInCandidateSet) {
  for (int trial = 0; trial < 10; ++trial) {
    Graph g = feature_graph(8, 0.3, rng);
    Context ctx(store);
    const auto pred = proc.run(ctx, g, 3).scores.predictions();
    const auto nbrs = g.in_neighbours();
    for (std::size_t i = 0; i < g.n; ++i) {
      EXPECT_TRUE(pred[i] == i || std::find(nbrs[i].begin(), nbrs[i].end(), pred[i]) != nbrs[i].end());
    }
  }
}

TEST_F(ProcessorTest, RunOneStepEqualsSingleMpnnStep) {
  Graph g = feature_graph(5, 0.5, rng);
  Context ctx(store);
  RunResult r = proc.run(ctx, g, 1);
  EncodedState s = proc.encode(ctx, g);
  s.Z = proc.recurrent_encode(ctx, s);
  EXPECT_TRUE(same(r.state.H, proc.mpnn_step(ctx, g, s)));
  EXPECT_THROW(proc.run(ctx, g, 0), std::invalid_argument);
}

TEST_F(ProcessorTest, SilentMemoryMatchesMemorylessRunExactly) {
  Graph g = feature_graph(6, 0.5, rng);
  Context ctx(store);
  SilentMemory silent;
  RunResult a = proc.run(ctx, g, 4), b = proc.run(ctx, g, 4, &silent);
  EXPECT_TRUE(same(a.state.H, b.state.H));
  EXPECT_TRUE(same(a.scores.scores, b.scores.scores));
}

TEST_F(ProcessorTest, RunIsDeterministic) {
  Graph g = feature_graph(6, 0.5, rng);
  Context a(store), b(store);
  EXPECT_TRUE(same(proc.run(a, g, 5).scores.scores, proc.run(b, g, 5).scores.scores));
}

// A queue that never pops contributes only zero messages; with sum
// aggregation and a zero-bias message layer the run equals the baseline.
TEST(ProcessorAblation, ZeroPopStrengthEqualsBaseline) {
  Rng rng(9);
  ParamStore store;
  ProcessorConfig cfg;
  cfg.hidden = 8;
  cfg.aggregator = Aggregator::Sum;
  Processor proc = Processor::create(store, cfg, rng);
  NeuralPq q = NeuralPq::create(store, NpqConfig{}, cfg.hidden, rng);
  q.slots().pop_gate = [](const Tensor& x) { return Tensor(x.rows(), x.cols(), 0.0); };
  store.value("npq.f_m_pq.bias") = Tensor(1, cfg.hidden, 0.0);
  Graph g = feature_graph(6, 0.5, rng);
  Context ctx(store);
  NpqMemory memory(q);
  RunResult with = proc.run(ctx, g, 5, &memory);
  RunResult without = proc.run(ctx, g, 5);
  EXPECT_GT(memory.state().size(), 0u);
  EXPECT_LE(max_diff(with.state.H, without.state.H), 1e-9);
}
