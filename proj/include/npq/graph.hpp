#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <queue>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "npq/tensor.hpp"

namespace npq {

using ad::Rng;
using ad::Tensor;

// Directed edge `from -> to`; node `to` receives messages over it.
struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

struct Graph {
  std::size_t n = 0;
  std::vector<Edge> edges;
  Tensor node_feats;   // n x d_k
  Tensor edge_feats;   // |E| x d_e
  Tensor graph_feat;   // 1 x d_g
  std::vector<double> edge_weight;  // task graphs only; parallel to `edges`

  std::size_t edge_count() const { return edges.size(); }

  // Throws if endpoints are out of range, an edge repeats, or feature tables
  // disagree with the topology.
  void validate() const {
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const Edge& e : edges) {
      if (e.from >= n || e.to >= n) {
        throw std::invalid_argument("edge (" + std::to_string(e.from) + ", " + std::to_string(e.to) +
                                    ") has an endpoint outside [0, " + std::to_string(n) + ")");
      }
      if (!seen.emplace(e.from, e.to).second) {
        throw std::invalid_argument("duplicate edge (" + std::to_string(e.from) + ", " +
                                    std::to_string(e.to) + ")");
      }
    }
    if (node_feats.rows() != n) throw std::invalid_argument("node feature rows != node count");
    if (edge_feats.rows() != edges.size()) throw std::invalid_argument("edge feature rows != edge count");
    if (graph_feat.rows() != 1) throw std::invalid_argument("graph feature must be a single row");
    if (!edge_weight.empty() && edge_weight.size() != edges.size()) {
      throw std::invalid_argument("edge weight count != edge count");
    }
  }

  // In-neighbours of each node (senders of edges into it), in edge order.
  std::vector<std::vector<std::size_t>> in_neighbours() const {
    std::vector<std::vector<std::size_t>> out(n);
    for (const Edge& e : edges) out[e.to].push_back(e.from);
    return out;
  }

  friend bool operator==(const Graph& a, const Graph& b) {
    auto same = [](const Tensor& x, const Tensor& y) {
      return x.shape() == y.shape() && std::equal(x.data().begin(), x.data().end(), y.data().begin());
    };
    return a.n == b.n && a.edges == b.edges && same(a.node_feats, b.node_feats) &&
           same(a.edge_feats, b.edge_feats) && same(a.graph_feat, b.graph_feat) &&
           a.edge_weight == b.edge_weight;
  }
};

class Permutation {
 public:
  Permutation() = default;

  explicit Permutation(std::vector<std::size_t> map) : map_(std::move(map)) {
    std::vector<std::size_t> sorted = map_;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i) throw std::invalid_argument("permutation map is not a bijection on [0, n)");
    }
  }

  static Permutation identity(std::size_t n) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), 0);
    return Permutation(std::move(m));
  }

  static Permutation random(std::size_t n, Rng& rng) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), 0);
    std::shuffle(m.begin(), m.end(), rng);
    return Permutation(std::move(m));
  }

  std::size_t size() const { return map_.size(); }
  std::size_t operator()(std::size_t i) const { return map_.at(i); }
  const std::vector<std::size_t>& map() const { return map_; }

  Permutation inverse() const {
    std::vector<std::size_t> inv(map_.size());
    for (std::size_t i = 0; i < map_.size(); ++i) inv[map_[i]] = i;
    return Permutation(std::move(inv));
  }

  // (a * b)(i) = a(b(i))
  friend Permutation operator*(const Permutation& a, const Permutation& b) {
    if (a.size() != b.size()) throw std::invalid_argument("composing permutations of different size");
    std::vector<std::size_t> m(a.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = a(b(i));
    return Permutation(std::move(m));
  }

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<std::size_t> map_;
};

// Row i of the result is row p^-1(i) of m, i.e. rows are re-indexed by new ids.
inline Tensor permute_rows(const Tensor& m, const Permutation& p) {
  if (m.rows() != p.size()) {
    throw std::invalid_argument("permute_rows: " + std::to_string(m.rows()) + " rows vs permutation of " +
                                std::to_string(p.size()));
  }
  const auto inv = p.inverse();
  return ad::gather_rows(m, inv.map());
}

// Node i becomes p(i); edge (j, i) becomes (p(j), p(i)) with its features.
// Edge order is preserved.
inline Graph permute_graph(const Graph& g, const Permutation& p) {
  if (g.n != p.size()) {
    throw std::invalid_argument("permute_graph: graph has " + std::to_string(g.n) +
                                " nodes, permutation " + std::to_string(p.size()));
  }
  Graph out = g;
  for (Edge& e : out.edges) e = Edge{p(e.from), p(e.to)};
  out.node_feats = permute_rows(g.node_feats, p);
  return out;
}

inline bool reaches_all(const Graph& g, std::size_t source) {
  std::vector<std::vector<std::size_t>> out(g.n);
  for (const Edge& e : g.edges) out[e.from].push_back(e.to);
  std::vector<bool> seen(g.n, false);
  std::queue<std::size_t> frontier;
  seen[source] = true;
  frontier.push(source);
  std::size_t count = 1;
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop();
    for (std::size_t v : out[u]) {
      if (!seen[v]) {
        seen[v] = true;
        ++count;
        frontier.push(v);
      }
    }
  }
  return count == g.n;
}

// Erdos-Renyi graph stored as symmetric directed pairs, weights uniform in
// (0, 1], no self-loops. Resampled until connected. Edge features hold the
// weight; node features and the graph feature are zero placeholders of width 1.
inline Graph sample_er_graph(std::size_t n, double p_edge, Rng& rng, std::size_t max_attempts = 1000) {
  if (n < 2) throw std::invalid_argument("sample_er_graph: need at least 2 nodes");
  if (!(p_edge >= 0.0 && p_edge <= 1.0)) throw std::invalid_argument("sample_er_graph: p_edge outside [0, 1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    Graph g;
    g.n = n;
    std::vector<double> feats;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        if (unit(rng) >= p_edge) continue;
        const double w = 1.0 - unit(rng);
        g.edges.push_back({a, b});
        g.edges.push_back({b, a});
        g.edge_weight.push_back(w);
        g.edge_weight.push_back(w);
      }
    }
    if (!reaches_all(g, 0)) continue;
    g.edge_feats = Tensor::column(g.edge_weight);
    g.node_feats = Tensor(n, 1, 0.0);
    g.graph_feat = Tensor(1, 1, 0.0);
    return g;
  }
  throw std::runtime_error("sample_er_graph: no connected graph after " + std::to_string(max_attempts) +
                           " attempts (n=" + std::to_string(n) + ", p=" + std::to_string(p_edge) + ")");
}

}  // namespace npq
