#pragma once

// Single-source shortest-path samples: random weighted graphs with the
// predecessor tree produced by Dijkstra's algorithm as the target.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "npq/graph.hpp"
#include "npq/oracle.hpp"

namespace npq {

struct DijkstraSample {
  Graph graph;
  std::size_t source = 0;
  std::vector<std::size_t> parent;  // parent[source] == source
};

struct ShortestPaths {
  std::vector<double> dist;
  std::vector<std::size_t> parent;
};

// Dijkstra over the edge weights. Among equally short routes the parent with
// the lowest index is chosen. Throws if some node is unreachable.
inline ShortestPaths solve_dijkstra(const Graph& g, std::size_t source) {
  if (source >= g.n) throw std::invalid_argument("solve_dijkstra: source out of range");
  if (g.edge_weight.size() != g.edges.size()) throw std::invalid_argument("solve_dijkstra: graph has no edge weights");
  std::vector<std::vector<std::pair<std::size_t, double>>> out(g.n);
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    if (!(g.edge_weight[k] > 0)) throw std::invalid_argument("solve_dijkstra: weights must be positive");
    out[g.edges[k].from].emplace_back(g.edges[k].to, g.edge_weight[k]);
  }

  using Key = std::pair<double, std::size_t>;
  // Greater-than ordering turns the max-key queue into a min-heap on (dist, node).
  ClassicalPq<Key, std::size_t, std::greater<Key>> frontier;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(g.n, inf);
  std::vector<bool> done(g.n, false);
  dist[source] = 0.0;
  frontier.push({0.0, source}, source);
  while (!frontier.empty()) {
    const auto [key, u] = frontier.pop();
    done[u] = true;
    for (const auto& [v, w] : out[u]) {
      if (done[v] || !(dist[u] + w < dist[v])) continue;
      if (dist[v] < inf) frontier.erase({dist[v], v});
      dist[v] = dist[u] + w;
      frontier.push({dist[v], v}, v);
    }
  }

  ShortestPaths sp{dist, std::vector<std::size_t>(g.n, g.n)};
  sp.parent[source] = source;
  for (std::size_t i = 0; i < g.n; ++i) {
    if (dist[i] == inf) throw std::invalid_argument("solve_dijkstra: node " + std::to_string(i) + " is unreachable");
  }
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    const auto [j, i] = std::pair{g.edges[k].from, g.edges[k].to};
    if (i == source) continue;
    if (dist[j] + g.edge_weight[k] == dist[i] && j < sp.parent[i]) sp.parent[i] = j;
  }
  return sp;
}

// Attaches task features: node [is_source], edge [weight], graph [0].
inline Graph with_task_features(Graph g, std::size_t source) {
  std::vector<double> flag(g.n, 0.0);
  flag.at(source) = 1.0;
  g.node_feats = Tensor::column(std::move(flag));
  g.edge_feats = Tensor::column(g.edge_weight);
  g.graph_feat = Tensor(1, 1, 0.0);
  return g;
}

inline DijkstraSample make_sample(Graph topology, std::size_t source) {
  DijkstraSample s;
  s.graph = with_task_features(std::move(topology), source);
  s.graph.validate();
  s.source = source;
  s.parent = solve_dijkstra(s.graph, source).parent;
  return s;
}

// Sample `index` of a dataset draws from its own generator seeded by
// (seed, index), so samples do not depend on each other.
inline DijkstraSample generate_sample(std::size_t n, double p_edge, std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  Rng rng(seq);
  if (n == 1) {
    Graph g;
    g.n = 1;
    g.edge_feats = Tensor(0, 1);
    return make_sample(std::move(g), 0);
  }
  Graph g = sample_er_graph(n, p_edge, rng);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  return make_sample(std::move(g), pick(rng));
}

inline std::vector<DijkstraSample> generate_samples(std::size_t count, std::size_t n, double p_edge, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("generate: count must be at least 1");
  std::vector<DijkstraSample> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(generate_sample(n, p_edge, seed, k));
  return out;
}

inline nlohmann::json to_json(const DijkstraSample& s) {
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t k = 0; k < s.graph.edges.size(); ++k) {
    edges.push_back({s.graph.edges[k].from, s.graph.edges[k].to, s.graph.edge_weight[k]});
  }
  return {{"n", s.graph.n}, {"edges", edges}, {"source", s.source}, {"parent", s.parent}};
}

// Parses one line and re-derives the ground truth; rejects samples whose
// parent array disagrees with the solver or points outside N_i + {i}.
inline DijkstraSample sample_from_json(const nlohmann::json& j) {
  Graph g;
  g.n = j.at("n").get<std::size_t>();
  for (const auto& e : j.at("edges")) {
    g.edges.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    g.edge_weight.push_back(e.at(2).get<double>());
  }
  const auto source = j.at("source").get<std::size_t>();
  DijkstraSample s = make_sample(std::move(g), source);
  const auto parent = j.at("parent").get<std::vector<std::size_t>>();
  const auto nbrs = s.graph.in_neighbours();
  for (std::size_t i = 0; i < parent.size() && i < s.graph.n; ++i) {
    if (parent[i] != i && std::find(nbrs[i].begin(), nbrs[i].end(), parent[i]) == nbrs[i].end()) {
      throw std::invalid_argument("sample parent of node " + std::to_string(i) + " is not a candidate");
    }
  }
  if (parent != s.parent) throw std::invalid_argument("sample parent array disagrees with the shortest-path tree");
  return s;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<DijkstraSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw std::runtime_error("write to " + path.string() + " failed");
}

inline std::vector<DijkstraSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<DijkstraSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void generate_dataset(std::size_t count, std::size_t n, double p_edge, std::uint64_t seed,
                             const std::filesystem::path& out) {
  write_jsonl(out, generate_samples(count, n, p_edge, seed));
}

}  // namespace npq
