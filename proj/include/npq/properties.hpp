#pragma once

// Randomised property suites: permutation equivariance, request/grant
// conservation, and queue-variant bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "npq/graph.hpp"
#include "npq/harness.hpp"
#include "npq/npq.hpp"
#include "npq/processor.hpp"

namespace npq {

struct PropertyReport {
  explicit PropertyReport(std::string property) : name(std::move(property)) {}

  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_error = 0.0;
  std::string first_failure;

  bool ok() const { return failures == 0 && cases > 0; }

  void fail(const std::string& why) {
    if (failures++ == 0) first_failure = why;
  }

  nlohmann::json to_json() const {
    return {{"property", name}, {"cases", cases}, {"failures", failures}, {"max_error", max_error},
            {"first_failure", first_failure}, {"ok", ok()}};
  }
};

// The four queue configurations shipped for comparison against the baseline.
inline std::vector<std::string> shipped_queue_models() { return {"NPQ_M", "NPQ_W", "NPQ_M-P-SA", "NPQ_W-P-SV"}; }

inline Graph random_feature_graph(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> p(0.2, 0.9);
  Graph g = sample_er_graph(n, p(rng), rng);
  std::normal_distribution<double> normal;
  std::vector<double> x(n);
  for (double& v : x) v = normal(rng);
  g.node_feats = Tensor::column(std::move(x));
  g.graph_feat = Tensor(1, 1, normal(rng));
  return g;
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> v(rows * cols);
  for (double& x : v) x = normal(rng);
  return Tensor(rows, cols, std::move(v));
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.data()[k] - b.data()[k]));
  return m;
}

// For each case: a random graph, random parameters and a random starting H.
// Runs `steps` steps of every model on the graph and on a relabelled copy and
// compares H (up to the relabelling) and the queue state (exactly).
inline PropertyReport check_equivariance(std::size_t cases, std::size_t max_n, std::uint64_t seed,
                                         std::size_t hidden = 16, std::size_t steps = 3) {
  PropertyReport rep("permutation_equivariance");
  Rng rng(seed);
  std::vector<std::string> models{"baseline"};
  for (const auto& m : shipped_queue_models()) models.push_back(m);
  std::uniform_int_distribution<std::size_t> size(2, std::max<std::size_t>(max_n, 2));

  for (std::size_t c = 0; c < cases; ++c) {
    const std::size_t n = size(rng);
    const Graph g = random_feature_graph(n, rng);
    const Permutation p = Permutation::random(n, rng);
    const Graph pg = permute_graph(g, p);
    const Tensor h0 = random_matrix(n, hidden, rng);

    for (const auto& name : models) {
      ++rep.cases;
      TrainConfig tc;
      tc.set("model", name);
      tc.hidden = hidden;
      const Model model = Model::create(tc.model_config(), rng());
      Context ctx(model.params());
      const Processor& proc = model.processor();
      EncodedState a = proc.encode(ctx, g);
      EncodedState b = proc.encode(ctx, pg);
      a.H = h0;
      b.H = permute_rows(h0, p);
      PqState qa = PqState::empty(hidden), qb = PqState::empty(hidden);

      std::ostringstream where;
      where << "case " << c << " model " << name << " n=" << n;
      bool failed = false;
      for (std::size_t t = 0; t < steps && !failed; ++t) {
        if (model.queue()) {
          auto ra = npq_step(ctx, proc, *model.queue(), g, a, qa);
          auto rb = npq_step(ctx, proc, *model.queue(), pg, b, qb);
          a.H = ra.H;
          b.H = rb.H;
          qa = ra.pq;
          qb = rb.pq;
          if (!bit_equal(qa.values, qb.values) || !bit_equal(qa.strengths, qb.strengths)) {
            rep.fail(where.str() + " step " + std::to_string(t) + ": queue state differs");
            failed = true;
          }
        } else {
          proc.step(ctx, g, a);
          proc.step(ctx, pg, b);
        }
        const double err = max_abs_diff(permute_rows(a.H, p), b.H);
        rep.max_error = std::max(rep.max_error, err);
        if (!failed && !(err <= 1e-9)) {
          rep.fail(where.str() + " step " + std::to_string(t) + ": H differs by " + std::to_string(err));
          failed = true;
        }
      }
      if (!failed) {
        const auto pred_a = proc.decode_parents(ctx, g, a).predictions();
        const auto pred_b = proc.decode_parents(ctx, pg, b).predictions();
        for (std::size_t i = 0; i < n; ++i) {
          if (pred_b[p(i)] != p(pred_a[i])) {
            rep.fail(where.str() + ": decoded parent of node " + std::to_string(i) + " not relabelled");
            break;
          }
        }
      }
    }
  }
  return rep;
}

// Fuzzes grant(p, s): q <= p elementwise, column sums of q <= s + 1e-12, and
// both branches match the closed form evaluated directly.
inline PropertyReport check_grant_conservation(std::size_t cases, std::uint64_t seed) {
  PropertyReport rep("request_grant_conservation");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution sparse(0.2);
  for (std::size_t c = 0; c < cases; ++c) {
    ++rep.cases;
    const std::size_t r = dim(rng), m = dim(rng);
    std::vector<double> pv(r * m), sv(m);
    for (double& x : pv) x = sparse(rng) ? 0.0 : unit(rng);
    for (double& x : sv) x = 1.0 - unit(rng);
    const Tensor p(r, m, pv), s(1, m, sv);
    const Tensor q = grant(p, s);
    for (std::size_t j = 0; j < m; ++j) {
      double total = 0.0, col = 0.0;
      for (std::size_t i = 0; i < r; ++i) total += pv[i * m + j];
      for (std::size_t i = 0; i < r; ++i) {
        const double got = q(i, j), want_p = pv[i * m + j];
        const double direct = total <= sv[j] ? want_p : want_p / total * sv[j];
        const double err = std::abs(got - direct);
        rep.max_error = std::max(rep.max_error, err);
        if (got > want_p) rep.fail("case " + std::to_string(c) + ": grant exceeds request");
        if (err > 1e-12 * std::max(1.0, std::abs(direct))) {
          rep.fail("case " + std::to_string(c) + ": grant differs from the direct formula by " + std::to_string(err));
        }
        col += got;
      }
      if (col > sv[j] + 1e-12) rep.fail("case " + std::to_string(c) + ": slot over-granted");
    }
  }
  return rep;
}

// Persistent queues grow by one slot per step and keep every earlier value;
// SendAll delivers n queue messages to each node, SingleValue one identical
// message to every node, PerNode one message per node.
inline PropertyReport check_variant_bookkeeping(std::size_t runs, std::uint64_t seed, std::size_t hidden = 8) {
  PropertyReport rep("variant_bookkeeping");
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> size(2, 8), horizon(1, 8);
  const std::vector<std::string> models{"NPQ_M-P", "NPQ_W-P", "NPQ_M-P-SA", "NPQ_W-P-SV",
                                        "NPQ_M", "NPQ_W-SA", "NPQ_W-SV"};
  for (std::size_t run = 0; run < runs; ++run) {
    const std::size_t n = size(rng), steps = horizon(rng);
    const Graph g = random_feature_graph(n, rng);
    for (const auto& name : models) {
      ++rep.cases;
      TrainConfig tc;
      tc.set("model", name);
      tc.hidden = hidden;
      const Model model = Model::create(tc.model_config(), rng());
      const NeuralPq& q = *model.queue();
      const NpqConfig& qc = q.config();
      Context ctx(model.params());
      EncodedState s = model.processor().encode(ctx, g);
      s.H = random_matrix(n, hidden, rng);
      PqState pq = PqState::empty(hidden);
      const std::string where = "run " + std::to_string(run) + " model " + name;
      for (std::size_t t = 0; t < steps; ++t) {
        const PqState before = pq;
        auto r = npq_step(ctx, model.processor(), q, g, s, pq);
        s.H = r.H;
        pq = r.pq;
        if (qc.persistent) {
          if (pq.size() != t + 1) rep.fail(where + ": persistent queue has " + std::to_string(pq.size()) + " slots after step " + std::to_string(t + 1));
          if (!bit_equal(ad::row_block(pq.values, 0, before.size()), before.values)) rep.fail(where + ": persistent slot changed");
        }
        const bool live = before.size() > 0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t got = r.messages.count_for(i);
          std::size_t want = 0;
          if (live) want = qc.scope == Scope::SendAll ? n : 1;
          if (got != want) {
            rep.fail(where + ": node " + std::to_string(i) + " got " + std::to_string(got) + " queue messages, expected " + std::to_string(want));
          }
        }
        if (live && qc.scope == Scope::SingleValue) {
          for (std::size_t k = 1; k < r.messages.target.size(); ++k) {
            if (!bit_equal(ad::row_block(r.messages.messages, k, 1), ad::row_block(r.messages.messages, 0, 1))) {
              rep.fail(where + ": single-value messages differ");
              break;
            }
          }
        }
      }
    }
  }
  return rep;
}

}  // namespace npq
