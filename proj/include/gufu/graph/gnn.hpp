#pragma once

#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gufu/error.hpp"
#include "gufu/graph/signal_graph.hpp"
#include "gufu/numerics/params.hpp"
#include "gufu/numerics/tape.hpp"

namespace gufu {

struct GnnConfig {
  int layers = 2;
  double dropout = 0.5;
  /// Upper bound on incident edges aggregated per node; 0 means all.
  std::size_t max_neighbors = 0;
};

/// Per-layer weights: w0 (edge+neighbor message), w1 (self+aggregate), w2 (edge update).
class GnnParams {
 public:
  GnnParams() = default;

  static GnnParams create(const GnnConfig& config, Rng& rng) {
    GnnParams p;
    p.config_ = config;
    for (int l = 1; l <= config.layers; ++l) {
      p.params_.add(name(l, 0), xavier_uniform(2 * kNodeDim, kNodeDim, rng));
      p.params_.add(name(l, 1), xavier_uniform(2 * kNodeDim, kNodeDim, rng));
      p.params_.add(name(l, 2), xavier_uniform(3 * kNodeDim, kNodeDim, rng));
    }
    return p;
  }

  static std::string name(int layer, int which) {
    return "gnn.l" + std::to_string(layer) + ".w" + std::to_string(which);
  }

  const GnnConfig& config() const { return config_; }
  int layers() const { return config_.layers; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  GnnConfig config_;
  ParamSet params_;
};

/// Dense view of a SignalGraph: sample rows first, then AP rows. Real edges
/// (sample, ap) precede virtual edges (sample, sample).
struct GraphTensors {
  std::vector<NodeId> node_ids;
  std::unordered_map<NodeId, std::size_t> row_of;
  std::size_t sample_count = 0;
  Matrix features;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::size_t real_edge_count = 0;

  std::size_t node_count() const { return node_ids.size(); }
};

inline GraphTensors snapshot(const SignalGraph& g) {
  GraphTensors t;
  t.sample_count = g.samples().size();
  t.features = Matrix(g.node_count(), kNodeDim);
  auto put = [&](NodeId id, const std::vector<double>& f) {
    if (f.size() != kNodeDim) {
      throw StructuralError("node " + std::to_string(id) + " has feature width " +
                            std::to_string(f.size()));
    }
    const std::size_t row = t.node_ids.size();
    t.row_of.emplace(id, row);
    t.node_ids.push_back(id);
    std::copy(f.begin(), f.end(), t.features.row(row).begin());
  };
  for (const auto& s : g.samples()) put(s.id, s.feature);
  for (const auto& a : g.aps()) put(a.id, a.feature);
  for (const auto& e : g.edges()) t.edges.emplace_back(t.row_of.at(e.sample), t.row_of.at(e.ap));
  t.real_edge_count = t.edges.size();
  for (const auto& e : g.virtual_edges()) t.edges.emplace_back(t.row_of.at(e.a), t.row_of.at(e.b));
  return t;
}

struct AggregateVars {
  Var nodes;
  Var edges;
};

/// Layered edge-aware aggregation on the tape.
///
/// Per layer: every node averages relu([z_uv, z_u]·W0) over its incident real
/// and virtual edges, combines with its own feature as relu([z_v, agg]·W1) and
/// l2-normalizes; then each real edge becomes normalize(relu([z_u, z_uv, z_v]·W2)).
/// Edge features start as the mean of their endpoints. The last layer is
/// linear before normalization so embeddings can have negative dot products.
inline AggregateVars aggregate(Tape& t, const GraphTensors& g, GnnParams& params, bool training,
                               Rng& rng) {
  const std::size_t n = g.node_count();
  const std::size_t n_edges = g.edges.size();
  Matrix init_edges(n_edges, kNodeDim);
  for (std::size_t k = 0; k < n_edges; ++k) {
    auto [a, b] = g.edges[k];
    for (std::size_t d = 0; d < kNodeDim; ++d)
      init_edges(k, d) = 0.5 * (g.features(a, d) + g.features(b, d));
  }

  // Directed messages: for edge k = (a, b), a -> b and b -> a.
  std::vector<std::size_t> msg_edge, msg_src, msg_dst;
  std::vector<std::size_t> taken(n, 0);
  const std::size_t cap = params.config().max_neighbors;
  auto add_msg = [&](std::size_t k, std::size_t src, std::size_t dst) {
    if (cap > 0 && taken[dst] >= cap) return;
    ++taken[dst];
    msg_edge.push_back(k);
    msg_src.push_back(src);
    msg_dst.push_back(dst);
  };
  for (std::size_t k = 0; k < n_edges; ++k) {
    add_msg(k, g.edges[k].first, g.edges[k].second);
    add_msg(k, g.edges[k].second, g.edges[k].first);
  }
  std::vector<std::size_t> real_u, real_v, real_rows, virtual_rows;
  for (std::size_t k = 0; k < n_edges; ++k) {
    if (k < g.real_edge_count) {
      real_u.push_back(g.edges[k].first);
      real_v.push_back(g.edges[k].second);
      real_rows.push_back(k);
    } else {
      virtual_rows.push_back(k);
    }
  }
  std::vector<std::size_t> upper_rows, lower_rows;
  for (std::size_t d = 0; d < kNodeDim; ++d) {
    upper_rows.push_back(d);
    lower_rows.push_back(kNodeDim + d);
  }

  Var z = t.constant(g.features);
  Var e = t.constant(std::move(init_edges));
  for (int l = 1; l <= params.layers(); ++l) {
    Var w0 = t.param(params.params(), GnnParams::name(l, 0));
    Var w1 = t.param(params.params(), GnnParams::name(l, 1));
    Var w2 = t.param(params.params(), GnnParams::name(l, 2));
    Var z_in = t.dropout(z, params.config().dropout, rng, training);
    const bool last = l == params.layers();
    auto act = [&](Var x) { return last ? x : t.relu(x); };

    Var agg;
    if (msg_edge.empty()) {
      agg = t.constant(Matrix(n, kNodeDim));
    } else {
      Var edge_part = t.matmul(e, t.gather_rows(w0, upper_rows));
      Var node_part = t.matmul(z_in, t.gather_rows(w0, lower_rows));
      Var msg = t.relu(t.add(t.gather_rows(edge_part, msg_edge), t.gather_rows(node_part, msg_src)));
      agg = t.mean_aggregate(msg, msg_dst, n);
    }
    z = t.row_normalize(act(t.matmul(t.concat_cols({z_in, agg}), w1)));

    if (!real_rows.empty()) {
      Var zu = t.gather_rows(z, real_u);
      Var zv = t.gather_rows(z, real_v);
      Var old_real = t.gather_rows(e, real_rows);
      Var updated = t.row_normalize(act(t.matmul(t.concat_cols({zu, old_real, zv}), w2)));
      e = virtual_rows.empty() ? updated
                               : t.concat_rows({updated, t.gather_rows(e, virtual_rows)});
    }
  }
  return {z, e};
}

struct Embeddings {
  GraphTensors graph;
  Matrix nodes;
  Matrix edges;

  std::span<const double> of(NodeId id) const { return nodes.row(graph.row_of.at(id)); }
};

/// Inference pass (dropout off) over the current graph including virtual edges.
inline Embeddings infer_embeddings(const SignalGraph& g, GnnParams& params) {
  Embeddings out;
  out.graph = snapshot(g);
  Tape t;
  Rng unused(0);
  auto vars = aggregate(t, out.graph, params, false, unused);
  out.nodes = t.value(vars.nodes);
  out.edges = t.value(vars.edges);
  return out;
}

/// For each positive pair, up to `per_edge` uniformly drawn nodes that are
/// neither the source nor adjacent to it.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_negatives(
    const GraphTensors& g, std::size_t per_edge, Rng& rng) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t n = g.node_count();
  if (per_edge == 0 || n < 3) return out;
  std::vector<std::unordered_set<std::size_t>> adj(n);
  for (auto [a, b] : g.edges) {
    adj[a].insert(b);
    adj[b].insert(a);
  }
  for (auto [u, v] : g.edges) {
    (void)v;
    if (adj[u].size() + 1 >= n) continue;
    for (std::size_t k = 0; k < per_edge; ++k) {
      for (int attempt = 0; attempt < 32; ++attempt) {
        const auto c = static_cast<std::size_t>(rng.uniform_index(n));
        if (c == u || adj[u].contains(c)) continue;
        out.emplace_back(u, c);
        break;
      }
    }
  }
  return out;
}

/// -sum log sigmoid(z_u.z_v) over positives - sum log sigmoid(-z_u.z_n) over negatives.
inline Var graph_loss(Tape& t, Var z, const std::vector<std::pair<std::size_t, std::size_t>>& positives,
                      const std::vector<std::pair<std::size_t, std::size_t>>& negatives) {
  auto pair_scores = [&](const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::vector<std::size_t> a, b;
    for (auto [x, y] : pairs) {
      a.push_back(x);
      b.push_back(y);
    }
    return t.row_dot(t.gather_rows(z, std::move(a)), t.gather_rows(z, std::move(b)));
  };
  Var loss = t.constant(Matrix(1, 1));
  if (!positives.empty()) loss = t.sub(loss, t.sum(t.log_sigmoid(pair_scores(positives))));
  if (!negatives.empty())
    loss = t.sub(loss, t.sum(t.log_sigmoid(t.scale(pair_scores(negatives), -1.0))));
  return loss;
}

struct GnnTrainOptions {
  int epochs = 50;
  double lr = 0.01;
  std::size_t negatives_per_edge = 5;
  OptimizerKind optimizer = OptimizerKind::adam;
};

/// Unsupervised training on the current graph (real + virtual edges). The
/// virtual edges are dropped afterwards. Returns the per-epoch training loss.
inline std::vector<double> train_gnn(SignalGraph& g, GnnParams& params,
                                     const GnnTrainOptions& opts, Rng& rng) {
  const GraphTensors tensors = snapshot(g);
  std::vector<double> history;
  Optimizer opt({.kind = opts.optimizer, .lr = opts.lr});
  params.params().zero_grad();
  params.params().reset_optimizer_state();
  for (int epoch = 0; epoch < opts.epochs && !tensors.edges.empty(); ++epoch) {
    Tape t;
    auto vars = aggregate(t, tensors, params, true, rng);
    const auto negatives = sample_negatives(tensors, opts.negatives_per_edge, rng);
    Var loss = graph_loss(t, vars.nodes, tensors.edges, negatives);
    if (!std::isfinite(t.scalar(loss))) {
      throw TrainingError("train_gnn: graph loss diverged at epoch " + std::to_string(epoch) +
                          " after " + std::to_string(history.size()) + " finite epochs");
    }
    history.push_back(t.scalar(loss));
    t.backward(loss);
    opt.step(params.params());
  }
  g.clear_virtual_edges();
  return history;
}

}  // namespace gufu
