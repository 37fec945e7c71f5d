#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gufu/data/database.hpp"
#include "gufu/error.hpp"
#include "gufu/graph/signal_graph.hpp"
#include "gufu/log.hpp"
#include "gufu/numerics/matrix.hpp"

namespace gufu {

using NodeFeatures = std::unordered_map<NodeId, std::vector<double>>;

struct TrustOptions {
  double epsilon = 0.1;
  int max_iterations = 100;
};

/// Per-node goodness and fairness vectors, rows aligned with `nodes`.
struct TrustScores {
  std::vector<NodeId> nodes;
  std::unordered_map<NodeId, std::size_t> row_of;
  Matrix goodness;
  Matrix fairness;
  double w_max = 0.0;
  int iterations = 0;
  bool converged = false;
  double last_delta_g = 0.0;
  double last_delta_f = 0.0;

  std::span<const double> g(NodeId v) const { return goodness.row(row_of.at(v)); }
  std::span<const double> f(NodeId v) const { return fairness.row(row_of.at(v)); }
};

/// Undirected weighted neighborhood used by the trust iteration: real edges
/// carry w / w_max, virtual edges carry 1.
struct TrustGraph {
  std::vector<NodeId> nodes;
  std::unordered_map<NodeId, std::size_t> row_of;
  std::vector<std::vector<std::pair<std::size_t, double>>> adj;
  double w_max = 0.0;
};

inline TrustGraph trust_graph(const SignalGraph& g) {
  TrustGraph t;
  for (const auto& s : g.samples()) t.nodes.push_back(s.id);
  for (const auto& a : g.aps()) t.nodes.push_back(a.id);
  for (std::size_t i = 0; i < t.nodes.size(); ++i) t.row_of.emplace(t.nodes[i], i);
  t.adj.resize(t.nodes.size());
  for (const auto& e : g.edges()) t.w_max = std::max(t.w_max, e.weight);
  for (const auto& e : g.edges()) {
    const std::size_t a = t.row_of.at(e.sample), b = t.row_of.at(e.ap);
    const double w = e.weight / t.w_max;
    t.adj[a].emplace_back(b, w);
    t.adj[b].emplace_back(a, w);
  }
  for (const auto& e : g.virtual_edges()) {
    const std::size_t a = t.row_of.at(e.a), b = t.row_of.at(e.b);
    t.adj[a].emplace_back(b, 1.0);
    t.adj[b].emplace_back(a, 1.0);
  }
  return t;
}

/// Per-dimension min-max rescale into [0, 1]; constant columns map to 0.5.
inline Matrix minmax_rescale(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t j = 0; j < m.cols(); ++j) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (std::size_t i = 0; i < m.rows(); ++i) {
      lo = std::min(lo, m(i, j));
      hi = std::max(hi, m(i, j));
    }
    for (std::size_t i = 0; i < m.rows(); ++i)
      out(i, j) = hi > lo ? (m(i, j) - lo) / (hi - lo) : 0.5;
  }
  return out;
}

/// Runs the goodness/fairness iteration from an explicit initial matrix (rows
/// aligned with tg.nodes). Each sweep computes every goodness from the previous
/// fairness, then every fairness from the new goodness. Stops once the summed
/// per-node l2 change of both G and F is at most epsilon.
inline TrustScores iterate_trust(const TrustGraph& tg, const Matrix& init, const TrustOptions& opts) {
  if (init.rows() != tg.nodes.size()) {
    throw DimensionError("iterate_trust: init " + init.shape_string() + " for " +
                         std::to_string(tg.nodes.size()) + " nodes");
  }
  if (!(opts.epsilon > 0.0)) throw ContractError("iterate_trust: epsilon must be positive");
  const std::size_t n = init.rows(), d = init.cols();
  TrustScores s;
  s.nodes = tg.nodes;
  s.row_of = tg.row_of;
  s.w_max = tg.w_max;
  s.goodness = init;
  s.fairness = init;
  for (int it = 0; it < opts.max_iterations; ++it) {
    Matrix g_next = s.goodness;
    for (std::size_t v = 0; v < n; ++v) {
      if (tg.adj[v].empty()) continue;
      const double inv = 1.0 / static_cast<double>(tg.adj[v].size());
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (auto [u, w] : tg.adj[v]) acc += s.fairness(u, i) * w;
        g_next(v, i) = acc * inv;
      }
    }
    Matrix f_next = s.fairness;
    for (std::size_t v = 0; v < n; ++v) {
      if (tg.adj[v].empty()) continue;
      const double inv = 1.0 / (2.0 * static_cast<double>(tg.adj[v].size()));
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (auto [u, w] : tg.adj[v]) acc += std::abs(w - g_next(u, i));
        f_next(v, i) = 1.0 - acc * inv;
      }
    }
    double dg = 0.0, df = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      double sg = 0.0, sf = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        sg += (g_next(v, i) - s.goodness(v, i)) * (g_next(v, i) - s.goodness(v, i));
        sf += (f_next(v, i) - s.fairness(v, i)) * (f_next(v, i) - s.fairness(v, i));
      }
      dg += std::sqrt(sg);
      df += std::sqrt(sf);
    }
    s.goodness = std::move(g_next);
    s.fairness = std::move(f_next);
    s.iterations = it + 1;
    s.last_delta_g = dg;
    s.last_delta_f = df;
    if (dg <= opts.epsilon && df <= opts.epsilon) {
      s.converged = true;
      break;
    }
  }
  if (!s.converged) {
    log::warn("compute_trust: no convergence after " + std::to_string(s.iterations) +
              " iterations (dG=" + std::to_string(s.last_delta_g) +
              ", dF=" + std::to_string(s.last_delta_f) + ")");
  }
  return s;
}

/// Goodness/fairness over real and virtual edges, initialized from the
/// min-max rescaled node features.
inline TrustScores compute_trust(const SignalGraph& g, const NodeFeatures& features,
                                 const TrustOptions& opts = {}) {
  const TrustGraph tg = trust_graph(g);
  if (tg.nodes.empty()) return {};
  const std::size_t d = features.at(tg.nodes.front()).size();
  Matrix raw(tg.nodes.size(), d);
  for (std::size_t r = 0; r < tg.nodes.size(); ++r) {
    auto it = features.find(tg.nodes[r]);
    if (it == features.end()) {
      throw ContractError("compute_trust: no feature for node " + std::to_string(tg.nodes[r]));
    }
    if (it->second.size() != d) throw DimensionError("compute_trust: ragged node features");
    std::copy(it->second.begin(), it->second.end(), raw.row(r).begin());
  }
  return iterate_trust(tg, minmax_rescale(raw), opts);
}

/// Weight prediction for an AP/sample pair:
/// 1/2 * w_max * mean_i(G_i(s) F_i(v) + F_i(s) G_i(v)).
inline double predicted_weight(const TrustScores& t, NodeId s, NodeId v) {
  auto gs = t.g(s), fs = t.f(s), gv = t.g(v), fv = t.f(v);
  double acc = 0.0;
  for (std::size_t i = 0; i < gs.size(); ++i) acc += gs[i] * fv[i] + fs[i] * gv[i];
  return 0.5 * t.w_max * acc / static_cast<double>(gs.size());
}

struct AddedEdge {
  NodeId sample = 0;
  NodeId ap = 0;
  double weight = 0.0;
};

struct EdgeModification {
  std::vector<AddedEdge> added;
  std::vector<std::pair<NodeId, NodeId>> removed;  // (sample, ap)
  std::vector<std::string> removed_ap_nodes;
  double delta = 0.0;
  std::size_t candidates = 0;
};

/// Decision threshold: 120 - max |rss| over detected entries (0 when nothing is detected).
inline double decision_threshold(const std::vector<const Matrix*>& rss_sets) {
  double worst = 0.0;
  bool any = false;
  for (const Matrix* m : rss_sets)
    for (double v : m->values())
      if (v > kUndetectedDbm) {
        worst = std::max(worst, std::abs(v));
        any = true;
      }
  return any ? kWeightOffset - worst : 0.0;
}

/// (AP s, sample v) pairs with s - u a real edge and u - v a virtual edge.
/// Sorted, unique, and including pairs that are already joined.
inline std::vector<std::pair<NodeId, NodeId>> edge_candidates(const SignalGraph& g) {
  std::unordered_map<NodeId, std::vector<NodeId>> aps_of, virt_of;
  for (const auto& e : g.edges()) aps_of[e.sample].push_back(e.ap);
  for (const auto& e : g.virtual_edges()) {
    virt_of[e.a].push_back(e.b);
    virt_of[e.b].push_back(e.a);
  }
  std::set<std::pair<NodeId, NodeId>> out;
  for (const auto& [u, vs] : virt_of) {
    auto it = aps_of.find(u);
    if (it == aps_of.end()) continue;
    for (NodeId s : it->second)
      for (NodeId v : vs) out.insert({s, v});
  }
  return {out.begin(), out.end()};
}

/// Additions for absent candidate edges with predicted weight >= delta;
/// removals for present candidate edges with predicted weight < delta.
inline EdgeModification predict_edges(const SignalGraph& g, const TrustScores& t, double delta) {
  EdgeModification mods;
  mods.delta = delta;
  const auto cands = edge_candidates(g);
  mods.candidates = cands.size();
  for (auto [s, v] : cands) {
    const double w = predicted_weight(t, s, v);
    const bool present = g.has_edge(v, s);
    if (!present && w >= delta && w > 0.0) mods.added.push_back({v, s, w});
    if (present && w < delta) mods.removed.emplace_back(v, s);
  }
  return mods;
}

/// Creates an AP node per MAC, links it to the batch samples that detect it and
/// sets its feature to the weighted mean of those samples' features.
/// `rss` rows follow `batch_ids`; columns follow `macs`.
inline std::vector<NodeId> new_ap_nodes(SignalGraph& g, const std::vector<NodeId>& batch_ids,
                                        const Matrix& rss, const std::vector<std::string>& macs) {
  if (rss.rows() != batch_ids.size() || rss.cols() != macs.size()) {
    throw DimensionError("new_ap_nodes: rss " + rss.shape_string());
  }
  std::vector<NodeId> out;
  for (std::size_t j = 0; j < macs.size(); ++j) {
    bool seen = false;
    for (std::size_t i = 0; i < rss.rows() && !seen; ++i) seen = rss(i, j) > kUndetectedDbm;
    if (!seen) continue;
    const NodeId ap = g.add_ap(macs[j]);
    for (std::size_t i = 0; i < rss.rows(); ++i)
      if (rss(i, j) > kUndetectedDbm) g.add_edge(batch_ids[i], ap, rss(i, j) + kWeightOffset);
    init_ap_feature(g, ap);
    out.push_back(ap);
  }
  return out;
}

/// Weighted mean of the given per-sample vectors over an AP's edges.
inline std::vector<double> neighbor_weighted_mean(const SignalGraph& g, NodeId ap,
                                                  const NodeFeatures& sample_features) {
  std::vector<double> acc;
  double total = 0.0;
  for (const auto& e : g.edges()) {
    if (e.ap != ap) continue;
    const auto& f = sample_features.at(e.sample);
    if (acc.empty()) acc.assign(f.size(), 0.0);
    for (std::size_t k = 0; k < f.size(); ++k) acc[k] += e.weight * f[k];
    total += e.weight;
  }
  if (total == 0.0) throw StructuralError("AP node " + g.ap(ap).mac + " has no edges");
  for (double& v : acc) v /= total;
  return acc;
}

inline void add_predicted_edges(SignalGraph& g, const EdgeModification& mods) {
  for (const auto& e : mods.added)
    if (!g.has_edge(e.sample, e.ap)) g.add_edge(e.sample, e.ap, e.weight);
}

/// Drops the listed edges, deletes AP nodes left without edges and returns
/// their MACs (also appended to mods.removed_ap_nodes).
inline std::vector<std::string> apply_forgetting(SignalGraph& g, EdgeModification& mods) {
  for (auto [sample, ap] : mods.removed) g.remove_edge(sample, ap);
  std::set<NodeId> connected;
  for (const auto& e : g.edges()) connected.insert(e.ap);
  std::vector<NodeId> drop;
  std::vector<std::string> macs;
  for (const auto& a : g.aps()) {
    if (connected.contains(a.id)) continue;
    drop.push_back(a.id);
    macs.push_back(a.mac);
  }
  g.remove_aps(drop);
  mods.removed_ap_nodes.insert(mods.removed_ap_nodes.end(), macs.begin(), macs.end());
  return macs;
}

/// Report with edges named by (sample label, AP MAC). `label` maps sample node
/// ids to a stable name such as "db:12" or "batch:3".
inline nlohmann::ordered_json to_json(const EdgeModification& mods,
                                      const std::map<NodeId, std::string>& sample_label,
                                      const std::map<NodeId, std::string>& ap_mac) {
  auto name = [](const std::map<NodeId, std::string>& m, NodeId id) {
    auto it = m.find(id);
    return it == m.end() ? std::to_string(id) : it->second;
  };
  nlohmann::ordered_json j;
  j["delta"] = mods.delta;
  j["candidates"] = mods.candidates;
  j["added"] = nlohmann::ordered_json::array();
  for (const auto& e : mods.added)
    j["added"].push_back({{"sample", name(sample_label, e.sample)}, {"ap", name(ap_mac, e.ap)},
                          {"weight", e.weight}});
  j["removed"] = nlohmann::ordered_json::array();
  for (auto [s, a] : mods.removed)
    j["removed"].push_back({{"sample", name(sample_label, s)}, {"ap", name(ap_mac, a)}});
  j["removed_ap_nodes"] = mods.removed_ap_nodes;
  return j;
}

}  // namespace gufu
