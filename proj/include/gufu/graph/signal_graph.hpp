#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cmath>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gufu/data/database.hpp"
#include "gufu/error.hpp"
#include "gufu/feature_extractor.hpp"
#include "gufu/log.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/rng.hpp"

namespace gufu {

using NodeId = std::uint64_t;

/// Node feature width: 32 code dims followed by 2 site-scaled location dims.
inline constexpr std::size_t kNodeDim = kCodeDim + 2;

struct SampleNode {
  NodeId id = 0;
  std::vector<double> feature;
  std::array<double, 2> location{};  // meters
  bool is_new = false;
};

struct ApNode {
  NodeId id = 0;
  std::string mac;
  std::vector<double> feature;
};

/// Sample-AP edge; weight = rss + 120.
struct Edge {
  NodeId sample = 0;
  NodeId ap = 0;
  double weight = 0.0;
};

/// Transient sample-sample edge, stored with a < b.
struct VirtualEdge {
  NodeId a = 0;
  NodeId b = 0;
  friend bool operator==(const VirtualEdge&, const VirtualEdge&) = default;
  friend auto operator<=>(const VirtualEdge&, const VirtualEdge&) = default;
};

/// Bipartite sample/AP graph plus the current virtual edge set.
class SignalGraph {
 public:
  explicit SignalGraph(SiteBounds bounds = {}) : bounds_(bounds) {}

  const SiteBounds& bounds() const { return bounds_; }
  const std::vector<SampleNode>& samples() const { return samples_; }
  const std::vector<ApNode>& aps() const { return aps_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<VirtualEdge>& virtual_edges() const { return virtual_; }
  std::size_t node_count() const { return samples_.size() + aps_.size(); }

  NodeId add_sample(std::vector<double> feature, std::array<double, 2> location, bool is_new) {
    const NodeId id = next_id_++;
    sample_index_.emplace(id, samples_.size());
    samples_.push_back(SampleNode{id, std::move(feature), location, is_new});
    return id;
  }

  NodeId add_ap(std::string mac, std::vector<double> feature = {}) {
    mac = canonical_mac(std::move(mac));
    if (find_ap(mac) != nullptr) throw StructuralError("duplicate AP node " + mac);
    const NodeId id = next_id_++;
    ap_index_.emplace(id, aps_.size());
    aps_.push_back(ApNode{id, std::move(mac), std::move(feature)});
    return id;
  }

  void add_edge(NodeId sample, NodeId ap, double weight) {
    if (!sample_index_.contains(sample) || !ap_index_.contains(ap)) {
      throw StructuralError("edge endpoints must be a sample node and an AP node");
    }
    if (!(weight > 0.0)) throw StructuralError("edge weight must be positive");
    if (!edge_set_.insert({sample, ap}).second) throw StructuralError("duplicate edge");
    edges_.push_back(Edge{sample, ap, weight});
  }

  bool has_edge(NodeId sample, NodeId ap) const { return edge_set_.contains({sample, ap}); }

  bool remove_edge(NodeId sample, NodeId ap) {
    if (edge_set_.erase({sample, ap}) == 0) return false;
    std::erase_if(edges_, [&](const Edge& e) { return e.sample == sample && e.ap == ap; });
    return true;
  }

  void set_virtual_edges(std::vector<VirtualEdge> edges) {
    for (auto& e : edges) {
      if (!sample_index_.contains(e.a) || !sample_index_.contains(e.b) || e.a == e.b) {
        throw StructuralError("virtual edges must join two distinct sample nodes");
      }
      if (e.a > e.b) std::swap(e.a, e.b);
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    virtual_ = std::move(edges);
  }
  void clear_virtual_edges() { virtual_.clear(); }

  bool is_sample(NodeId id) const { return sample_index_.contains(id); }
  bool is_ap(NodeId id) const { return ap_index_.contains(id); }

  const SampleNode& sample(NodeId id) const { return samples_.at(sample_row(id)); }
  SampleNode& sample(NodeId id) { return samples_.at(sample_row(id)); }
  const ApNode& ap(NodeId id) const { return aps_.at(ap_row(id)); }
  ApNode& ap(NodeId id) { return aps_.at(ap_row(id)); }

  const ApNode* find_ap(const std::string& mac) const {
    const auto key = canonical_mac(mac);
    for (const auto& a : aps_)
      if (a.mac == key) return &a;
    return nullptr;
  }

  std::size_t sample_row(NodeId id) const {
    auto it = sample_index_.find(id);
    if (it == sample_index_.end()) throw StructuralError("no sample node " + std::to_string(id));
    return it->second;
  }
  std::size_t ap_row(NodeId id) const {
    auto it = ap_index_.find(id);
    if (it == ap_index_.end()) throw StructuralError("no AP node " + std::to_string(id));
    return it->second;
  }

  /// Removes sample nodes together with their edges and virtual edges.
  void remove_samples(const std::vector<NodeId>& ids) {
    if (ids.empty()) return;
    std::unordered_set<NodeId> drop(ids.begin(), ids.end());
    std::erase_if(samples_, [&](const SampleNode& s) { return drop.contains(s.id); });
    std::erase_if(edges_, [&](const Edge& e) { return drop.contains(e.sample); });
    std::erase_if(virtual_,
                  [&](const VirtualEdge& e) { return drop.contains(e.a) || drop.contains(e.b); });
    reindex();
  }

  /// Removes AP nodes together with their edges.
  void remove_aps(const std::vector<NodeId>& ids) {
    if (ids.empty()) return;
    std::unordered_set<NodeId> drop(ids.begin(), ids.end());
    std::erase_if(aps_, [&](const ApNode& a) { return drop.contains(a.id); });
    std::erase_if(edges_, [&](const Edge& e) { return drop.contains(e.ap); });
    reindex();
  }

  std::size_t degree_of_ap(NodeId ap) const {
    return static_cast<std::size_t>(
        std::count_if(edges_.begin(), edges_.end(), [&](const Edge& e) { return e.ap == ap; }));
  }

  /// Location scaled into [0, 1] by the site bounds.
  std::array<double, 2> scaled_location(std::array<double, 2> loc) const {
    const double w = bounds_.width() > 0.0 ? bounds_.width() : 1.0;
    const double h = bounds_.height() > 0.0 ? bounds_.height() : 1.0;
    return {(loc[0] - bounds_.x_min) / w, (loc[1] - bounds_.y_min) / h};
  }

  /// 34-dim node feature for a code row and a location.
  std::vector<double> sample_feature(std::span<const double> code,
                                     std::array<double, 2> loc) const {
    std::vector<double> f(code.begin(), code.end());
    const auto s = scaled_location(loc);
    f.push_back(s[0]);
    f.push_back(s[1]);
    return f;
  }

  nlohmann::ordered_json dump() const {
    nlohmann::ordered_json j;
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : samples_)
      j["samples"].push_back({{"id", s.id}, {"loc", s.location}, {"new", s.is_new}});
    j["aps"] = nlohmann::ordered_json::array();
    for (const auto& a : aps_) j["aps"].push_back({{"id", a.id}, {"mac", a.mac}});
    j["edges"] = nlohmann::ordered_json::array();
    for (const auto& e : edges_)
      j["edges"].push_back({{"sample", e.sample}, {"ap", e.ap}, {"weight", e.weight}});
    j["virtual_edges"] = nlohmann::ordered_json::array();
    for (const auto& e : virtual_) j["virtual_edges"].push_back({e.a, e.b});
    return j;
  }

 private:
  void reindex() {
    sample_index_.clear();
    ap_index_.clear();
    for (std::size_t i = 0; i < samples_.size(); ++i) sample_index_.emplace(samples_[i].id, i);
    for (std::size_t i = 0; i < aps_.size(); ++i) ap_index_.emplace(aps_[i].id, i);
    std::set<std::pair<NodeId, NodeId>> keep;
    for (const auto& e : edges_) keep.insert({e.sample, e.ap});
    edge_set_ = std::move(keep);
  }

  SiteBounds bounds_;
  std::vector<SampleNode> samples_;
  std::vector<ApNode> aps_;
  std::vector<Edge> edges_;
  std::vector<VirtualEdge> virtual_;
  std::unordered_map<NodeId, std::size_t> sample_index_;
  std::unordered_map<NodeId, std::size_t> ap_index_;
  std::set<std::pair<NodeId, NodeId>> edge_set_;
  NodeId next_id_ = 1;
};

/// One sample node per database row, one AP node per detected MAC, and an
/// edge of weight rss + 120 for every detected entry. AP features are left
/// empty; call init_ap_features afterwards.
inline SignalGraph build_graph(const FingerprintDatabase& db, const Matrix& codes) {
  if (codes.rows() != db.size() || codes.cols() != kCodeDim) {
    throw DimensionError("build_graph: codes " + codes.shape_string() + " for " +
                         std::to_string(db.size()) + " rows");
  }
  SignalGraph g(db.bounds);
  std::vector<NodeId> sample_ids;
  for (std::size_t i = 0; i < db.size(); ++i) {
    const std::array<double, 2> loc{db.locations(i, 0), db.locations(i, 1)};
    sample_ids.push_back(g.add_sample(g.sample_feature(codes.row(i), loc), loc, false));
  }
  for (std::size_t j = 0; j < db.ap_count(); ++j) {
    bool detected = false;
    for (std::size_t i = 0; i < db.size() && !detected; ++i)
      detected = db.rss(i, j) > kUndetectedDbm;
    if (!detected) continue;
    const NodeId ap = g.add_ap(db.macs[j]);
    for (std::size_t i = 0; i < db.size(); ++i)
      if (db.rss(i, j) > kUndetectedDbm) g.add_edge(sample_ids[i], ap, db.rss(i, j) + kWeightOffset);
  }
  return g;
}

/// Weighted mean of neighbor sample features for one AP node.
inline void init_ap_feature(SignalGraph& g, NodeId ap) {
  std::vector<double> acc(kNodeDim, 0.0);
  double total = 0.0;
  for (const auto& e : g.edges()) {
    if (e.ap != ap) continue;
    const auto& f = g.sample(e.sample).feature;
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += e.weight * f[k];
    total += e.weight;
  }
  if (total == 0.0) throw StructuralError("AP node " + g.ap(ap).mac + " has no edges");
  for (double& v : acc) v /= total;
  g.ap(ap).feature = std::move(acc);
}

inline void init_ap_features(SignalGraph& g) {
  std::vector<NodeId> ids;
  for (const auto& a : g.aps()) ids.push_back(a.id);
  for (NodeId id : ids) init_ap_feature(g, id);
}

/// Virtual edge between every unordered sample pair whose feature cosine
/// similarity exceeds `sigma`. Replaces the current virtual edge set.
inline std::size_t create_virtual_edges(SignalGraph& g, double sigma) {
  if (!(sigma > 0.0 && sigma < 1.0)) throw ContractError("create_virtual_edges: sigma not in (0,1)");
  const auto& samples = g.samples();
  const std::size_t n = samples.size();
  Matrix unit(n, kNodeDim);
  std::vector<bool> usable(n, true);
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = samples[i].feature;
    double s = 0.0;
    for (double v : f) s += v * v;
    if (s == 0.0) {
      usable[i] = false;
      ++skipped;
      continue;
    }
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t k = 0; k < kNodeDim; ++k) unit(i, k) = f[k] * inv;
  }
  if (skipped > 0) {
    log::debug("create_virtual_edges: skipped " + std::to_string(skipped) +
               " zero-norm sample features");
  }
  const Matrix gram = matmul(unit, transpose(unit));
  std::vector<VirtualEdge> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (!usable[i]) continue;
    for (std::size_t j = i + 1; j < n; ++j)
      if (usable[j] && gram(i, j) > sigma) out.push_back({samples[i].id, samples[j].id});
  }
  const std::size_t count = out.size();
  g.set_virtual_edges(std::move(out));
  return count;
}

/// Adds one "new" sample node per batch row at the given locations.
/// `rss` columns follow `macs`; edges go only to existing AP nodes.
inline std::vector<NodeId> add_batch_nodes(SignalGraph& g, const Matrix& codes, const Matrix& rss,
                                           const std::vector<std::string>& macs,
                                           const Matrix& locations) {
  if (codes.rows() != rss.rows() || codes.cols() != kCodeDim || rss.cols() != macs.size() ||
      locations.rows() != rss.rows() || locations.cols() != 2) {
    throw DimensionError("add_batch_nodes: codes " + codes.shape_string() + ", rss " +
                         rss.shape_string() + ", locations " + locations.shape_string());
  }
  std::vector<std::pair<std::size_t, NodeId>> ap_cols;
  for (std::size_t j = 0; j < macs.size(); ++j)
    if (const ApNode* a = g.find_ap(macs[j])) ap_cols.emplace_back(j, a->id);

  std::vector<NodeId> ids;
  std::size_t isolated = 0;
  for (std::size_t i = 0; i < codes.rows(); ++i) {
    const std::array<double, 2> loc{locations(i, 0), locations(i, 1)};
    const NodeId id = g.add_sample(g.sample_feature(codes.row(i), loc), loc, true);
    ids.push_back(id);
    bool any = false;
    for (auto [col, ap] : ap_cols) {
      if (rss(i, col) > kUndetectedDbm) {
        g.add_edge(id, ap, rss(i, col) + kWeightOffset);
        any = true;
      }
    }
    if (!any) ++isolated;
  }
  if (isolated > 0) {
    log::warn("add_batch_nodes: " + std::to_string(isolated) +
              " batch rows detect no known AP and have no edges");
  }
  return ids;
}

/// Uniform random location labels inside the site bounds.
inline Matrix random_locations(const SiteBounds& b, std::size_t count, Rng& rng) {
  Matrix out(count, 2);
  for (std::size_t i = 0; i < count; ++i) {
    out(i, 0) = rng.uniform(b.x_min, b.x_max);
    out(i, 1) = rng.uniform(b.y_min, b.y_max);
  }
  return out;
}

/// As above with locations drawn uniformly in the site bounds.
inline std::vector<NodeId> add_batch_nodes(SignalGraph& g, const Matrix& codes, const Matrix& rss,
                                           const std::vector<std::string>& macs, Rng& rng) {
  return add_batch_nodes(g, codes, rss, macs, random_locations(g.bounds(), codes.rows(), rng));
}

/// Removes "new" sample nodes and everything attached to them.
inline void remove_batch_nodes(SignalGraph& g, const std::vector<NodeId>& ids) {
  for (NodeId id : ids) {
    if (!g.is_sample(id)) throw ContractError("remove_batch_nodes: unknown node " + std::to_string(id));
    if (!g.sample(id).is_new) {
      throw ContractError("remove_batch_nodes: node " + std::to_string(id) + " is a survey node");
    }
  }
  g.remove_samples(ids);
}

}  // namespace gufu
