#pragma once

#include <algorithm>
#include <array>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gufu/data/database.hpp"
#include "gufu/error.hpp"
#include "gufu/feature_extractor.hpp"
#include "gufu/graph/signal_graph.hpp"
#include "gufu/log.hpp"
#include "gufu/numerics/params.hpp"
#include "gufu/numerics/tape.hpp"

namespace gufu {

/// mlp_loc: embedding (34) -> hidden -> location (2); mlp_feat: location (2) -> hidden -> embedding (34).
/// Locations are handled in site-scaled [0, 1] units internally and in meters at the API.
class UpdateMlps {
 public:
  UpdateMlps() = default;

  static UpdateMlps create(const SiteBounds& bounds, Rng& rng, std::size_t hidden = 64,
                           double alpha = 0.5) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("UpdateMlps: alpha not in [0,1]");
    UpdateMlps m;
    m.bounds_ = bounds;
    m.alpha_ = alpha;
    m.params_.add("upd.loc.w1", xavier_uniform(kNodeDim, hidden, rng));
    m.params_.add("upd.loc.b1", Matrix(1, hidden));
    m.params_.add("upd.loc.w2", xavier_uniform(hidden, 2, rng));
    m.params_.add("upd.loc.b2", Matrix(1, 2));
    m.params_.add("upd.feat.w1", xavier_uniform(2, hidden, rng));
    m.params_.add("upd.feat.b1", Matrix(1, hidden));
    m.params_.add("upd.feat.w2", xavier_uniform(hidden, kNodeDim, rng));
    m.params_.add("upd.feat.b2", Matrix(1, kNodeDim));
    return m;
  }

  double alpha() const { return alpha_; }
  void set_alpha(double a) { alpha_ = a; }
  const SiteBounds& bounds() const { return bounds_; }
  void set_bounds(const SiteBounds& b) { bounds_ = b; }
  bool trained() const { return trained_; }
  void mark_trained(bool t = true) { trained_ = t; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  Var loc(Tape& t, Var z) {
    Var h = t.relu(t.affine(z, t.param(params_, "upd.loc.w1"), t.param(params_, "upd.loc.b1")));
    return t.affine(h, t.param(params_, "upd.loc.w2"), t.param(params_, "upd.loc.b2"));
  }
  Var feat(Tape& t, Var y) {
    Var h = t.relu(t.affine(y, t.param(params_, "upd.feat.w1"), t.param(params_, "upd.feat.b1")));
    return t.affine(h, t.param(params_, "upd.feat.w2"), t.param(params_, "upd.feat.b2"));
  }

  /// Scaled location predictions for embeddings (no clipping).
  Matrix loc(const Matrix& z) const { return mlp(z, "upd.loc", kNodeDim); }
  /// Embeddings for scaled locations.
  Matrix feat(const Matrix& y_scaled) const { return mlp(y_scaled, "upd.feat", 2); }

  Matrix to_scaled(const Matrix& meters) const {
    Matrix out(meters.rows(), 2);
    for (std::size_t i = 0; i < meters.rows(); ++i) {
      out(i, 0) = (meters(i, 0) - bounds_.x_min) / span(bounds_.width());
      out(i, 1) = (meters(i, 1) - bounds_.y_min) / span(bounds_.height());
    }
    return out;
  }
  Matrix to_meters(const Matrix& scaled) const {
    Matrix out(scaled.rows(), 2);
    for (std::size_t i = 0; i < scaled.rows(); ++i) {
      out(i, 0) = bounds_.x_min + scaled(i, 0) * span(bounds_.width());
      out(i, 1) = bounds_.y_min + scaled(i, 1) * span(bounds_.height());
    }
    return out;
  }

 private:
  static double span(double v) { return v > 0.0 ? v : 1.0; }

  Matrix mlp(const Matrix& x, const std::string& prefix, std::size_t in_dim) const {
    if (x.cols() != in_dim) {
      throw DimensionError(prefix + ": expected " + std::to_string(in_dim) + " columns, got " +
                           x.shape_string());
    }
    Matrix h = matmul(x, params_.value(prefix + ".w1"));
    add_bias(h, params_.value(prefix + ".b1"));
    for (double& v : h.values()) v = v > 0.0 ? v : 0.0;
    Matrix out = matmul(h, params_.value(prefix + ".w2"));
    add_bias(out, params_.value(prefix + ".b2"));
    return out;
  }
  static void add_bias(Matrix& m, const Matrix& b) {
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += b(0, j);
  }

  SiteBounds bounds_;
  double alpha_ = 0.5;
  bool trained_ = false;
  ParamSet params_;
};

/// Old-by-new virtual adjacency with columns normalized to sum 1. Columns of
/// new samples without an old virtual neighbor stay zero and are inactive.
struct VirtualAdjacency {
  Matrix a;                     // N_old x K
  std::vector<std::size_t> active;  // columns with at least one old neighbor

  bool empty() const { return active.empty(); }
};

inline VirtualAdjacency virtual_adjacency(const SignalGraph& g, const std::vector<NodeId>& old_ids,
                                          const std::vector<NodeId>& new_ids) {
  std::unordered_map<NodeId, std::size_t> old_row, new_col;
  for (std::size_t i = 0; i < old_ids.size(); ++i) old_row.emplace(old_ids[i], i);
  for (std::size_t j = 0; j < new_ids.size(); ++j) new_col.emplace(new_ids[j], j);
  VirtualAdjacency out{Matrix(old_ids.size(), new_ids.size()), {}};
  for (const auto& e : g.virtual_edges()) {
    auto link = [&](NodeId o, NodeId n) {
      auto r = old_row.find(o);
      auto c = new_col.find(n);
      if (r != old_row.end() && c != new_col.end()) out.a(r->second, c->second) = 1.0;
    };
    link(e.a, e.b);
    link(e.b, e.a);
  }
  for (std::size_t j = 0; j < new_ids.size(); ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < old_ids.size(); ++i) s += out.a(i, j);
    if (s == 0.0) continue;
    for (std::size_t i = 0; i < old_ids.size(); ++i) out.a(i, j) /= s;
    out.active.push_back(j);
  }
  return out;
}

struct UpdateLoss {
  double location = 0.0;               // L_P
  double feature = 0.0;                // L_U
  double location_consistency = 0.0;   // L_CP
  double feature_consistency = 0.0;    // L_CU
  double total = 0.0;
};

struct UpdateLossVars {
  Var lp, lu, lcp, lcu, total;
  bool consistency = false;
};

/// Builds alpha (L_P + L_U) + (1 - alpha)(L_CP + L_CU) on the tape.
/// `y_x_scaled` holds site-scaled survey locations. With an inactive adjacency
/// the consistency terms are constant zero.
inline UpdateLossVars update_loss(Tape& t, UpdateMlps& m, const Matrix& z_x,
                                  const Matrix& y_x_scaled, const Matrix& z_u,
                                  const VirtualAdjacency& adj) {
  UpdateLossVars v;
  Var zx = t.constant(z_x);
  Var yx = t.constant(y_x_scaled);
  Var zu = t.constant(z_u);
  v.lp = t.frobenius_diff(m.loc(t, zx), yx);
  Var yu_hat = m.loc(t, zu);
  v.lu = t.frobenius_diff(m.feat(t, yu_hat), zu);
  v.consistency = !adj.empty();
  if (v.consistency) {
    Matrix a_act(adj.a.rows(), adj.active.size());
    for (std::size_t i = 0; i < adj.a.rows(); ++i)
      for (std::size_t k = 0; k < adj.active.size(); ++k) a_act(i, k) = adj.a(i, adj.active[k]);
    const Matrix a_t = transpose(a_act);
    Var loc_target = t.constant(matmul(a_t, y_x_scaled));
    v.lcp = t.frobenius_diff(loc_target, t.gather_rows(yu_hat, adj.active));
    Var feat_mean = t.matmul(t.constant(a_t), m.feat(t, yx));
    v.lcu = t.frobenius_diff(feat_mean, t.gather_rows(zu, adj.active));
  } else {
    v.lcp = t.constant(Matrix(1, 1));
    v.lcu = t.constant(Matrix(1, 1));
  }
  const double alpha = m.alpha();
  v.total = t.add(t.scale(t.add(v.lp, v.lu), alpha), t.scale(t.add(v.lcp, v.lcu), 1.0 - alpha));
  return v;
}

struct UpdateTrainOptions {
  int epochs = 500;
  double lr = 0.01;
  OptimizerKind optimizer = OptimizerKind::adam;
  bool fresh_start = false;
};

struct UpdateHistory {
  std::vector<UpdateLoss> epochs;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch,l_p,l_u,l_cp,l_cu,total\n";
    for (std::size_t e = 0; e < epochs.size(); ++e) {
      const auto& l = epochs[e];
      os << e << ',' << l.location << ',' << l.feature << ',' << l.location_consistency << ','
         << l.feature_consistency << ',' << l.total << '\n';
    }
    return os.str();
  }
};

/// Full-batch training of both MLPs against one batch. `y_x` is in meters.
inline UpdateHistory train_update_module(UpdateMlps& m, const Matrix& z_x, const Matrix& y_x,
                                         const Matrix& z_u, const VirtualAdjacency& adj,
                                         const UpdateTrainOptions& opts, Rng& rng) {
  if (z_x.rows() != y_x.rows() || z_x.cols() != kNodeDim || y_x.cols() != 2 ||
      (z_u.rows() > 0 && z_u.cols() != kNodeDim)) {
    throw DimensionError("train_update_module: z_x " + z_x.shape_string() + ", y_x " +
                         y_x.shape_string() + ", z_u " + z_u.shape_string());
  }
  if (adj.a.rows() != z_x.rows() || adj.a.cols() != z_u.rows()) {
    throw DimensionError("train_update_module: adjacency " + adj.a.shape_string());
  }
  if (adj.empty()) log::warn("train_update_module: no old-new virtual edges; consistency terms skipped");
  if (opts.fresh_start) m = UpdateMlps::create(m.bounds(), rng, m.params().value("upd.loc.b1").cols(), m.alpha());
  const Matrix y_scaled = m.to_scaled(y_x);
  UpdateHistory history;
  Optimizer opt({.kind = opts.optimizer, .lr = opts.lr});
  m.params().zero_grad();
  m.params().reset_optimizer_state();
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Tape t;
    auto v = update_loss(t, m, z_x, y_scaled, z_u, adj);
    t.require_finite(v.lp, "L_P");
    t.require_finite(v.lu, "L_U");
    t.require_finite(v.lcp, "L_CP");
    t.require_finite(v.lcu, "L_CU");
    history.epochs.push_back(
        {t.scalar(v.lp), t.scalar(v.lu), t.scalar(v.lcp), t.scalar(v.lcu), t.scalar(v.total)});
    t.backward(v.total);
    opt.step(m.params());
  }
  m.mark_trained();
  return history;
}

/// Location predictions in meters, clipped to the site bounds.
inline Matrix predict_locations(const UpdateMlps& m, const Matrix& z_new) {
  if (!m.trained()) throw ContractError("predict_locations: update module not trained");
  Matrix out = m.to_meters(m.loc(z_new));
  const auto& b = m.bounds();
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    const double x = std::clamp(out(i, 0), b.x_min, b.x_max);
    const double y = std::clamp(out(i, 1), b.y_min, b.y_max);
    if (x != out(i, 0) || y != out(i, 1)) ++clipped;
    out(i, 0) = x;
    out(i, 1) = y;
  }
  if (clipped > 0) log::info("predict_locations: clipped " + std::to_string(clipped) + " rows to site bounds");
  return out;
}

/// Updated embeddings for survey locations given in meters.
inline Matrix update_features(const UpdateMlps& m, const Matrix& y_old) {
  if (!m.trained()) throw ContractError("update_features: update module not trained");
  return m.feat(m.to_scaled(y_old));
}

struct FingerprintUpdate {
  FingerprintDatabase db;
  std::size_t clamped = 0;  // decoded values outside [0, 1]
  std::size_t snapped = 0;  // values at or below the floor written as undetected
};

/// X_hat = denormalize(decode(Z_hat_X[:, :32])) replaces the database RSS row
/// for row. Values at or below `floor_dbm` are written as undetected.
inline FingerprintUpdate apply_fingerprint_update(const FingerprintDatabase& db,
                                                  const UpdateMlps& m, const Autoencoder& ae,
                                                  double floor_dbm = kUndetectedDbm) {
  if (ae.input_dim() != db.ap_count()) {
    throw DimensionError("apply_fingerprint_update: decoder width " +
                         std::to_string(ae.input_dim()) + " vs " +
                         std::to_string(db.ap_count()) + " database columns");
  }
  const Matrix z_hat = update_features(m, db.locations);
  Matrix decoded = ae.decode(slice_cols(z_hat, 0, kCodeDim));
  FingerprintUpdate out{db, 0, 0};
  for (double& v : decoded.values()) {
    if (v < 0.0 || v > 1.0) {
      ++out.clamped;
      v = std::clamp(v, 0.0, 1.0);
    }
  }
  out.db.rss = denormalize_rss(decoded);
  for (double& v : out.db.rss.values()) {
    if (v <= floor_dbm && v != kUndetectedDbm) {
      v = kUndetectedDbm;
      ++out.snapped;
    }
  }
  if (out.clamped > 0) {
    log::warn("apply_fingerprint_update: clamped " + std::to_string(out.clamped) + " decoded values");
  }
  return out;
}

}  // namespace gufu
