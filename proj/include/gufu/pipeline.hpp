#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

#include <json.hpp>

#include "gufu/data/database.hpp"
#include "gufu/data/jsonl.hpp"
#include "gufu/edge_dynamics.hpp"
#include "gufu/error.hpp"
#include "gufu/feature_extractor.hpp"
#include "gufu/graph/gnn.hpp"
#include "gufu/graph/signal_graph.hpp"
#include "gufu/log.hpp"
#include "gufu/numerics/checkpoint.hpp"
#include "gufu/update.hpp"

namespace gufu {

struct RunConfig {
  double sigma = 0.95;
  double alpha = 0.5;
  double epsilon = 0.1;
  double lr = 0.01;
  double retrain_lr = 0.001;  // per-cycle fine-tuning of the autoencoder and the GNN
  int epochs = 50;
  int retrain_epochs = 20;
  int update_epochs = 500;
  int layers = 2;
  std::size_t negatives_per_edge = 5;
  double dropout = 0.5;
  std::size_t ae_hidden = 128;
  std::size_t mlp_hidden = 64;
  std::size_t max_neighbors = 0;
  int trust_max_iterations = 100;
  bool strict_loss = false;   // no negative sampling in the graph loss
  bool strict_delta = false;  // delta = 0
  bool edge_prediction = true;
  bool fresh_start = false;
  std::uint64_t seed = 1;
  std::optional<SiteBounds> site_bounds;

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("config: " + m); };
    if (!(sigma > 0.0 && sigma < 1.0)) fail("sigma must lie in (0, 1)");
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must lie in [0, 1]");
    if (!(epsilon > 0.0)) fail("epsilon must be positive");
    if (!(lr > 0.0) || !(retrain_lr > 0.0)) fail("learning rates must be positive");
    if (epochs < 0 || retrain_epochs < 0 || update_epochs < 0) fail("epochs must be >= 0");
    if (layers < 0) fail("layers must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (ae_hidden == 0 || mlp_hidden == 0) fail("hidden widths must be positive");
    if (trust_max_iterations <= 0) fail("trust_max_iterations must be positive");
  }
};

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j{{"sigma", c.sigma},
                           {"alpha", c.alpha},
                           {"epsilon", c.epsilon},
                           {"lr", c.lr},
                           {"retrain_lr", c.retrain_lr},
                           {"epochs", c.epochs},
                           {"retrain_epochs", c.retrain_epochs},
                           {"update_epochs", c.update_epochs},
                           {"layers", c.layers},
                           {"negatives_per_edge", c.negatives_per_edge},
                           {"dropout", c.dropout},
                           {"ae_hidden", c.ae_hidden},
                           {"mlp_hidden", c.mlp_hidden},
                           {"max_neighbors", c.max_neighbors},
                           {"trust_max_iterations", c.trust_max_iterations},
                           {"strict_loss", c.strict_loss},
                           {"strict_delta", c.strict_delta},
                           {"edge_prediction", c.edge_prediction},
                           {"fresh_start", c.fresh_start},
                           {"seed", c.seed}};
  if (c.site_bounds) {
    const auto& b = *c.site_bounds;
    j["site_bounds"] = {b.x_min, b.y_min, b.x_max, b.y_max};
  } else {
    j["site_bounds"] = nullptr;
  }
  return j;
}

/// Reads known keys over `base`; unknown keys are rejected.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  static const std::set<std::string> known{
      "sigma", "alpha", "epsilon", "lr", "retrain_lr", "epochs", "retrain_epochs", "update_epochs", "layers",
      "negatives_per_edge", "dropout", "ae_hidden", "mlp_hidden", "max_neighbors",
      "trust_max_iterations", "strict_loss", "strict_delta", "edge_prediction", "fresh_start",
      "seed", "site_bounds"};
  if (!j.is_object()) throw ValidationError("config: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw ValidationError("config: unknown key \"" + k + "\"");
  RunConfig c = base;
  try {
    c.sigma = j.value("sigma", c.sigma);
    c.alpha = j.value("alpha", c.alpha);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.lr = j.value("lr", c.lr);
    c.retrain_lr = j.value("retrain_lr", c.retrain_lr);
    c.epochs = j.value("epochs", c.epochs);
    c.retrain_epochs = j.value("retrain_epochs", c.retrain_epochs);
    c.update_epochs = j.value("update_epochs", c.update_epochs);
    c.layers = j.value("layers", c.layers);
    c.negatives_per_edge = j.value("negatives_per_edge", c.negatives_per_edge);
    c.dropout = j.value("dropout", c.dropout);
    c.ae_hidden = j.value("ae_hidden", c.ae_hidden);
    c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
    c.max_neighbors = j.value("max_neighbors", c.max_neighbors);
    c.trust_max_iterations = j.value("trust_max_iterations", c.trust_max_iterations);
    c.strict_loss = j.value("strict_loss", c.strict_loss);
    c.strict_delta = j.value("strict_delta", c.strict_delta);
    c.edge_prediction = j.value("edge_prediction", c.edge_prediction);
    c.fresh_start = j.value("fresh_start", c.fresh_start);
    c.seed = j.value("seed", c.seed);
    if (j.contains("site_bounds") && !j["site_bounds"].is_null()) {
      const auto& b = j["site_bounds"];
      c.site_bounds = SiteBounds{b.at(0).get<double>(), b.at(1).get<double>(),
                                 b.at(2).get<double>(), b.at(3).get<double>()};
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

struct GufuState {
  RunConfig config;
  FingerprintDatabase db;
  SignalGraph graph;
  Autoencoder ae;
  GnnParams gnn;
  UpdateMlps upd;
  CodeScaler scaler;
  Rng rng{1};
  int cycle = 0;
};

struct CycleResult {
  nlohmann::ordered_json report;
  Matrix predicted_locations;  // batch rows, meters; empty when the update step was skipped
  std::string update_loss_csv;
};

namespace detail {

inline Matrix encode_rss(const Autoencoder& ae, const Matrix& rss_dbm) {
  return ae.encode(normalize_rss(rss_dbm));
}

inline GnnConfig gnn_config(const RunConfig& c) {
  return {c.layers, c.dropout, c.max_neighbors};
}

inline GnnTrainOptions gnn_options(const RunConfig& c, int epochs, double lr) {
  return {epochs, lr, c.strict_loss ? 0 : c.negatives_per_edge, OptimizerKind::adam};
}

/// Graph over the database; refits the code scaler on the database codes.
inline SignalGraph rebuild_graph(const FingerprintDatabase& db, const Autoencoder& ae,
                                 CodeScaler& scaler) {
  const Matrix codes = encode_rss(ae, db.rss);
  scaler = CodeScaler::fit(codes);
  SignalGraph g = build_graph(db, scaler.apply(codes));
  init_ap_features(g);
  return g;
}

inline Matrix code_part(const Matrix& embeddings, const std::vector<std::size_t>& rows) {
  return slice_cols(gather_rows(embeddings, rows), 0, kCodeDim);
}

/// Columns without a single detection.
inline std::vector<std::string> empty_columns(const FingerprintDatabase& db) {
  std::vector<std::string> out;
  for (std::size_t j = 0; j < db.ap_count(); ++j) {
    bool seen = false;
    for (std::size_t i = 0; i < db.size() && !seen; ++i) seen = db.rss(i, j) > kUndetectedDbm;
    if (!seen) out.push_back(db.macs[j]);
  }
  return out;
}

/// Old column j -> position in `to`, or -1.
inline std::vector<long> column_map(const std::vector<std::string>& from,
                                    const std::vector<std::string>& to) {
  std::vector<long> out(from.size(), -1);
  for (std::size_t j = 0; j < from.size(); ++j) {
    auto it = std::find(to.begin(), to.end(), from[j]);
    if (it != to.end()) out[j] = static_cast<long>(it - to.begin());
  }
  return out;
}

inline Matrix stack_rows(const Matrix& a, const Matrix& b) {
  if (a.rows() == 0) return b;
  if (b.rows() == 0) return a;
  if (a.cols() != b.cols()) throw DimensionError("stack_rows: column mismatch");
  std::vector<double> v(a.values().begin(), a.values().end());
  v.insert(v.end(), b.values().begin(), b.values().end());
  return Matrix(a.rows() + b.rows(), a.cols(), std::move(v));
}

inline nlohmann::ordered_json matrix_rows(const Matrix& m) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (double v : m.row(i)) row.push_back(v);
    out.push_back(row);
  }
  return out;
}

/// Drops the listed MACs from the database and the autoencoder's outer layers.
inline void drop_aps(GufuState& s, const std::vector<std::string>& macs) {
  if (macs.empty()) return;
  FingerprintDatabase next = drop_columns(s.db, macs);
  s.ae = resize_for_aps(s.ae, next.ap_count(), column_map(s.db.macs, next.macs), s.rng);
  s.db = std::move(next);
}

/// Fits the decoder to the GNN's current embedding space: D(H[:, :32]) ~ rss
/// for the listed sample nodes of `g`, embedded with fresh virtual edges.
inline std::vector<double> align_to_gnn(GufuState& s, SignalGraph& g, const std::vector<NodeId>& ids,
                                        const Matrix& rss, int epochs, double lr) {
  if (ids.size() < 2) return {};
  create_virtual_edges(g, s.config.sigma);
  const Embeddings h = infer_embeddings(g, s.gnn);
  g.clear_virtual_edges();
  std::vector<std::size_t> rows;
  for (NodeId id : ids) rows.push_back(h.graph.row_of.at(id));
  return align_decoder(s.ae, code_part(h.nodes, rows), normalize_rss(rss),
                       {epochs, lr, OptimizerKind::adam}, s.rng);
}

inline std::vector<NodeId> sample_ids(const SignalGraph& g) {
  std::vector<NodeId> out;
  for (const auto& smp : g.samples()) out.push_back(smp.id);
  return out;
}

}  // namespace detail

/// Offline stage: autoencoder on the survey, signal graph, GNN training, and a
/// consistency pass aligning the decoder with the GNN embedding space.
inline GufuState initialize(FingerprintDatabase survey, const RunConfig& config) {
  config.validate();
  if (survey.size() == 0) throw ValidationError("initialize: survey is empty");
  if (config.site_bounds) survey.bounds = *config.site_bounds;
  validate(survey);
  GufuState s;
  s.config = config;
  s.rng = Rng(config.seed);
  s.db = std::move(survey);
  const auto empty = detail::empty_columns(s.db);
  if (!empty.empty()) {
    log::warn("initialize: dropping " + std::to_string(empty.size()) + " never-detected APs");
    s.db = drop_columns(s.db, empty);
  }
  if (s.db.ap_count() == 0) throw ValidationError("initialize: survey detects no AP");

  try {
    s.ae = Autoencoder::create(s.db.ap_count(), s.rng,
                               {config.ae_hidden, kCodeDim, config.dropout});
    const Matrix xn = normalize_rss(s.db.rss);
    if (s.db.size() < 2) {
      log::warn("initialize: single-sample survey; autoencoder left untrained");
    } else {
      train_initial(s.ae, xn, {config.epochs, config.lr, OptimizerKind::adam}, s.rng);
    }

    s.graph = detail::rebuild_graph(s.db, s.ae, s.scaler);
    const std::size_t ve = create_virtual_edges(s.graph, config.sigma);
    if (ve == 0) log::warn("initialize: no virtual edges at sigma " + std::to_string(config.sigma));
    s.gnn = GnnParams::create(detail::gnn_config(config), s.rng);
    train_gnn(s.graph, s.gnn, detail::gnn_options(config, config.epochs, config.lr), s.rng);

    detail::align_to_gnn(s, s.graph, detail::sample_ids(s.graph), s.db.rss, config.epochs, config.lr);
    s.upd = UpdateMlps::create(s.db.bounds, s.rng, config.mlp_hidden, config.alpha);
  } catch (const TrainingError& e) {
    throw TrainingError(std::string("initialize: ") + e.what());
  }
  return s;
}

/// One batch: update of existing fingerprints, then AP additions/removals,
/// then retraining of the autoencoder and the GNN.
inline CycleResult update_cycle(GufuState& s, const SignalBatch& batch) {
  validate(batch);
  const RunConfig& cfg = s.config;
  CycleResult out;
  auto& rep = out.report;
  rep["cycle"] = s.cycle + 1;
  rep["batch_id"] = batch.batch_id;
  rep["batch_size"] = batch.size();
  rep["config"] = to_json(cfg);

  if (batch.size() == 0) {
    log::warn("update_cycle: empty batch; nothing to do");
    rep["status"] = "empty";
    ++s.cycle;
    return out;
  }

  const ApAlignment al = align(s.db, batch);
  rep["alignment"] = {{"shared", al.shared.size()},
                      {"new", al.new_aps.size()},
                      {"missing", al.missing_aps.size()}};
  const bool run_update = !al.shared.empty();
  if (!run_update) log::warn("update_cycle: batch shares no AP with the database; skipping the update step");
  rep["status"] = run_update ? "updated" : "ap_changes_only";

  const std::size_t n_old = s.db.size();
  const double delta = cfg.strict_delta ? 0.0 : decision_threshold({&batch.rss});
  // Decoded values nearer to the undetected marker than to the weakest
  // observed reading are written back as undetected.
  const double snap_dbm = 0.5 * ((delta - kWeightOffset) + kUndetectedDbm);
  rep["delta"] = delta;

  // Batch nodes over the database's AP columns.
  SignalGraph& g = s.graph;
  std::vector<NodeId> old_ids;
  for (const auto& smp : g.samples()) old_ids.push_back(smp.id);
  const Matrix u_shared = project_columns(batch.rss, batch.macs, s.db.macs);
  const Matrix batch_loc = random_locations(s.db.bounds, batch.size(), s.rng);
  const std::vector<NodeId> batch_ids =
      add_batch_nodes(g, s.scaler.apply(detail::encode_rss(s.ae, u_shared)), u_shared, s.db.macs, batch_loc);
  const std::size_t n_virtual = create_virtual_edges(g, cfg.sigma);
  rep["virtual_edges"] = n_virtual;

  const Embeddings h = infer_embeddings(g, s.gnn);
  std::vector<std::size_t> old_rows, new_rows;
  for (NodeId id : old_ids) old_rows.push_back(h.graph.row_of.at(id));
  for (NodeId id : batch_ids) new_rows.push_back(h.graph.row_of.at(id));
  const Matrix z_x = gather_rows(h.nodes, old_rows);
  const Matrix z_u = gather_rows(h.nodes, new_rows);

  // Update module: locations for the batch and refreshed fingerprints.
  Matrix x_hat = s.db.rss;
  Matrix z_target = detail::code_part(h.nodes, old_rows);
  if (run_update) {
    const VirtualAdjacency adj = virtual_adjacency(g, old_ids, batch_ids);
    rep["virtual_adjacency_columns"] = adj.active.size();
    const UpdateHistory hist = train_update_module(
        s.upd, z_x, s.db.locations, z_u, adj,
        {cfg.update_epochs, cfg.lr, OptimizerKind::adam, cfg.fresh_start}, s.rng);
    out.update_loss_csv = hist.to_csv();
    if (!hist.epochs.empty()) {
      const auto& f = hist.epochs.front();
      const auto& l = hist.epochs.back();
      rep["update_loss"] = {{"first", {f.location, f.feature, f.location_consistency, f.feature_consistency, f.total}},
                            {"last", {l.location, l.feature, l.location_consistency, l.feature_consistency, l.total}}};
    }
    out.predicted_locations = predict_locations(s.upd, z_u);
    const FingerprintUpdate fu = apply_fingerprint_update(s.db, s.upd, s.ae, snap_dbm);
    x_hat = fu.db.rss;
    z_target = slice_cols(update_features(s.upd, s.db.locations), 0, kCodeDim);
    rep["fingerprint_update"] = {{"clamped", fu.clamped}, {"snapped", fu.snapped}};
  }
  rep["predicted_locations"] = detail::matrix_rows(out.predicted_locations);

  // AP changes on the graph with the pre-change embeddings as trust features.
  std::vector<std::string> new_macs;
  std::vector<std::size_t> new_cols;
  for (std::size_t c : al.new_aps) {
    new_macs.push_back(batch.macs[c]);
    new_cols.push_back(c);
  }
  Matrix new_rss(batch.size(), new_cols.size());
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t k = 0; k < new_cols.size(); ++k) new_rss(i, k) = batch.rss(i, new_cols[k]);
  const std::vector<NodeId> new_ap_ids = new_ap_nodes(g, batch_ids, new_rss, new_macs);
  new_macs.clear();
  for (NodeId ap : new_ap_ids) new_macs.push_back(g.ap(ap).mac);

  NodeFeatures feats;
  for (std::size_t r = 0; r < h.graph.node_ids.size(); ++r) {
    const auto row = h.nodes.row(r);
    feats.emplace(h.graph.node_ids[r], std::vector<double>(row.begin(), row.end()));
  }
  for (NodeId ap : new_ap_ids) feats[ap] = neighbor_weighted_mean(g, ap, feats);

  EdgeModification mods;
  mods.delta = delta;
  if (cfg.edge_prediction) {
    const TrustScores trust = compute_trust(g, feats, {cfg.epsilon, cfg.trust_max_iterations});
    rep["trust"] = {{"iterations", trust.iterations}, {"converged", trust.converged}};
    mods = predict_edges(g, trust, delta);
    add_predicted_edges(g, mods);
  }
  std::map<NodeId, std::string> sample_label, ap_label;
  for (std::size_t i = 0; i < old_ids.size(); ++i) sample_label[old_ids[i]] = "db:" + std::to_string(i);
  for (std::size_t i = 0; i < batch_ids.size(); ++i) sample_label[batch_ids[i]] = "batch:" + std::to_string(i);
  for (const auto& a : g.aps()) ap_label[a.id] = a.mac;
  const std::vector<std::string> forgotten = apply_forgetting(g, mods);

  // X' over the post-change column set: the refreshed fingerprints with
  // removed edges cleared and predicted edges written in.
  std::vector<std::string> macs2;
  for (const auto& m : s.db.macs)
    if (std::find(forgotten.begin(), forgotten.end(), m) == forgotten.end()) macs2.push_back(m);
  for (const auto& m : new_macs)
    if (std::find(forgotten.begin(), forgotten.end(), m) == forgotten.end()) macs2.push_back(m);
  Matrix x_prime = project_columns(x_hat, s.db.macs, macs2);
  std::unordered_map<NodeId, std::size_t> old_index;
  for (std::size_t i = 0; i < old_ids.size(); ++i) old_index.emplace(old_ids[i], i);
  std::unordered_map<NodeId, std::size_t> col_of;
  for (const auto& a : g.aps()) {
    auto it = std::find(macs2.begin(), macs2.end(), a.mac);
    if (it != macs2.end()) col_of.emplace(a.id, static_cast<std::size_t>(it - macs2.begin()));
  }
  for (auto [sample, ap] : mods.removed) {
    auto r = old_index.find(sample);
    auto c = col_of.find(ap);
    if (r != old_index.end() && c != col_of.end()) x_prime(r->second, c->second) = kUndetectedDbm;
  }
  std::size_t added_to_db = 0;
  for (const auto& e : mods.added) {
    auto r = old_index.find(e.sample);
    auto c = col_of.find(e.ap);
    if (r == old_index.end() || c == col_of.end()) continue;
    x_prime(r->second, c->second) = std::clamp(e.weight - kWeightOffset, kUndetectedDbm, 0.0);
    ++added_to_db;
  }
  nlohmann::ordered_json edge_report = to_json(mods, sample_label, ap_label);
  edge_report["added_to_database"] = added_to_db;
  rep["edge_modification"] = edge_report;
  rep["added_ap_nodes"] = new_macs;
  const Matrix u_prime = project_columns(batch.rss, batch.macs, macs2);

  // Autoencoder on the new column set, pulled towards the refreshed features.
  const std::vector<std::string> macs_before = s.db.macs;
  s.ae = resize_for_aps(s.ae, macs2.size(), detail::column_map(macs_before, macs2), s.rng);
  const Matrix x_norm = normalize_rss(x_prime);
  const auto ae_hist = retrain_consistent(s.ae, x_norm, z_target, x_norm,
                                          {cfg.retrain_epochs, cfg.retrain_lr, OptimizerKind::adam}, s.rng);
  if (!ae_hist.empty()) {
    const auto& l = ae_hist.back();
    rep["ae_retrain"] = {{"reconstruction", l.reconstruction}, {"encoder", l.encoder},
                         {"decoder", l.decoder}, {"total", l.total()}};
  }

  const auto refresh = train_initial(s.ae, normalize_rss(detail::stack_rows(x_prime, u_prime)),
                                     {cfg.epochs, cfg.retrain_lr, OptimizerKind::adam}, s.rng);
  if (!refresh.empty()) rep["ae_refresh"] = refresh.back();
  s.db.macs = macs2;
  s.db.rss = x_prime;
  std::vector<std::string> removed_aps = forgotten;
  const auto empty = detail::empty_columns(s.db);
  detail::drop_aps(s, empty);
  removed_aps.insert(removed_aps.end(), empty.begin(), empty.end());
  rep["removed_ap_nodes"] = removed_aps;

  // GNN retraining on the refreshed graph with this batch attached.
  SignalGraph g2 = detail::rebuild_graph(s.db, s.ae, s.scaler);
  const Matrix u_final = project_columns(batch.rss, batch.macs, s.db.macs);
  const auto ids2 = add_batch_nodes(g2, s.scaler.apply(detail::encode_rss(s.ae, u_final)), u_final, s.db.macs, batch_loc);
  init_ap_features(g2);
  create_virtual_edges(g2, cfg.sigma);
  const auto gnn_hist = train_gnn(g2, s.gnn, detail::gnn_options(cfg, cfg.retrain_epochs, cfg.retrain_lr), s.rng);
  if (!gnn_hist.empty()) rep["gnn_retrain"] = {{"first", gnn_hist.front()}, {"last", gnn_hist.back()}};

  // Decoder back onto the retrained embedding space, fitted to the batch's measurements.
  const auto align_hist = detail::align_to_gnn(s, g2, ids2, u_final, cfg.epochs, cfg.lr);
  if (!align_hist.empty()) rep["decoder_alignment"] = {{"first", align_hist.front()}, {"last", align_hist.back()}};
  remove_batch_nodes(g2, ids2);

  s.graph = detail::rebuild_graph(s.db, s.ae, s.scaler);
  if (s.graph.samples().size() != n_old) throw StructuralError("update_cycle: sample count changed");
  rep["database"] = {{"rows", s.db.size()}, {"aps", s.db.ap_count()}};
  ++s.cycle;
  return out;
}

// ---- persistence ---------------------------------------------------------

/// Exclusive lock file inside a state directory, released on destruction.
class StateLock {
 public:
  explicit StateLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    std::filesystem::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) throw ValidationError("state directory " + dir.string() + " is locked (" + path_.string() + ")");
  }
  StateLock(const StateLock&) = delete;
  StateLock& operator=(const StateLock&) = delete;
  ~StateLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::filesystem::remove(path_);
    }
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

inline void save_state(const GufuState& s, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "reports");
  NamedMatrices entries;
  append_params(entries, s.ae.params());
  append_params(entries, s.gnn.params());
  append_params(entries, s.upd.params());
  save_checkpoint(dir / "model", entries);
  jsonl::save_survey(dir / "db.jsonl", s.db);
  nlohmann::ordered_json m;
  m["format"] = "gufu-state";
  m["version"] = 1;
  m["cycle"] = s.cycle;
  m["config"] = to_json(s.config);
  m["macs"] = s.db.macs;
  m["site_bounds"] = {s.db.bounds.x_min, s.db.bounds.y_min, s.db.bounds.x_max, s.db.bounds.y_max};
  m["update_module_trained"] = s.upd.trained();
  m["rng"] = s.rng.serialize();
  m["checkpoint"] = "model";
  m["database"] = "db.jsonl";
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline void save_report(const std::filesystem::path& dir, int cycle, const CycleResult& r) {
  std::filesystem::create_directories(dir / "reports");
  const std::string stem = "cycle_" + std::to_string(cycle);
  write_text(dir / "reports" / (stem + ".json"), r.report.dump(2) + "\n");
  if (!r.update_loss_csv.empty()) write_text(dir / "reports" / (stem + "_update_loss.csv"), r.update_loss_csv);
}

inline GufuState load_state(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ValidationError("no state manifest in " + dir.string());
  nlohmann::json m;
  try {
    in >> m;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what(), 0);
  }
  if (m.value("format", "") != "gufu-state") throw ValidationError("not a state manifest: " + dir.string());
  GufuState s;
  s.config = run_config_from_json(m.at("config"));
  s.cycle = m.at("cycle").get<int>();
  const auto macs = m.at("macs").get<std::vector<std::string>>();
  const auto& b = m.at("site_bounds");
  const SiteBounds bounds{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                          b.at(3).get<double>()};
  FingerprintDatabase raw = jsonl::load_survey(dir / m.at("database").get<std::string>(), bounds);
  s.db.locations = raw.locations;
  s.db.rss = project_columns(raw.rss, raw.macs, macs);
  s.db.macs = macs;
  s.db.bounds = bounds;
  validate(s.db);

  const NamedMatrices loaded = load_checkpoint(dir / m.at("checkpoint").get<std::string>());
  Rng scratch(0);
  s.ae = Autoencoder::create(macs.size(), scratch, {s.config.ae_hidden, kCodeDim, s.config.dropout});
  restore_params(s.ae.params(), loaded);
  s.gnn = GnnParams::create(detail::gnn_config(s.config), scratch);
  restore_params(s.gnn.params(), loaded);
  s.upd = UpdateMlps::create(bounds, scratch, s.config.mlp_hidden, s.config.alpha);
  restore_params(s.upd.params(), loaded);
  s.upd.mark_trained(m.at("update_module_trained").get<bool>());
  s.rng = Rng::deserialize(m.at("rng").get<std::string>());
  s.graph = detail::rebuild_graph(s.db, s.ae, s.scaler);
  return s;
}

}  // namespace gufu
