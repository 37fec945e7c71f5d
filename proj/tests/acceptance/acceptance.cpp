// Acceptance suite: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (capped at 125).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "../support/oracles.hpp"
#include "gufu/edge_dynamics.hpp"
#include "gufu/feature_extractor.hpp"
#include "gufu/graph/gnn.hpp"
#include "gufu/log.hpp"
#include "gufu/pipeline.hpp"
#include "gufu/simenv.hpp"
#include "gufu/update.hpp"

using namespace gufu;
namespace fs = std::filesystem;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr std::size_t kVirtualNodes = 200;
constexpr double kVirtualSeconds = 5.0;
constexpr int kTrustGraphs = 20;
constexpr double kTrustTol = 1e-6;
constexpr double kTrustEps = 0.1;
constexpr int kTrustMaxIter = 100;
constexpr double kReferenceTol = 1e-9;
constexpr int kCycles = 8;
constexpr double kStaticMarginDb = 1.0;
constexpr double kStaticSeconds = 900.0;
constexpr double kDriftRatio = 0.7;
constexpr double kDriftDbPerWeek = -1.0;
constexpr int kRemovalWeek = 2;
constexpr int kRemovalGrace = 2;
constexpr double kLocationLimitM = 5.0;
constexpr std::uint64_t kSeed = 1;
constexpr std::size_t kBatch = 200;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::printf("%s  criterion %2d  %-28s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
}

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

std::vector<double> feature(Rng& rng) {
  std::vector<double> f(kNodeDim);
  for (double& v : f) v = rng.uniform(-1.0, 1.0);
  return f;
}

void randomize_biases(ParamSet& p, Rng& rng) {
  for (auto& e : p.entries())
    if (e.value.rows() == 1)
      for (double& v : e.value.values()) v = rng.uniform(0.1, 0.5);
}

// Two samples on one AP, a third edge to a second AP, one virtual edge.
SignalGraph four_node_graph() {
  Rng rng(31);
  SignalGraph g;
  const NodeId s0 = g.add_sample(feature(rng), {0, 0}, false);
  const NodeId s1 = g.add_sample(feature(rng), {0, 0}, false);
  const NodeId a0 = g.add_ap("a0", feature(rng));
  const NodeId a1 = g.add_ap("a1", feature(rng));
  g.add_edge(s0, a0, 60);
  g.add_edge(s1, a0, 40);
  g.add_edge(s1, a1, 20);
  g.set_virtual_edges({{s0, s1}});
  return g;
}

// ---- 1 ----------------------------------------------------------------------

void gradient_suite() {
  const auto t0 = Clock::now();
  Rng rng(kSeed);

  Autoencoder ae = Autoencoder::create(4, rng, {3, 2, 0.5});
  randomize_biases(ae.params(), rng);
  Matrix x(5, 4);
  for (double& v : x.values()) v = rng.uniform();
  const Rng mask_seed(17);
  const auto r_ae = oracle::grad_check(ae.params(), [&](Tape& t) {
    Rng mask = mask_seed;
    Var xv = t.constant(x);
    return t.frobenius_diff(xv, ae.decode(t, ae.encode(t, xv, mask, true), mask, true));
  });

  const SignalGraph g = four_node_graph();
  GnnParams gnn = GnnParams::create({.layers = 1, .dropout = 0.0}, rng);
  const GraphTensors tensors = snapshot(g);
  const std::vector<std::pair<std::size_t, std::size_t>> negatives{{0, 3}, {2, 3}};
  const auto r_gnn = oracle::grad_check(gnn.params(), [&](Tape& t) {
    Rng unused(0);
    auto vars = aggregate(t, tensors, gnn, false, unused);
    return graph_loss(t, vars.nodes, tensors.edges, negatives);
  });

  UpdateMlps upd = UpdateMlps::create({0, 0, 1, 1}, rng, 3, 0.5);
  randomize_biases(upd.params(), rng);
  SignalGraph vg;
  std::vector<NodeId> old_ids, new_ids;
  for (int i = 0; i < 4; ++i) old_ids.push_back(vg.add_sample(feature(rng), {0, 0}, false));
  for (int i = 0; i < 2; ++i) new_ids.push_back(vg.add_sample(feature(rng), {0, 0}, true));
  vg.set_virtual_edges({{old_ids[0], new_ids[0]}, {old_ids[2], new_ids[0]}, {old_ids[3], new_ids[1]}});
  const auto adj = virtual_adjacency(vg, old_ids, new_ids);
  Matrix zx(4, kNodeDim), yx(4, 2), zu(2, kNodeDim);
  for (double& v : zx.values()) v = rng.uniform(-1, 1);
  for (double& v : yx.values()) v = rng.uniform();
  for (double& v : zu.values()) v = rng.uniform(-1, 1);
  const auto r_upd = oracle::grad_check(
      upd.params(), [&](Tape& t) { return update_loss(t, upd, zx, yx, zu, adj).total; });

  const double secs = seconds_since(t0);
  const double worst = std::max({r_ae.max_rel, r_gnn.max_rel, r_upd.max_rel});
  report(1, "gradient suite", worst < kGradTol && secs < kGradSeconds,
         fmt("max rel err ae=%.2e (%zu) gnn=%.2e (%zu) update=%.2e (%zu); %.1fs", r_ae.max_rel, r_ae.checked,
             r_gnn.max_rel, r_gnn.checked, r_upd.max_rel, r_upd.checked, secs));
}

// ---- 2 ----------------------------------------------------------------------

void virtual_edge_oracle() {
  Rng rng(kSeed);
  SignalGraph g;
  std::vector<std::vector<double>> centers;
  for (int c = 0; c < 5; ++c) centers.push_back(feature(rng));
  for (std::size_t i = 0; i < kVirtualNodes; ++i) {
    auto f = centers[i % centers.size()];
    for (double& v : f) v += rng.normal(0.0, 0.15);
    g.add_sample(f, {0, 0}, false);
  }
  const auto t0 = Clock::now();
  create_virtual_edges(g, 0.95);
  const double secs = seconds_since(t0);
  std::set<std::pair<NodeId, NodeId>> got;
  for (const auto& e : g.virtual_edges()) got.insert({std::min(e.a, e.b), std::max(e.a, e.b)});
  const auto expected = oracle::brute_force_virtual(g, 0.95);
  report(2, "virtual-edge oracle",
         got == expected && got.size() == g.virtual_edges().size() && secs < kVirtualSeconds,
         fmt("%zu edges vs oracle %zu; %.3fs", got.size(), expected.size(), secs));
}

// ---- 3 ----------------------------------------------------------------------

SignalGraph random_trust_graph(Rng& rng) {
  SignalGraph g;
  constexpr std::size_t kMaxNodes = 30, kMaxDegree = 4;
  const std::size_t n_aps = 2 + rng.uniform_index(5);
  const std::size_t n_samples = 3 + rng.uniform_index(kMaxNodes - n_aps - 2);
  std::vector<NodeId> s, a;
  for (std::size_t i = 0; i < n_samples; ++i) s.push_back(g.add_sample(feature(rng), {0, 0}, false));
  for (std::size_t i = 0; i < n_aps; ++i) a.push_back(g.add_ap("m" + std::to_string(i), feature(rng)));
  std::map<NodeId, std::size_t> deg;
  for (NodeId x : s)
    for (NodeId y : a)
      if (rng.uniform() < 0.5 && deg[x] < kMaxDegree && deg[y] < kMaxDegree) {
        g.add_edge(x, y, rng.uniform(1.0, 110.0));
        ++deg[x];
        ++deg[y];
      }
  std::vector<VirtualEdge> virt;
  for (std::size_t i = 0; i + 1 < s.size(); ++i)
    if (rng.uniform() < 0.4 && deg[s[i]] < kMaxDegree && deg[s[i + 1]] < kMaxDegree) {
      virt.push_back({s[i], s[i + 1]});
      ++deg[s[i]];
      ++deg[s[i + 1]];
    }
  g.set_virtual_edges(virt);
  return g;
}

void trust_fixed_point() {
  Rng rng(kSeed);
  double worst = 0.0;
  int max_iter = 0;
  bool all_ok = true;
  for (int k = 0; k < kTrustGraphs; ++k) {
    const SignalGraph g = random_trust_graph(rng);
    NodeFeatures feats;
    std::vector<NodeId> ids;
    for (const auto& s : g.samples()) ids.push_back(s.id);
    for (const auto& a : g.aps()) ids.push_back(a.id);
    for (const auto& s : g.samples()) feats[s.id] = s.feature;
    for (const auto& a : g.aps()) feats[a.id] = a.feature;
    // Oracle initialization: per-dimension min-max over all nodes, 0.5 for constant dimensions.
    std::map<NodeId, oracle::Vec> init;
    for (NodeId id : ids) init[id] = feats[id];
    for (std::size_t d = 0; d < kNodeDim; ++d) {
      double lo = 1e300, hi = -1e300;
      for (NodeId id : ids) {
        lo = std::min(lo, feats[id][d]);
        hi = std::max(hi, feats[id][d]);
      }
      for (NodeId id : ids) init[id][d] = hi > lo ? (feats[id][d] - lo) / (hi - lo) : 0.5;
    }
    const TrustScores t = compute_trust(g, feats, {.epsilon = kTrustEps, .max_iterations = kTrustMaxIter});
    const auto ref = oracle::trust_fixed_point(g, init, kTrustEps, kTrustMaxIter);
    all_ok = all_ok && t.converged && ref.converged && t.iterations == ref.iterations &&
             t.iterations <= kTrustMaxIter;
    max_iter = std::max(max_iter, t.iterations);
    for (NodeId id : ids)
      for (std::size_t d = 0; d < kNodeDim; ++d) {
        worst = std::max(worst, std::abs(t.g(id)[d] - ref.g.at(id)[d]));
        worst = std::max(worst, std::abs(t.f(id)[d] - ref.f.at(id)[d]));
      }
  }
  report(3, "trust fixed point", all_ok && worst <= kTrustTol,
         fmt("%d graphs, max |diff| %.2e, max iterations %d", kTrustGraphs, worst, max_iter));
}

// ---- 4 ----------------------------------------------------------------------

void reference_equivalence() {
  const SignalGraph g = four_node_graph();
  Rng unused(0);
  GnnParams p = GnnParams::create({.layers = 2, .dropout = 0.0}, unused);
  std::vector<std::array<oracle::Mat, 3>> weights;
  for (int l = 1; l <= 2; ++l) {
    std::array<oracle::Mat, 3> w;
    for (int k = 0; k < 3; ++k) {
      Matrix& m = p.params().at(GnnParams::name(l, k)).value;
      for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j)
          m(i, j) = 0.3 * oracle::pinned(static_cast<std::size_t>(l * 3 + k), i, j);
      w[k] = oracle::to_mat(m);
    }
    weights.push_back(w);
  }
  const Embeddings emb = infer_embeddings(g, p);
  std::vector<std::pair<int, int>> real, virt;
  for (const auto& e : g.edges())
    real.push_back({static_cast<int>(emb.graph.row_of.at(e.sample)), static_cast<int>(emb.graph.row_of.at(e.ap))});
  for (const auto& e : g.virtual_edges())
    virt.push_back({static_cast<int>(emb.graph.row_of.at(e.a)), static_cast<int>(emb.graph.row_of.at(e.b))});
  const auto ref = oracle::reference_aggregate(oracle::to_mat(emb.graph.features), real, virt, weights);
  double worst = 0.0;
  for (std::size_t v = 0; v < ref.size(); ++v)
    for (std::size_t d = 0; d < kNodeDim; ++d) worst = std::max(worst, std::abs(emb.nodes(v, d) - ref[v][d]));
  report(4, "aggregation reference", worst <= kReferenceTol, fmt("max |diff| %.2e over 4 nodes", worst));
}

// ---- simulated runs ---------------------------------------------------------

struct RunResult {
  double upd_error = 0.0;
  double stale_error = 0.0;
  double location_m = 0.0;
  double seconds = 0.0;
  std::vector<std::string> final_macs;
};

// Runs `cycles` weekly cycles. With `dir`, state and reports are saved after
// every cycle; with reload_after > 0, the state is reloaded from disk after
// that cycle.
RunResult run_scenario(const sim::SimConfig& cfg, const FingerprintDatabase& survey, const RunConfig& rc,
                       int cycles, const fs::path& dir = {}, int reload_after = 0,
                       const std::function<void(int, const GufuState&)>& after_cycle = {}) {
  const auto t0 = Clock::now();
  if (!dir.empty()) fs::remove_all(dir);
  GufuState st = initialize(survey, rc);
  if (!dir.empty()) save_state(st, dir);
  RunResult out;
  for (int w = 1; w <= cycles; ++w) {
    const auto b = sim::crowdsource_batch(cfg, w, kBatch);
    const auto r = update_cycle(st, b.batch);
    if (!dir.empty()) {
      save_state(st, dir);
      save_report(dir, st.cycle, r);
      if (w == reload_after) st = load_state(dir);
    }
    if (after_cycle) after_cycle(w, st);
    if (w == cycles) {
      const auto truth = sim::truth_db(cfg, w, st.db.locations);
      out.upd_error = sim::rss_error(st.db, truth).mean_abs_db;
      out.stale_error = sim::rss_error(survey, truth).mean_abs_db;
      out.location_m = r.predicted_locations.rows() > 0
                           ? sim::location_error(r.predicted_locations, b.locations).mean_m
                           : -1.0;
    }
  }
  out.final_macs = st.db.macs;
  out.seconds = seconds_since(t0);
  return out;
}

RunConfig run_config() {
  RunConfig rc;
  rc.seed = kSeed;
  return rc;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Byte-compares two directory trees; returns an empty string when identical.
std::string compare_trees(const fs::path& a, const fs::path& b) {
  std::set<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.insert(fs::relative(e.path(), b));
  if (fa != fb) return "file sets differ";
  for (const auto& f : fa)
    if (slurp(a / f) != slurp(b / f)) return "differs: " + f.string();
  return fa.empty() ? "no files" : "";
}

void static_and_determinism(const fs::path& work) {
  const sim::SimConfig cfg = sim::desk_config(kSeed, false);
  const FingerprintDatabase survey = sim::survey(cfg);

  const RunResult a = run_scenario(cfg, survey, run_config(), kCycles, work / "run_a");
  report(5, "static soundness",
         a.upd_error <= a.stale_error + kStaticMarginDb && a.seconds < kStaticSeconds,
         fmt("updated %.2f dB vs never-updated %.2f dB (limit +%.1f); %.1fs", a.upd_error, a.stale_error,
             kStaticMarginDb, a.seconds));
  report(9, "location sanity", a.location_m >= 0.0 && a.location_m <= kLocationLimitM,
         fmt("mean location error %.2f m at cycle %d (limit %.1f m)", a.location_m, kCycles, kLocationLimitM));

  run_scenario(cfg, survey, run_config(), kCycles, work / "run_b");
  run_scenario(cfg, survey, run_config(), kCycles, work / "run_c", kCycles / 2);
  const std::string rerun = compare_trees(work / "run_a", work / "run_b");
  const std::string reload = compare_trees(work / "run_a", work / "run_c");
  report(10, "determinism & persistence", rerun.empty() && reload.empty(),
         fmt("rerun: %s; reload after cycle %d: %s", rerun.empty() ? "identical" : rerun.c_str(), kCycles / 2,
             reload.empty() ? "identical" : reload.c_str()));
}

void drift_tracking() {
  sim::SimConfig cfg = sim::desk_config(kSeed, false);
  for (int w = 1; w <= kCycles; ++w)
    cfg.events.push_back({w, sim::EventKind::power_change, "*", 0, 0, 0, 0, kDriftDbPerWeek});
  const FingerprintDatabase survey = sim::survey(cfg);
  const RunResult r = run_scenario(cfg, survey, run_config(), kCycles);
  const double ratio = r.upd_error / r.stale_error;
  report(6, "drift tracking", ratio <= kDriftRatio,
         fmt("updated %.2f dB / stale %.2f dB = %.3f (limit %.2f)", r.upd_error, r.stale_error, ratio, kDriftRatio));
}

void new_ap_adoption() {
  const sim::SimConfig cfg = sim::desk_config(kSeed, false);
  const FingerprintDatabase full = sim::survey(cfg);
  // 4 of 12 APs (a third) are hidden from the survey and only appear in batches.
  std::vector<std::string> hidden;
  for (std::size_t k = 0; k < cfg.aps.size(); k += 3) hidden.push_back(cfg.aps[k].mac);
  std::vector<std::string> keep;
  for (const auto& m : full.macs)
    if (std::find(hidden.begin(), hidden.end(), m) == hidden.end()) keep.push_back(m);
  FingerprintDatabase survey = full;
  survey.macs = keep;
  survey.rss = project_columns(full.rss, full.macs, keep);

  auto hidden_error = [&](bool lp) {
    RunConfig rc = run_config();
    rc.edge_prediction = lp;
    double err = 0.0;
    run_scenario(cfg, survey, rc, kCycles, {}, 0, [&](int w, const GufuState& st) {
      if (w == kCycles)
        err = sim::rss_error(st.db, sim::truth_db(cfg, w, st.db.locations), true, &hidden).mean_abs_db;
    });
    return err;
  };
  const double with_lp = hidden_error(true);
  const double without_lp = hidden_error(false);
  report(7, "new-AP adoption", with_lp < without_lp,
         fmt("hidden-column error with edge prediction %.2f dB vs without %.2f dB", with_lp, without_lp));
}

void ap_removal(const fs::path& work) {
  sim::SimConfig cfg = sim::desk_config(kSeed, false);
  const std::string gone = cfg.aps[0].mac;
  cfg.events.push_back({kRemovalWeek, sim::EventKind::remove, gone});
  const FingerprintDatabase survey = sim::survey(cfg);
  int vanished = -1;
  bool exported_clean = false;
  run_scenario(cfg, survey, run_config(), kRemovalWeek + kRemovalGrace - 1, {}, 0,
               [&](int w, const GufuState& st) {
                 const bool present = std::find(st.db.macs.begin(), st.db.macs.end(), gone) != st.db.macs.end();
                 if (!present && vanished < 0) vanished = w;
                 if (present) vanished = -1;
                 if (w == kRemovalWeek + kRemovalGrace - 1) {
                   const fs::path p = work / "removal_export.jsonl";
                   jsonl::save_survey(p, st.db);
                   const auto back = jsonl::load_survey(p);
                   exported_clean = std::find(back.macs.begin(), back.macs.end(), gone) == back.macs.end();
                 }
               });
  report(8, "AP removal", vanished >= kRemovalWeek && exported_clean,
         vanished >= kRemovalWeek
             ? fmt("%s removed at week %d, absent from export after the week-%d cycle", gone.c_str(), kRemovalWeek,
                   vanished)
             : fmt("%s removed at week %d still in export after the week-%d cycle", gone.c_str(), kRemovalWeek,
                   kRemovalWeek + kRemovalGrace - 1));
}

}  // namespace

int main() {
  log::set_level(log::Level::error);
  const fs::path work = fs::temp_directory_path() / "gufu_acceptance";
  fs::create_directories(work);
  const std::vector<std::function<void()>> steps{
      gradient_suite, virtual_edge_oracle, trust_fixed_point, reference_equivalence,
      [&] { static_and_determinism(work); }, drift_tracking, new_ap_adoption, [&] { ap_removal(work); }};
  for (const auto& step : steps) {
    try {
      step();
    } catch (const std::exception& e) {
      ++failures;
      std::printf("FAIL  unexpected exception: %s\n", e.what());
    }
  }
  std::printf("%d criteria failed\n", failures);
  return std::min(failures, 125);
}
