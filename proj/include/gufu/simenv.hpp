#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gufu/data/database.hpp"
#include "gufu/error.hpp"
#include "gufu/log.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/rng.hpp"

namespace gufu::sim {

struct SimAp {
  std::string mac;
  double x = 0.0;
  double y = 0.0;
  double ref_dbm = -40.0;  // P_tx - PL(1 m)
  double exponent = 3.0;
};

enum class EventKind { add, remove, move, power_change };

/// A change applied from `week` onwards. power_change with mac "*" hits every live AP.
struct SimEvent {
  int week = 1;
  EventKind kind = EventKind::power_change;
  std::string mac;
  double x = 0.0;
  double y = 0.0;
  double ref_dbm = -40.0;
  double exponent = 3.0;
  double delta_db = 0.0;
};

struct SimConfig {
  SiteBounds bounds{0.0, 0.0, 20.0, 20.0};
  double grid_spacing = 2.5;
  int survey_repeats = 1;
  std::vector<SimAp> aps;
  double shadowing_sigma = 1.5;
  double shadow_cell = 0.5;
  double noise_sigma = 3.0;
  double detection_floor = kUndetectedDbm;
  std::vector<SimEvent> events;
  int weeks = 8;
  int batch_size = 200;
  std::uint64_t seed = 1;
};

inline std::string mac_for(std::uint64_t k) {
  char buf[18];
  std::snprintf(buf, sizeof buf, "02:00:00:00:%02x:%02x", static_cast<unsigned>((k >> 8) & 0xff),
                static_cast<unsigned>(k & 0xff));
  return buf;
}

inline std::uint64_t mac_hash(const std::string& mac) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : mac) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::add: return "add";
    case EventKind::remove: return "remove";
    case EventKind::move: return "move";
    case EventKind::power_change: return "power_change";
  }
  return "?";
}

inline EventKind event_kind(const std::string& s) {
  if (s == "add") return EventKind::add;
  if (s == "remove") return EventKind::remove;
  if (s == "move") return EventKind::move;
  if (s == "power_change") return EventKind::power_change;
  throw ValidationError("unknown event kind \"" + s + "\"");
}

/// Live AP list after applying every event with event.week <= week, in order.
inline std::vector<SimAp> aps_at_week(const SimConfig& cfg, int week) {
  std::vector<SimAp> aps = cfg.aps;
  auto find = [&](const std::string& mac) {
    return std::find_if(aps.begin(), aps.end(), [&](const SimAp& a) { return a.mac == mac; });
  };
  for (const auto& e : cfg.events) {
    if (e.week > week) continue;
    switch (e.kind) {
      case EventKind::add:
        if (find(e.mac) != aps.end()) throw ValidationError("event adds existing AP " + e.mac);
        aps.push_back({e.mac, e.x, e.y, e.ref_dbm, e.exponent});
        break;
      case EventKind::remove: {
        auto it = find(e.mac);
        if (it == aps.end()) throw ValidationError("event removes unknown AP " + e.mac);
        aps.erase(it);
        break;
      }
      case EventKind::move: {
        auto it = find(e.mac);
        if (it == aps.end()) throw ValidationError("event moves unknown AP " + e.mac);
        it->x = e.x;
        it->y = e.y;
        break;
      }
      case EventKind::power_change:
        if (e.mac == "*") {
          for (auto& a : aps) a.ref_dbm += e.delta_db;
        } else {
          auto it = find(e.mac);
          if (it == aps.end()) throw ValidationError("event changes unknown AP " + e.mac);
          it->ref_dbm += e.delta_db;
        }
        break;
    }
  }
  return aps;
}

/// Log-normal shadowing, fixed per (AP, spatial cell).
inline double shadowing(const SimConfig& cfg, const SimAp& ap, double x, double y) {
  if (cfg.shadowing_sigma == 0.0) return 0.0;
  const auto cx = static_cast<std::int64_t>(std::floor(x / cfg.shadow_cell));
  const auto cy = static_cast<std::int64_t>(std::floor(y / cfg.shadow_cell));
  Rng r(derive_seed(cfg.seed ^ 0x5ad0, mac_hash(ap.mac), static_cast<std::uint64_t>(cx),
                    static_cast<std::uint64_t>(cy)));
  return cfg.shadowing_sigma * r.normal();
}

/// Noise-free mean RSS in dBm (no detection floor applied).
inline double mean_rss(const SimConfig& cfg, const SimAp& ap, double x, double y) {
  const double d = std::max(std::hypot(x - ap.x, y - ap.y), 1.0);
  return ap.ref_dbm - 10.0 * ap.exponent * std::log10(d) + shadowing(cfg, ap, x, y);
}

/// One reading: mean + Gaussian noise when `noise` is given; below the floor
/// reads as undetected. Values above 0 dBm are capped at 0.
inline double rss_at(const SimConfig& cfg, const SimAp& ap, double x, double y,
                     Rng* noise = nullptr) {
  double v = mean_rss(cfg, ap, x, y);
  if (noise != nullptr && cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise->normal();
  if (v < cfg.detection_floor || v <= kUndetectedDbm) return kUndetectedDbm;
  return std::min(v, 0.0);
}

inline std::vector<std::array<double, 2>> grid_centers(const SimConfig& cfg) {
  std::vector<std::array<double, 2>> out;
  const auto nx = static_cast<int>(std::floor(cfg.bounds.width() / cfg.grid_spacing + 1e-9));
  const auto ny = static_cast<int>(std::floor(cfg.bounds.height() / cfg.grid_spacing + 1e-9));
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      out.push_back({cfg.bounds.x_min + (i + 0.5) * cfg.grid_spacing,
                     cfg.bounds.y_min + (j + 0.5) * cfg.grid_spacing});
  return out;
}

/// RSS rows for the given locations; columns are the APs detected at least once.
inline Matrix scan(const SimConfig& cfg, const std::vector<SimAp>& aps, const Matrix& locations,
                   Rng* noise, std::vector<std::string>& macs_out, bool keep_all_columns) {
  Matrix full(locations.rows(), aps.size(), kUndetectedDbm);
  for (std::size_t i = 0; i < locations.rows(); ++i)
    for (std::size_t a = 0; a < aps.size(); ++a)
      full(i, a) = rss_at(cfg, aps[a], locations(i, 0), locations(i, 1), noise);
  std::vector<std::size_t> keep;
  for (std::size_t a = 0; a < aps.size(); ++a) {
    bool seen = keep_all_columns;
    for (std::size_t i = 0; i < locations.rows() && !seen; ++i) seen = full(i, a) > kUndetectedDbm;
    if (seen) keep.push_back(a);
  }
  Matrix out(locations.rows(), keep.size());
  macs_out.clear();
  for (std::size_t k = 0; k < keep.size(); ++k) {
    macs_out.push_back(aps[keep[k]].mac);
    for (std::size_t i = 0; i < locations.rows(); ++i) out(i, k) = full(i, keep[k]);
  }
  return out;
}

/// Noisy survey at every grid center (week 0 environment).
inline FingerprintDatabase survey(const SimConfig& cfg) {
  const auto centers = grid_centers(cfg);
  const int reps = std::max(cfg.survey_repeats, 1);
  Matrix loc(centers.size() * static_cast<std::size_t>(reps), 2);
  std::size_t r = 0;
  for (const auto& c : centers)
    for (int k = 0; k < reps; ++k, ++r) {
      loc(r, 0) = c[0];
      loc(r, 1) = c[1];
    }
  Rng noise(derive_seed(cfg.seed, 0x5u, 0));
  FingerprintDatabase db;
  db.locations = loc;
  db.rss = scan(cfg, aps_at_week(cfg, 0), loc, &noise, db.macs, false);
  db.bounds = cfg.bounds;
  validate(db);
  return db;
}

/// Noise-free fingerprints of the week's environment at the given locations,
/// one column per live AP.
inline FingerprintDatabase truth_db(const SimConfig& cfg, int week, const Matrix& locations) {
  FingerprintDatabase db;
  db.locations = locations;
  db.rss = scan(cfg, aps_at_week(cfg, week), locations, nullptr, db.macs, true);
  db.bounds = cfg.bounds;
  return db;
}

struct CrowdBatch {
  SignalBatch batch;
  Matrix locations;  // ground truth, evaluation only
};

inline CrowdBatch crowdsource_batch(const SimConfig& cfg, int week, std::size_t count) {
  Rng rng(derive_seed(cfg.seed, 0xbu, static_cast<std::uint64_t>(week)));
  CrowdBatch out;
  out.locations = Matrix(count, 2);
  for (std::size_t i = 0; i < count; ++i) {
    out.locations(i, 0) = rng.uniform(cfg.bounds.x_min, cfg.bounds.x_max);
    out.locations(i, 1) = rng.uniform(cfg.bounds.y_min, cfg.bounds.y_max);
  }
  out.batch.rss = scan(cfg, aps_at_week(cfg, week), out.locations, &rng, out.batch.macs, false);
  out.batch.batch_id = "week_" + std::to_string(week);
  return out;
}

/// Default desk scenario: 20 m x 20 m, 2.5 m grid, 12 APs, 8 weekly batches of
/// 200 scans. With `churn`, about 15% of live APs are added and 10% removed per week.
inline SimConfig desk_config(std::uint64_t seed, bool churn = true) {
  SimConfig cfg;
  cfg.seed = seed;
  Rng rng(derive_seed(seed, 0xa9u, 0));
  std::uint64_t next_mac = 1;
  auto place = [&](SimAp& a) {
    a.x = rng.uniform(cfg.bounds.x_min, cfg.bounds.x_max);
    a.y = rng.uniform(cfg.bounds.y_min, cfg.bounds.y_max);
    a.ref_dbm = rng.uniform(-45.0, -35.0);
    a.exponent = rng.uniform(2.7, 3.3);
  };
  for (int k = 0; k < 12; ++k) {
    SimAp a;
    a.mac = mac_for(next_mac++);
    place(a);
    cfg.aps.push_back(a);
  }
  if (!churn) return cfg;
  std::vector<std::string> live;
  for (const auto& a : cfg.aps) live.push_back(a.mac);
  for (int week = 1; week <= cfg.weeks; ++week) {
    const auto adds = static_cast<int>(std::lround(0.15 * static_cast<double>(live.size())));
    const auto removes = static_cast<int>(std::lround(0.10 * static_cast<double>(live.size())));
    for (int k = 0; k < removes && live.size() > 1; ++k) {
      const auto idx = static_cast<std::size_t>(rng.uniform_index(live.size()));
      cfg.events.push_back({week, EventKind::remove, live[idx]});
      live.erase(live.begin() + static_cast<long>(idx));
    }
    for (int k = 0; k < adds; ++k) {
      SimAp a;
      a.mac = mac_for(next_mac++);
      place(a);
      cfg.events.push_back({week, EventKind::add, a.mac, a.x, a.y, a.ref_dbm, a.exponent});
      live.push_back(a.mac);
    }
  }
  return cfg;
}

// ---- config JSON ---------------------------------------------------------

inline nlohmann::ordered_json to_json(const SimConfig& cfg) {
  nlohmann::ordered_json j;
  j["site_bounds"] = {cfg.bounds.x_min, cfg.bounds.y_min, cfg.bounds.x_max, cfg.bounds.y_max};
  j["grid_spacing"] = cfg.grid_spacing;
  j["survey_repeats"] = cfg.survey_repeats;
  j["shadowing_sigma"] = cfg.shadowing_sigma;
  j["shadow_cell"] = cfg.shadow_cell;
  j["noise_sigma"] = cfg.noise_sigma;
  j["detection_floor"] = cfg.detection_floor;
  j["weeks"] = cfg.weeks;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["aps"] = nlohmann::ordered_json::array();
  for (const auto& a : cfg.aps)
    j["aps"].push_back({{"mac", a.mac}, {"pos", {a.x, a.y}}, {"ref_dbm", a.ref_dbm},
                        {"exponent", a.exponent}});
  j["events"] = nlohmann::ordered_json::array();
  for (const auto& e : cfg.events) {
    nlohmann::ordered_json ej{{"week", e.week}, {"kind", to_string(e.kind)}, {"mac", e.mac}};
    if (e.kind == EventKind::add || e.kind == EventKind::move) ej["pos"] = {e.x, e.y};
    if (e.kind == EventKind::add) {
      ej["ref_dbm"] = e.ref_dbm;
      ej["exponent"] = e.exponent;
    }
    if (e.kind == EventKind::power_change) ej["delta_db"] = e.delta_db;
    j["events"].push_back(ej);
  }
  return j;
}

/// Without an "aps" list the desk scenario for "seed" is the base ("churn"
/// toggles its weekly adds/removals). "drift_db_per_week" appends a
/// power_change on every AP for weeks 1..weeks.
inline SimConfig from_json(const nlohmann::json& j) {
  SimConfig cfg;
  try {
    if (!j.is_object()) throw ValidationError("simulation config: expected a JSON object");
    if (!j.contains("aps")) cfg = desk_config(j.value("seed", std::uint64_t{1}), j.value("churn", true));
    if (j.contains("site_bounds")) {
      const auto& b = j.at("site_bounds");
      cfg.bounds = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                    b.at(3).get<double>()};
    }
    cfg.grid_spacing = j.value("grid_spacing", cfg.grid_spacing);
    cfg.survey_repeats = j.value("survey_repeats", cfg.survey_repeats);
    cfg.shadowing_sigma = j.value("shadowing_sigma", cfg.shadowing_sigma);
    cfg.shadow_cell = j.value("shadow_cell", cfg.shadow_cell);
    cfg.noise_sigma = j.value("noise_sigma", cfg.noise_sigma);
    cfg.detection_floor = j.value("detection_floor", cfg.detection_floor);
    cfg.weeks = j.value("weeks", cfg.weeks);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.seed = j.value("seed", cfg.seed);
    for (const auto& a : j.value("aps", nlohmann::json::array())) {
      cfg.aps.push_back({canonical_mac(a.at("mac").get<std::string>()), a.at("pos").at(0).get<double>(),
                         a.at("pos").at(1).get<double>(), a.value("ref_dbm", -40.0),
                         a.value("exponent", 3.0)});
    }
    for (const auto& e : j.value("events", nlohmann::json::array())) {
      SimEvent ev;
      ev.week = e.at("week").get<int>();
      ev.kind = event_kind(e.at("kind").get<std::string>());
      ev.mac = e.value("mac", std::string("*"));
      if (ev.mac != "*") ev.mac = canonical_mac(ev.mac);
      if (e.contains("pos")) {
        ev.x = e.at("pos").at(0).get<double>();
        ev.y = e.at("pos").at(1).get<double>();
      }
      ev.ref_dbm = e.value("ref_dbm", -40.0);
      ev.exponent = e.value("exponent", 3.0);
      ev.delta_db = e.value("delta_db", 0.0);
      cfg.events.push_back(ev);
    }
    if (const double drift = j.value("drift_db_per_week", 0.0); drift != 0.0)
      for (int w = 1; w <= cfg.weeks; ++w)
        cfg.events.push_back({w, EventKind::power_change, "*", 0.0, 0.0, 0.0, 0.0, drift});
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("simulation config: ") + ex.what());
  }
  if (!(cfg.grid_spacing > 0.0) || cfg.shadowing_sigma < 0.0 || cfg.noise_sigma < 0.0 ||
      !(cfg.shadow_cell > 0.0)) {
    throw ValidationError("simulation config: spacing and cell must be positive, sigmas >= 0");
  }
  for (const auto& a : cfg.aps)
    if (!cfg.bounds.contains(a.x, a.y)) throw ValidationError("simulation config: AP " + a.mac + " outside site");
  return cfg;
}

inline SimConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
  return from_json(j);
}

// ---- metrics -------------------------------------------------------------

struct RssError {
  double mean_abs_db = 0.0;
  std::size_t entries = 0;
  std::vector<std::string> missing_in_updated;  // truth columns absent from the updated db
  std::vector<std::string> extra_in_updated;
};

/// Mean |updated - truth| over detected truth entries on shared MACs. Rows
/// are matched by index. With `missing_as_undetected`, truth columns absent
/// from the updated db count as -120 dBm instead of being skipped.
inline RssError rss_error(const FingerprintDatabase& updated, const FingerprintDatabase& truth,
                          bool missing_as_undetected = false,
                          const std::vector<std::string>* only_macs = nullptr) {
  if (updated.size() != truth.size()) {
    throw DimensionError("rss_error: " + std::to_string(updated.size()) + " vs " +
                         std::to_string(truth.size()) + " rows");
  }
  RssError out;
  const ApAlignment a = align(updated.macs, truth.macs);
  for (std::size_t c : a.new_aps) out.missing_in_updated.push_back(truth.macs[c]);
  for (std::size_t c : a.missing_aps) out.extra_in_updated.push_back(updated.macs[c]);
  std::vector<std::pair<std::optional<std::size_t>, std::size_t>> cols;  // (updated col, truth col)
  auto wanted = [&](std::size_t tc) {
    return only_macs == nullptr ||
           std::find(only_macs->begin(), only_macs->end(), truth.macs[tc]) != only_macs->end();
  };
  for (auto [uc, tc] : a.shared)
    if (wanted(tc)) cols.emplace_back(uc, tc);
  if (missing_as_undetected)
    for (std::size_t tc : a.new_aps)
      if (wanted(tc)) cols.emplace_back(std::nullopt, tc);
  if (cols.empty()) throw ValidationError("rss_error: no shared MACs");
  double sum = 0.0;
  for (auto [uc, tc] : cols)
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const double t = truth.rss(i, tc);
      if (t <= kUndetectedDbm) continue;
      const double u = uc ? updated.rss(i, *uc) : kUndetectedDbm;
      sum += std::abs(u - t);
      ++out.entries;
    }
  if (out.entries == 0) throw ValidationError("rss_error: no detected truth entries");
  out.mean_abs_db = sum / static_cast<double>(out.entries);
  return out;
}

struct LocationError {
  double mean_m = 0.0;
  std::vector<double> distances;
  std::vector<std::pair<double, double>> cdf;  // (meters, fraction <= meters), 1 m steps
};

inline LocationError location_error(const Matrix& predicted, const Matrix& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != 2 || truth.cols() != 2) {
    throw DimensionError("location_error: " + predicted.shape_string() + " vs " +
                         truth.shape_string());
  }
  LocationError out;
  for (std::size_t i = 0; i < truth.rows(); ++i)
    out.distances.push_back(std::hypot(predicted(i, 0) - truth(i, 0), predicted(i, 1) - truth(i, 1)));
  if (out.distances.empty()) return out;
  double sum = 0.0, worst = 0.0;
  for (double d : out.distances) {
    sum += d;
    worst = std::max(worst, d);
  }
  out.mean_m = sum / static_cast<double>(out.distances.size());
  const int steps = static_cast<int>(std::ceil(worst));
  for (int m = 0; m <= std::max(steps, 1); ++m) {
    const auto below = std::count_if(out.distances.begin(), out.distances.end(),
                                     [&](double d) { return d <= m; });
    out.cdf.emplace_back(m, static_cast<double>(below) / static_cast<double>(out.distances.size()));
  }
  return out;
}

}  // namespace gufu::sim
