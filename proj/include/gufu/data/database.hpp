#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gufu/error.hpp"
#include "gufu/numerics/matrix.hpp"

namespace gufu {

/// RSS assigned to an AP that a scan did not see.
inline constexpr double kUndetectedDbm = -120.0;
/// Offset c: edge weight = rss + c.
inline constexpr double kWeightOffset = 120.0;

struct SiteBounds {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  bool contains(double x, double y, double tol = 1e-9) const {
    return x >= x_min - tol && x <= x_max + tol && y >= y_min - tol && y <= y_max + tol;
  }
  friend bool operator==(const SiteBounds&, const SiteBounds&) = default;
};

inline std::string canonical_mac(std::string mac) {
  std::transform(mac.begin(), mac.end(), mac.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return mac;
}

/// Labeled survey: one row per scan, one column per MAC.
struct FingerprintDatabase {
  Matrix locations;  // N x 2, meters
  Matrix rss;        // N x n_s, dBm
  std::vector<std::string> macs;
  SiteBounds bounds;

  std::size_t size() const { return rss.rows(); }
  std::size_t ap_count() const { return macs.size(); }

  std::optional<std::size_t> column_of(const std::string& mac) const {
    const auto key = canonical_mac(mac);
    for (std::size_t j = 0; j < macs.size(); ++j)
      if (macs[j] == key) return j;
    return std::nullopt;
  }

  friend bool operator==(const FingerprintDatabase&, const FingerprintDatabase&) = default;
};

/// Unlabeled crowdsourced scans.
struct SignalBatch {
  Matrix rss;  // K x n_b, dBm
  std::vector<std::string> macs;
  std::string batch_id;

  std::size_t size() const { return rss.rows(); }
  friend bool operator==(const SignalBatch&, const SignalBatch&) = default;
};

/// Column correspondence between a database and a batch.
struct ApAlignment {
  std::vector<std::pair<std::size_t, std::size_t>> shared;  // (db column, batch column)
  std::vector<std::size_t> new_aps;                          // batch columns
  std::vector<std::size_t> missing_aps;                      // db columns
};

inline void require_rss_range(const Matrix& rss, const char* what) {
  for (std::size_t i = 0; i < rss.rows(); ++i)
    for (std::size_t j = 0; j < rss.cols(); ++j) {
      const double v = rss(i, j);
      if (!(v >= kUndetectedDbm && v <= 0.0)) {
        throw ValidationError(std::string(what) + ": rss " + std::to_string(v) +
                              " dBm outside [-120, 0] at row " + std::to_string(i) +
                              ", col " + std::to_string(j));
      }
    }
}

/// dBm in [-120, 0] -> [0, 1] via (v + 120) / 120.
inline Matrix normalize_rss(const Matrix& rss_dbm) {
  require_rss_range(rss_dbm, "normalize_rss");
  Matrix out = rss_dbm;
  for (double& v : out.values()) v = (v + kWeightOffset) / kWeightOffset;
  return out;
}

/// Inverse of normalize_rss. Values within 1e-9 outside [0, 1] are clamped.
inline Matrix denormalize_rss(const Matrix& norm) {
  constexpr double tol = 1e-9;
  Matrix out = norm;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) {
      double v = out(i, j);
      if (!(v >= -tol && v <= 1.0 + tol)) {
        throw ValidationError("denormalize_rss: value " + std::to_string(v) +
                              " outside [0, 1] at row " + std::to_string(i) + ", col " +
                              std::to_string(j));
      }
      v = std::clamp(v, 0.0, 1.0);
      out(i, j) = kWeightOffset * v - kWeightOffset;
    }
  return out;
}

inline ApAlignment align(const std::vector<std::string>& db_macs,
                         const std::vector<std::string>& batch_macs) {
  std::unordered_map<std::string, std::size_t> db_index;
  for (std::size_t j = 0; j < db_macs.size(); ++j) db_index.emplace(canonical_mac(db_macs[j]), j);
  std::vector<bool> db_seen(db_macs.size(), false);
  ApAlignment out;
  for (std::size_t b = 0; b < batch_macs.size(); ++b) {
    auto it = db_index.find(canonical_mac(batch_macs[b]));
    if (it == db_index.end()) {
      out.new_aps.push_back(b);
    } else {
      out.shared.emplace_back(it->second, b);
      db_seen[it->second] = true;
    }
  }
  for (std::size_t j = 0; j < db_macs.size(); ++j)
    if (!db_seen[j]) out.missing_aps.push_back(j);
  return out;
}

inline ApAlignment align(const FingerprintDatabase& db, const SignalBatch& batch) {
  return align(db.macs, batch.macs);
}

/// Batch RSS re-indexed onto `macs` columns; absent columns read as undetected.
inline Matrix project_columns(const Matrix& rss, const std::vector<std::string>& from_macs,
                              const std::vector<std::string>& to_macs) {
  const ApAlignment a = align(to_macs, from_macs);
  Matrix out(rss.rows(), to_macs.size(), kUndetectedDbm);
  for (auto [to_col, from_col] : a.shared)
    for (std::size_t i = 0; i < rss.rows(); ++i) out(i, to_col) = rss(i, from_col);
  return out;
}

/// Bounds of the locations widened by `margin` on every side.
inline SiteBounds bounds_with_margin(const Matrix& locations, double margin) {
  if (locations.rows() == 0) return {};
  SiteBounds b{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
               -std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < locations.rows(); ++i) {
    b.x_min = std::min(b.x_min, locations(i, 0));
    b.y_min = std::min(b.y_min, locations(i, 1));
    b.x_max = std::max(b.x_max, locations(i, 0));
    b.y_max = std::max(b.y_max, locations(i, 1));
  }
  b.x_min -= margin;
  b.y_min -= margin;
  b.x_max += margin;
  b.y_max += margin;
  return b;
}

/// Smallest positive gap between distinct sorted coordinates on either axis.
/// Falls back to 1 m when every location shares both coordinates.
inline double estimate_grid_spacing(const Matrix& locations) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t axis = 0; axis < 2 && locations.cols() == 2; ++axis) {
    std::vector<double> v;
    for (std::size_t i = 0; i < locations.rows(); ++i) v.push_back(locations(i, axis));
    std::sort(v.begin(), v.end());
    for (std::size_t i = 1; i < v.size(); ++i) {
      const double gap = v[i] - v[i - 1];
      if (gap > 1e-9) best = std::min(best, gap);
    }
  }
  return std::isfinite(best) ? best : 1.0;
}

/// Checks every invariant of a database; throws ValidationError on the first breach.
inline void validate(const FingerprintDatabase& db) {
  if (db.locations.rows() != db.rss.rows() || db.locations.cols() != 2) {
    throw ValidationError("database: locations " + db.locations.shape_string() + " vs rss " +
                          db.rss.shape_string());
  }
  if (db.rss.cols() != db.macs.size()) throw ValidationError("database: MAC count mismatch");
  std::unordered_map<std::string, int> seen;
  for (const auto& m : db.macs)
    if (++seen[m] > 1) throw ValidationError("database: duplicate MAC " + m);
  require_rss_range(db.rss, "database");
  for (std::size_t i = 0; i < db.size(); ++i)
    if (!db.bounds.contains(db.locations(i, 0), db.locations(i, 1))) {
      throw ValidationError("database: location of row " + std::to_string(i) +
                            " outside site bounds");
    }
}

inline void validate(const SignalBatch& batch) {
  if (batch.rss.cols() != batch.macs.size()) throw ValidationError("batch: MAC count mismatch");
  std::unordered_map<std::string, int> seen;
  for (const auto& m : batch.macs)
    if (++seen[m] > 1) throw ValidationError("batch: duplicate MAC " + m);
  require_rss_range(batch.rss, "batch");
}

/// Drops the listed columns (by MAC) from the database.
inline FingerprintDatabase drop_columns(const FingerprintDatabase& db,
                                        const std::vector<std::string>& macs) {
  std::vector<std::string> keep;
  for (const auto& m : db.macs)
    if (std::find(macs.begin(), macs.end(), m) == macs.end()) keep.push_back(m);
  FingerprintDatabase out = db;
  out.rss = project_columns(db.rss, db.macs, keep);
  out.macs = keep;
  return out;
}

}  // namespace gufu
