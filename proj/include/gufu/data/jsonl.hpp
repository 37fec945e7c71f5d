#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gufu/data/database.hpp"
#include "gufu/error.hpp"
#include "gufu/log.hpp"

namespace gufu::jsonl {

namespace detail {

struct RawRecord {
  std::optional<std::array<double, 2>> loc;
  std::vector<std::pair<std::string, double>> rss;
};

struct RawFile {
  std::vector<RawRecord> records;
  std::vector<std::string> macs;  // first-appearance order
};

inline RawFile read_records(const std::filesystem::path& path, bool require_loc) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path.string());
  RawFile out;
  std::unordered_map<std::string, std::size_t> mac_index;
  std::string line;
  std::size_t line_no = 0;
  std::size_t clamped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(path.string() + ": malformed JSON: " + e.what(), line_no);
    }
    if (!j.is_object()) throw ParseError(path.string() + ": record is not an object", line_no);
    RawRecord rec;
    if (j.contains("loc")) {
      const auto& loc = j["loc"];
      if (!loc.is_array() || loc.size() != 2 || !loc[0].is_number() || !loc[1].is_number()) {
        throw ParseError(path.string() + ": \"loc\" must be [x, y]", line_no);
      }
      rec.loc = std::array<double, 2>{loc[0].get<double>(), loc[1].get<double>()};
    } else if (require_loc) {
      throw ParseError(path.string() + ": survey record missing \"loc\"", line_no);
    }
    if (!j.contains("rss") || !j["rss"].is_object()) {
      throw ParseError(path.string() + ": record missing \"rss\" object", line_no);
    }
    for (const auto& [mac_raw, value] : j["rss"].items()) {
      if (!value.is_number()) {
        throw ParseError(path.string() + ": rss value for " + mac_raw + " is not a number",
                         line_no);
      }
      double v = value.get<double>();
      if (v > 0.0 || !std::isfinite(v)) {
        throw ValidationError(path.string() + ": rss " + std::to_string(v) + " dBm for " +
                              mac_raw + " above 0 dBm (line " + std::to_string(line_no) + ")");
      }
      if (v < kUndetectedDbm) {
        v = kUndetectedDbm;
        ++clamped;
      }
      const std::string mac = canonical_mac(mac_raw);
      if (!mac_index.contains(mac)) {
        mac_index.emplace(mac, out.macs.size());
        out.macs.push_back(mac);
      }
      rec.rss.emplace_back(mac, v);
    }
    out.records.push_back(std::move(rec));
  }
  if (clamped > 0) {
    log::warn(path.string() + ": clamped " + std::to_string(clamped) +
              " rss values below -120 dBm");
  }
  return out;
}

inline Matrix to_matrix(const RawFile& raw) {
  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t j = 0; j < raw.macs.size(); ++j) col.emplace(raw.macs[j], j);
  Matrix rss(raw.records.size(), raw.macs.size(), kUndetectedDbm);
  for (std::size_t i = 0; i < raw.records.size(); ++i)
    for (const auto& [mac, v] : raw.records[i].rss) rss(i, col.at(mac)) = v;
  return rss;
}

inline nlohmann::ordered_json rss_object(std::span<const double> row,
                                         const std::vector<std::string>& macs) {
  nlohmann::ordered_json obj = nlohmann::ordered_json::object();
  for (std::size_t j = 0; j < macs.size(); ++j)
    if (row[j] > kUndetectedDbm) obj[macs[j]] = row[j];
  return obj;
}

}  // namespace detail

/// Reads a survey file. Bounds default to the location extent plus one grid spacing.
inline FingerprintDatabase load_survey(const std::filesystem::path& path,
                                       std::optional<SiteBounds> bounds = std::nullopt) {
  auto raw = detail::read_records(path, true);
  FingerprintDatabase db;
  db.rss = detail::to_matrix(raw);
  db.macs = raw.macs;
  db.locations = Matrix(raw.records.size(), 2);
  for (std::size_t i = 0; i < raw.records.size(); ++i) {
    db.locations(i, 0) = (*raw.records[i].loc)[0];
    db.locations(i, 1) = (*raw.records[i].loc)[1];
  }
  db.bounds = bounds ? *bounds
                     : bounds_with_margin(db.locations, estimate_grid_spacing(db.locations));
  validate(db);
  return db;
}

/// Reads a batch file. Any "loc" keys are ignored.
inline SignalBatch load_batch(const std::filesystem::path& path, std::string batch_id = {}) {
  auto raw = detail::read_records(path, false);
  SignalBatch batch;
  batch.rss = detail::to_matrix(raw);
  batch.macs = raw.macs;
  batch.batch_id = batch_id.empty() ? path.stem().string() : std::move(batch_id);
  validate(batch);
  return batch;
}

/// Locations stored in a labeled file (survey or batch ground truth).
inline Matrix load_locations(const std::filesystem::path& path) {
  auto raw = detail::read_records(path, true);
  Matrix loc(raw.records.size(), 2);
  for (std::size_t i = 0; i < raw.records.size(); ++i) {
    loc(i, 0) = (*raw.records[i].loc)[0];
    loc(i, 1) = (*raw.records[i].loc)[1];
  }
  return loc;
}

inline void save_survey(const std::filesystem::path& path, const FingerprintDatabase& db) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (std::size_t i = 0; i < db.size(); ++i) {
    nlohmann::ordered_json rec;
    rec["loc"] = {db.locations(i, 0), db.locations(i, 1)};
    rec["rss"] = detail::rss_object(db.rss.row(i), db.macs);
    out << rec.dump() << '\n';
  }
}

inline void save_batch(const std::filesystem::path& path, const SignalBatch& batch,
                       const Matrix* locations = nullptr) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    nlohmann::ordered_json rec;
    if (locations != nullptr) rec["loc"] = {(*locations)(i, 0), (*locations)(i, 1)};
    rec["rss"] = detail::rss_object(batch.rss.row(i), batch.macs);
    out << rec.dump() << '\n';
  }
}

}  // namespace gufu::jsonl
