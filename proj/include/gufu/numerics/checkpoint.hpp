#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gufu/error.hpp"
#include "gufu/numerics/matrix.hpp"
#include "gufu/numerics/params.hpp"

namespace gufu {

/// Ordered name -> matrix pairs, the unit of persistence for all model parts.
using NamedMatrices = std::vector<std::pair<std::string, Matrix>>;

inline void append_params(NamedMatrices& out, const ParamSet& params) {
  for (const auto& e : params.entries()) out.emplace_back(e.name, e.value);
}

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t x) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((x >> (8 * i)) & 0xffULL) << (8 * (7 - i));
    return r;
  } else {
    return x;
  }
}

}  // namespace detail

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (little-endian float64 payload).
inline void save_checkpoint(const std::filesystem::path& stem, const NamedMatrices& entries) {
  const auto manifest_path = std::filesystem::path(stem.string() + ".json");
  const auto payload_path = std::filesystem::path(stem.string() + ".bin");

  nlohmann::ordered_json manifest;
  manifest["format"] = "gufu-checkpoint";
  manifest["version"] = 1;
  manifest["payload"] = payload_path.filename().string();
  manifest["entries"] = nlohmann::ordered_json::array();

  std::ofstream payload(payload_path, std::ios::binary | std::ios::trunc);
  if (!payload) throw Error("cannot write checkpoint payload " + payload_path.string());
  std::uint64_t offset = 0;
  for (const auto& [name, m] : entries) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = {m.rows(), m.cols()};
    e["offset"] = offset;
    manifest["entries"].push_back(std::move(e));
    for (double v : m.values()) {
      std::uint64_t bits = detail::to_little_endian(std::bit_cast<std::uint64_t>(v));
      payload.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
    offset += m.size() * sizeof(double);
  }
  if (!payload) throw Error("short write to " + payload_path.string());

  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw Error("cannot write checkpoint manifest " + manifest_path.string());
  mf << manifest.dump(2) << '\n';
}

inline NamedMatrices load_checkpoint(const std::filesystem::path& stem) {
  const auto manifest_path = std::filesystem::path(stem.string() + ".json");
  std::ifstream mf(manifest_path);
  if (!mf) throw ValidationError("missing checkpoint manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("bad checkpoint manifest " + manifest_path.string() + ": " + e.what());
  }
  const auto payload_path =
      manifest_path.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream payload(payload_path, std::ios::binary);
  if (!payload) throw ValidationError("missing checkpoint payload " + payload_path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(payload)),
                          std::istreambuf_iterator<char>());

  NamedMatrices out;
  for (const auto& e : manifest.at("entries")) {
    const auto rows = e.at("shape").at(0).get<std::size_t>();
    const auto cols = e.at("shape").at(1).get<std::size_t>();
    const auto offset = e.at("offset").get<std::uint64_t>();
    if (offset + rows * cols * sizeof(double) > bytes.size()) {
      throw ValidationError("checkpoint entry " + e.at("name").get<std::string>() +
                            " runs past end of payload");
    }
    std::vector<double> values(rows * cols);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, bytes.data() + offset + i * sizeof bits, sizeof bits);
      values[i] = std::bit_cast<double>(detail::to_little_endian(bits));
    }
    out.emplace_back(e.at("name").get<std::string>(), Matrix(rows, cols, std::move(values)));
  }
  return out;
}

/// Copies every entry named in `params` out of `loaded`; all must be present.
inline void restore_params(ParamSet& params, const NamedMatrices& loaded) {
  for (auto& e : params.entries()) {
    bool found = false;
    for (const auto& [name, m] : loaded) {
      if (name != e.name) continue;
      params.set(e.name, m);
      found = true;
      break;
    }
    if (!found) throw ValidationError("checkpoint lacks entry " + e.name);
  }
}

/// All entries whose name starts with `prefix`, in stored order.
inline NamedMatrices select_prefix(const NamedMatrices& all, const std::string& prefix) {
  NamedMatrices out;
  for (const auto& [name, m] : all)
    if (name.rfind(prefix, 0) == 0) out.emplace_back(name, m);
  return out;
}

}  // namespace gufu
