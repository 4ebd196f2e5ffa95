#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"

namespace dispick::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, std::string_view text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("short write to " + p.string());
}

inline nlohmann::json read_json(const fs::path& p) {
  try {
    return nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

/// Parses one JSON object per non-empty line; errors name the 1-based line.
template <class Fn>
void for_each_ndjson(const fs::path& p, Fn&& fn) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(p.string() + ":" + std::to_string(lineno) + ": malformed JSON (" + e.what() + ")");
    }
    try {
      fn(j);
    } catch (const Error& e) {
      throw DataError(p.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void write_f32(const fs::path& p, std::span<const double> values) {
  std::vector<float> buf(values.begin(), values.end());
  write_text(p, std::string_view(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float)));
}

inline std::vector<double> read_f32(const fs::path& p) {
  const std::string raw = read_text(p);
  if (raw.size() % sizeof(float) != 0) throw DataError(p.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> buf(raw.size() / sizeof(float));
  std::memcpy(buf.data(), raw.data(), raw.size());
  return {buf.begin(), buf.end()};
}

/// Binary greymap (P5), row 0 written first.
inline void write_pgm(const fs::path& p, int rows, int cols, std::span<const std::uint8_t> grey) {
  if (static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) != grey.size())
    throw DataError("pgm: pixel count does not match dimensions");
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  out.append(reinterpret_cast<const char*>(grey.data()), grey.size());
  write_text(p, out);
}

}  // namespace dispick::io
