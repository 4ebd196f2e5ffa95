#pragma once

// CurveSet <-> 64x64 image/mask.  Velocity is detrended against an
// amplitude-weighted line in log10(frequency); the frequency axis is the
// fixed log band [0.2, 5] Hz and the residual-velocity axis is symmetric,
// scaled per curveset.  Row index grows with residual velocity, column
// index with frequency.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "curve.hpp"
#include "datagen.hpp"
#include "error.hpp"
#include "io.hpp"

namespace dispick {

inline constexpr int kImageSize = 64;
inline constexpr int kPixels = kImageSize * kImageSize;

struct Trend {
  double intercept = 0.0;  // km/s
  double slope = 0.0;      // km/s per decade
  double at(double frequency) const { return intercept + slope * std::log10(frequency); }
};

struct RasterMeta {
  Trend trend;
  double logf_min = std::log10(kBandMin);
  double logf_max = std::log10(kBandMax);
  double vel_min = -1.0;  // residual km/s
  double vel_max = 1.0;

  double col_width() const { return (logf_max - logf_min) / kImageSize; }
  double row_height() const { return (vel_max - vel_min) / kImageSize; }
  int col_of(double frequency) const { return bin(std::log10(frequency), logf_min, logf_max); }
  int row_of(double residual) const { return bin(residual, vel_min, vel_max); }
  double col_center_frequency(int col) const { return std::pow(10.0, logf_min + (col + 0.5) * col_width()); }
  double row_center_residual(int row) const { return vel_min + (row + 0.5) * row_height(); }

  static int bin(double x, double lo, double hi) {
    const int i = static_cast<int>(std::floor((x - lo) / (hi - lo) * kImageSize));
    return i == kImageSize && x <= hi ? kImageSize - 1 : i;
  }
};

inline nlohmann::json to_json(const RasterMeta& m) {
  return {{"trend_intercept", m.trend.intercept}, {"trend_slope", m.trend.slope},
          {"logf_range", {m.logf_min, m.logf_max}}, {"vel_range", {m.vel_min, m.vel_max}}};
}

inline RasterMeta raster_meta_from_json(const nlohmann::json& j) {
  RasterMeta m;
  try {
    m.trend = {j.at("trend_intercept").get<double>(), j.at("trend_slope").get<double>()};
    m.logf_min = j.at("logf_range").at(0).get<double>();
    m.logf_max = j.at("logf_range").at(1).get<double>();
    m.vel_min = j.at("vel_range").at(0).get<double>();
    m.vel_max = j.at("vel_range").at(1).get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("raster meta: ") + e.what());
  }
  if (!(m.logf_max > m.logf_min) || !(m.vel_max > m.vel_min)) throw DataError("raster meta: degenerate ranges");
  return m;
}

template <class T>
struct Grid64 {
  std::array<T, kPixels> v{};
  T& operator()(int row, int col) { return v[static_cast<std::size_t>(row * kImageSize + col)]; }
  T operator()(int row, int col) const { return v[static_cast<std::size_t>(row * kImageSize + col)]; }
  friend bool operator==(const Grid64&, const Grid64&) = default;
};

struct CurveImage {
  Grid64<std::uint8_t> pixels;
  RasterMeta meta;
};

struct LabelMask {
  Grid64<std::uint8_t> classes;  // 0 noise, 1 fundamental, 2 overtone
  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// Amplitude-weighted least squares v = a + b log10 f over all points
/// (uniform weights if every amplitude is zero).  Residuals replace the
/// velocities.  With a single distinct frequency the slope is zero.
inline std::pair<std::vector<PickPoint>, Trend> detrend(const std::vector<PickPoint>& points) {
  if (points.size() < 2) throw DataError("detrend needs at least two points");
  double wsum = 0.0;
  for (const auto& p : points) wsum += p.amplitude;
  const bool uniform_w = !(wsum > 0.0);
  double sw = 0, sx = 0, sy = 0;
  for (const auto& p : points) {
    const double w = uniform_w ? 1.0 : p.amplitude;
    sw += w;
    sx += w * std::log10(p.frequency);
    sy += w * p.velocity;
  }
  const double mx = sx / sw, my = sy / sw;
  double sxx = 0, sxy = 0;
  for (const auto& p : points) {
    const double w = uniform_w ? 1.0 : p.amplitude;
    const double dx = std::log10(p.frequency) - mx;
    sxx += w * dx * dx;
    sxy += w * dx * (p.velocity - my);
  }
  Trend t;
  if (sxx > 1e-14 * sw) {
    t.slope = sxy / sxx;
    t.intercept = my - t.slope * mx;
  } else {
    t.slope = 0.0;
    t.intercept = my;
  }
  std::vector<PickPoint> out = points;
  for (auto& p : out) p.velocity -= t.at(p.frequency);
  return {std::move(out), t};
}

/// Lowest residual half-width; keeps single-point and exactly-linear sets rasterizable.
inline constexpr double kMinResidualHalfWidth = 1e-3;

struct Raster {
  CurveImage image;
  LabelMask mask;
  RasterMeta meta;
};

namespace detail {
inline int class_priority(int c) { return c == 1 ? 3 : c == 2 ? 2 : 1; }
}  // namespace detail

/// Bins a curveset into a 64x64 image (grey = round(255 * max amplitude))
/// and mask (fundamental > overtone > noise on collisions).
inline Raster rasterize(const CurveSet& cs) {
  if (cs.points.empty()) throw DataError(cs.pair_id + ": cannot rasterize an empty curveset");
  RasterMeta meta;
  std::vector<PickPoint> resid;
  if (cs.points.size() == 1) {
    resid = cs.points;
    meta.trend = {cs.points[0].velocity, 0.0};
    resid[0].velocity = 0.0;
  } else {
    bool all_same = true;
    for (const auto& p : cs.points)
      all_same = all_same && p.frequency == cs.points[0].frequency && p.velocity == cs.points[0].velocity;
    if (all_same) throw DataError(cs.pair_id + ": degenerate raster window (all points identical)");
    std::tie(resid, meta.trend) = detrend(cs.points);
  }
  double r = 0.0;
  for (const auto& p : resid) r = std::max(r, std::abs(p.velocity));
  r = std::max(1.05 * r, kMinResidualHalfWidth);
  meta.vel_min = -r;
  meta.vel_max = r;

  Raster out{{{}, meta}, {}, meta};
  Grid64<double> amp;
  for (std::size_t i = 0; i < resid.size(); ++i) {
    const auto& p = resid[i];
    const int col = meta.col_of(p.frequency);
    const int row = meta.row_of(p.velocity);
    if (col < 0 || col >= kImageSize || row < 0 || row >= kImageSize)
      throw DataError(cs.pair_id + ": point " + std::to_string(i) + " lies outside the raster window");
    amp(row, col) = std::max(amp(row, col), p.amplitude);
    auto& cls = out.mask.classes(row, col);
    if (detail::class_priority(to_int(p.label)) > detail::class_priority(cls)) cls = static_cast<std::uint8_t>(to_int(p.label));
  }
  for (int i = 0; i < kPixels; ++i)
    out.image.pixels.v[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(amp.v[static_cast<std::size_t>(i)], 0.0, 1.0)));
  return out;
}

/// Every point of `cs` takes the class of the pixel it falls in.
inline std::vector<PickPoint> mask_to_points(const LabelMask& mask, const RasterMeta& meta, const CurveSet& cs) {
  std::vector<PickPoint> out = cs.points;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& p = out[i];
    const int col = meta.col_of(p.frequency);
    const int row = meta.row_of(p.velocity - meta.trend.at(p.frequency));
    if (col < 0 || col >= kImageSize || row < 0 || row >= kImageSize)
      throw DataError(cs.pair_id + ": point " + std::to_string(i) + " outside raster window (meta mismatch)");
    p.label = label_from_int(mask.classes(row, col));
  }
  return out;
}

/// Mode-class pixels as picks at their pixel centres in physical units.
/// Amplitude is the pixel's grey level / 255.
inline std::vector<PickPoint> pixel_picks(const LabelMask& mask, const CurveImage& image) {
  std::vector<PickPoint> out;
  const auto& meta = image.meta;
  for (int col = 0; col < kImageSize; ++col)
    for (int row = 0; row < kImageSize; ++row) {
      const int c = mask.classes(row, col);
      if (c == 0) continue;
      const double f = meta.col_center_frequency(col);
      out.push_back({f, meta.row_center_residual(row) + meta.trend.at(f), image.pixels(row, col) / 255.0,
                     label_from_int(c)});
    }
  return out;
}

/// Row 0 of the greymap is the highest residual velocity.
inline void write_pgm(const std::filesystem::path& p, const CurveImage& img) {
  std::vector<std::uint8_t> grey(kPixels);
  for (int r = 0; r < kImageSize; ++r)
    for (int c = 0; c < kImageSize; ++c) grey[static_cast<std::size_t>(r * kImageSize + c)] = img.pixels(kImageSize - 1 - r, c);
  io::write_pgm(p, kImageSize, kImageSize, grey);
}

// ---------------------------------------------------------------------------
// Record file: per curveset 4096 grey bytes + 4096 class bytes + meta JSON,
// concatenated in dataset order; `records.idx.json` holds offsets.

struct ImageRecord {
  std::string pair_id;
  CurveImage image;
  LabelMask mask;
};

inline void write_records(const std::filesystem::path& dir, const std::vector<ImageRecord>& recs) {
  std::filesystem::create_directories(dir);
  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& r : recs) {
    const std::string meta = to_json(r.image.meta).dump();
    index.push_back({{"pair_id", r.pair_id}, {"offset", blob.size()}, {"meta_bytes", meta.size()}});
    blob.append(reinterpret_cast<const char*>(r.image.pixels.v.data()), kPixels);
    blob.append(reinterpret_cast<const char*>(r.mask.classes.v.data()), kPixels);
    blob += meta;
  }
  io::write_text(dir / "records.bin", blob);
  io::write_json(dir / "records.idx.json", {{"format", "dispick-raster/1"}, {"count", recs.size()}, {"records", index}});
}

inline std::vector<ImageRecord> read_records(const std::filesystem::path& dir) {
  const std::string blob = io::read_text(dir / "records.bin");
  const auto idx = io::read_json(dir / "records.idx.json");
  std::vector<ImageRecord> out;
  try {
    for (const auto& e : idx.at("records")) {
      const auto off = e.at("offset").get<std::size_t>();
      const auto mb = e.at("meta_bytes").get<std::size_t>();
      if (off + 2 * kPixels + mb > blob.size()) throw DataError("records.bin truncated");
      ImageRecord r;
      r.pair_id = e.at("pair_id").get<std::string>();
      std::memcpy(r.image.pixels.v.data(), blob.data() + off, kPixels);
      std::memcpy(r.mask.classes.v.data(), blob.data() + off + kPixels, kPixels);
      for (auto c : r.mask.classes.v)
        if (c > 2) throw DataError(r.pair_id + ": mask holds class " + std::to_string(c));
      r.image.meta = raster_meta_from_json(nlohmann::json::parse(blob.substr(off + 2 * kPixels, mb)));
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + ": bad record index (" + e.what() + ")");
  }
  return out;
}

inline std::vector<ImageRecord> rasterize_all(const std::vector<CurveSet>& sets) {
  std::vector<ImageRecord> out;
  out.reserve(sets.size());
  for (const auto& cs : sets) {
    auto r = rasterize(cs);
    out.push_back({cs.pair_id, r.image, r.mask});
  }
  return out;
}

}  // namespace dispick
