#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"

namespace dispick {

enum class Label : std::uint8_t { noise = 0, fundamental = 1, overtone = 2 };

inline constexpr int kNumClasses = 3;

inline int to_int(Label l) { return static_cast<int>(l); }

inline Label label_from_int(int v) {
  if (v < 0 || v >= kNumClasses) throw DataError("label out of range: " + std::to_string(v));
  return static_cast<Label>(v);
}

inline const char* label_name(Label l) {
  switch (l) {
    case Label::noise: return "noise";
    case Label::fundamental: return "fundamental";
    case Label::overtone: return "overtone";
  }
  return "?";
}

struct PickPoint {
  double frequency = 0.0;  // Hz
  double velocity = 0.0;   // km/s, group
  double amplitude = 0.0;  // [0, 1]
  Label label = Label::noise;

  friend bool operator==(const PickPoint&, const PickPoint&) = default;
};

/// Labeled point cloud for one station pair.
struct CurveSet {
  std::string pair_id;
  double distance_km = 0.0;
  std::array<double, 2> station_xy{0.0, 0.0};
  std::vector<PickPoint> points;

  friend bool operator==(const CurveSet&, const CurveSet&) = default;
};

inline void validate(const CurveSet& cs) {
  if (cs.points.empty()) throw DataError(cs.pair_id + ": curveset has no points");
  for (std::size_t i = 0; i < cs.points.size(); ++i) {
    const auto& p = cs.points[i];
    if (!(p.frequency > 0.0) || !(p.velocity > 0.0) || !(p.amplitude >= 0.0 && p.amplitude <= 1.0) ||
        !std::isfinite(p.frequency) || !std::isfinite(p.velocity))
      throw DataError(cs.pair_id + ": invalid point " + std::to_string(i));
  }
}

// Points are stored compactly as [frequency, velocity, amplitude, label].
inline nlohmann::json to_json(const CurveSet& cs) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : cs.points) pts.push_back({p.frequency, p.velocity, p.amplitude, to_int(p.label)});
  return {{"pair_id", cs.pair_id},
          {"distance_km", cs.distance_km},
          {"station_xy", {cs.station_xy[0], cs.station_xy[1]}},
          {"points", std::move(pts)}};
}

inline CurveSet curveset_from_json(const nlohmann::json& j) {
  CurveSet cs;
  try {
    cs.pair_id = j.at("pair_id").get<std::string>();
    cs.distance_km = j.at("distance_km").get<double>();
    cs.station_xy = {j.at("station_xy").at(0).get<double>(), j.at("station_xy").at(1).get<double>()};
    for (const auto& p : j.at("points")) {
      cs.points.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>(),
                           label_from_int(p.at(3).get<int>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("curveset: ") + e.what());
  }
  validate(cs);
  return cs;
}

}  // namespace dispick
