#pragma once

// Labeled synthetic curvesets: perturbed layered models -> modal group
// velocity curves -> amplitude profile -> point-wise jitter -> additive
// noise picks.  Two domains: "sim" (pretraining) and "pseudo_real", a
// deliberately shifted stand-in for field data.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "curve.hpp"
#include "error.hpp"
#include "forward_model.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace dispick {

inline constexpr double kBandMin = 0.2;  // Hz
inline constexpr double kBandMax = 5.0;  // Hz

struct JitterConfig {
  double max_frac = 0.025;          // applied to frequency and velocity
  int n_noise_min = 30;
  int n_noise_max = 120;
  double noise_amp_decay = 0.25;    // mean of the exponential noise amplitudes
  double amp_wobble = 0.0;          // smooth multiplicative wobble on mode amplitudes
  double overtone_separation = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(max_frac >= 0.0 && max_frac < 0.5)) throw ConfigError("jitter max_frac must lie in [0, 0.5)");
    if (n_noise_min < 0 || n_noise_max < n_noise_min) throw ConfigError("invalid noise count range");
    if (!(noise_amp_decay > 0.0)) throw ConfigError("noise_amp_decay must be positive");
    if (!(amp_wobble >= 0.0 && amp_wobble < 1.0)) throw ConfigError("amp_wobble must lie in [0, 1)");
  }
};

enum class Domain { sim, pseudo_real };

inline std::string to_string(Domain d) { return d == Domain::sim ? "sim" : "pseudo_real"; }

inline Domain domain_from_string(const std::string& s) {
  if (s == "sim") return Domain::sim;
  if (s == "pseudo_real") return Domain::pseudo_real;
  throw ConfigError("unknown domain '" + s + "' (expected sim or pseudo_real)");
}

struct DomainSpec {
  VelocityModel base;
  PerturbConfig perturb;
  JitterConfig jitter;
};

/// Sim: the reference model with default jitter.  Pseudo-real: +8% vs
/// everywhere, doubled noise amplitude scale, more noise picks, and
/// amplitude wobble along the mode curves.
inline DomainSpec domain_spec(Domain d) {
  DomainSpec s{reference_model(), {}, {}};
  if (d == Domain::pseudo_real) {
    for (auto& l : s.base.layers) l.vs *= 1.08;
    s.base.halfspace.vs *= 1.08;
    s.jitter.noise_amp_decay *= 2.0;
    s.jitter.n_noise_min = 60;
    s.jitter.n_noise_max = 180;
    s.jitter.amp_wobble = 0.35;
  }
  return s;
}

/// Sampling grid for mode picks: 64 log-spaced frequencies pulled in from
/// the band edges by the jitter margin so jittered picks stay in band.
inline std::vector<double> default_pick_grid(double jitter = 0.025) {
  return log_spaced(kBandMin / (1.0 - jitter), kBandMax / (1.0 + jitter), 64);
}

namespace detail {

inline double edge_taper(double frequency) {
  const double x = (std::log10(frequency) - std::log10(kBandMin)) / (std::log10(kBandMax) - std::log10(kBandMin));
  constexpr double edge = 0.15;
  double w = 1.0;
  if (x < edge) w = 0.5 * (1.0 - std::cos(M_PI * std::max(x, 0.0) / edge));
  if (x > 1.0 - edge) w = 0.5 * (1.0 - std::cos(M_PI * std::max(1.0 - x, 0.0) / edge));
  return 0.3 + 0.7 * w;
}

}  // namespace detail

/// Mode picks before jitter: fundamental at amplitude 1, overtone at 0.6,
/// both tapered toward the band edges.  Overtone samples are kept only
/// where the overtone is at least `overtone_separation` faster than the
/// fundamental at the same frequency.
inline std::vector<PickPoint> mode_picks(const std::vector<DispersionCurve>& curves, double overtone_separation) {
  std::map<double, double> fundamental;
  for (const auto& c : curves)
    if (c.mode == kFundamental)
      for (const auto& s : c.samples) fundamental[s.frequency] = s.group_velocity;
  std::vector<PickPoint> out;
  for (const auto& c : curves) {
    for (const auto& s : c.samples) {
      if (c.mode == kFundamental) {
        out.push_back({s.frequency, s.group_velocity, detail::edge_taper(s.frequency), Label::fundamental});
      } else if (c.mode == kFirstOvertone) {
        auto it = fundamental.find(s.frequency);
        if (it == fundamental.end() || !(s.group_velocity > it->second * (1.0 + overtone_separation))) continue;
        out.push_back({s.frequency, s.group_velocity, 0.6 * detail::edge_taper(s.frequency), Label::overtone});
      }
    }
  }
  return out;
}

inline CurveSet make_synthetic_curveset(const VelocityModel& base, const PerturbConfig& pcfg, const JitterConfig& jcfg,
                                        const std::vector<double>& freq_grid, Rng& rng) {
  pcfg.validate();
  jcfg.validate();
  std::vector<PickPoint> modes;
  for (int attempt = 0; attempt < 8 && modes.empty(); ++attempt) {
    const auto model = perturb_model(base, pcfg, rng);
    modes = mode_picks(compute_dispersion(model, freq_grid, {kFundamental, kFirstOvertone}),
                       jcfg.overtone_separation);
  }
  if (modes.empty()) throw DataError("no dispersion found in band after repeated perturbations");

  if (jcfg.amp_wobble > 0.0) {
    const double phase = uniform(rng, 0.0, 2.0 * M_PI);
    const double cycles = uniform(rng, 1.0, 3.0);
    const double lo = std::log10(kBandMin), span = std::log10(kBandMax) - lo;
    for (auto& p : modes) {
      const double x = (std::log10(p.frequency) - lo) / span;
      p.amplitude = std::clamp(p.amplitude * (1.0 + jcfg.amp_wobble * std::sin(phase + 2.0 * M_PI * cycles * x)),
                               0.05, 1.0);
    }
  }
  if (jcfg.max_frac > 0.0) {
    for (auto& p : modes) {
      p.frequency *= uniform(rng, 1.0 - jcfg.max_frac, 1.0 + jcfg.max_frac);
      p.velocity *= uniform(rng, 1.0 - jcfg.max_frac, 1.0 + jcfg.max_frac);
    }
  }

  CurveSet cs;
  cs.points = modes;
  const int n_noise = std::uniform_int_distribution<int>(jcfg.n_noise_min, jcfg.n_noise_max)(rng);
  if (n_noise > 0) {
    double vmin = modes.front().velocity, vmax = vmin;
    for (const auto& p : modes) {
      vmin = std::min(vmin, p.velocity);
      vmax = std::max(vmax, p.velocity);
    }
    std::exponential_distribution<double> amp(1.0 / jcfg.noise_amp_decay);
    for (int i = 0; i < n_noise; ++i) {
      PickPoint p;
      p.frequency = std::pow(10.0, uniform(rng, std::log10(kBandMin), std::log10(kBandMax)));
      p.velocity = uniform(rng, 0.8 * vmin, 1.2 * vmax);
      p.amplitude = std::clamp(amp(rng), 0.01, 1.0);
      p.label = Label::noise;
      cs.points.push_back(p);
    }
  }
  return cs;
}

// ---------------------------------------------------------------------------
// Datasets on disk: manifest.json + NDJSON chunks of 1000 curvesets.

inline constexpr std::size_t kChunkSize = 1000;

struct Dataset {
  nlohmann::json manifest;
  std::vector<CurveSet> curvesets;

  std::uint64_t hash() const { return fnv1a(manifest.dump()); }
};

/// Station `index` of `n` on a jittered grid inside a 5 x 7 km box.
inline std::array<double, 2> station_position(std::size_t index, std::size_t n, Rng& rng) {
  const auto nx = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n) * 5.0 / 7.0)));
  const std::size_t ny = (n + nx - 1) / nx;
  const double sx = 5.0 / static_cast<double>(nx), sy = 7.0 / static_cast<double>(ny);
  const double x = (static_cast<double>(index % nx) + 0.5 + uniform(rng, -0.3, 0.3)) * sx;
  const double y = (static_cast<double>(index / nx) + 0.5 + uniform(rng, -0.3, 0.3)) * sy;
  return {x, y};
}

inline constexpr std::array<double, 2> kVirtualSource{-3.0, -2.0};  // km, outside the array

inline CurveSet generate_curveset(Domain domain, std::uint64_t seed, std::size_t index, std::size_t n) {
  const auto spec = domain_spec(domain);
  Rng rng = derive_stream(seed, index);
  CurveSet cs = make_synthetic_curveset(spec.base, spec.perturb, spec.jitter, default_pick_grid(spec.jitter.max_frac), rng);
  char id[32];
  std::snprintf(id, sizeof id, "%s-%06zu", domain == Domain::sim ? "sim" : "real", index);
  cs.pair_id = id;
  cs.station_xy = station_position(index, n, rng);
  cs.distance_km = std::hypot(cs.station_xy[0] - kVirtualSource[0], cs.station_xy[1] - kVirtualSource[1]);
  return cs;
}

inline std::string chunk_name(std::size_t chunk) {
  char name[32];
  std::snprintf(name, sizeof name, "curvesets_%05zu.ndjson", chunk);
  return name;
}

/// Writes `n` curvesets of `domain` to `dir`.  Refuses a non-empty
/// directory unless `overwrite`.  Output depends only on (n, domain, seed).
inline nlohmann::json generate_dataset(const std::filesystem::path& dir, std::size_t n, Domain domain,
                                       std::uint64_t seed, bool overwrite = false) {
  namespace fs = std::filesystem;
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!overwrite) throw DataError("output directory " + dir.string() + " is not empty (pass overwrite to replace)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
  nlohmann::json files = nlohmann::json::array();
  std::size_t total_points = 0;
  for (std::size_t chunk = 0; chunk * kChunkSize < n; ++chunk) {
    const std::size_t begin = chunk * kChunkSize, end = std::min(n, begin + kChunkSize);
    std::string text;
    std::size_t points = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto cs = generate_curveset(domain, seed, i, n);
      points += cs.points.size();
      text += to_json(cs).dump();
      text += '\n';
    }
    io::write_text(dir / chunk_name(chunk), text);
    files.push_back({{"name", chunk_name(chunk)}, {"count", end - begin}, {"points", points}});
    total_points += points;
  }
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(model_hash(domain_spec(domain).base)));
  nlohmann::json manifest = {{"format", "dispick-curvesets/1"},
                             {"seed", seed},
                             {"domain", to_string(domain)},
                             {"count", n},
                             {"base_model_hash", hash},
                             {"point_fields", {"frequency_hz", "velocity_km_s", "amplitude", "label"}},
                             {"files", files},
                             {"total_points", total_points}};
  io::write_json(dir / "manifest.json", manifest);
  return manifest;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = io::read_json(dir / "manifest.json");
  std::size_t expected = 0;
  try {
    expected = ds.manifest.at("count").get<std::size_t>();
    for (const auto& f : ds.manifest.at("files")) {
      const auto before = ds.curvesets.size();
      io::for_each_ndjson(dir / f.at("name").get<std::string>(),
                          [&](const nlohmann::json& j) { ds.curvesets.push_back(curveset_from_json(j)); });
      if (ds.curvesets.size() - before != f.at("count").get<std::size_t>())
        throw DataError(f.at("name").get<std::string>() + ": curveset count disagrees with manifest");
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/manifest.json: " + e.what());
  }
  if (ds.curvesets.size() != expected) throw DataError(dir.string() + ": manifest count mismatch");
  return ds;
}

/// K nearest other stations by station_xy distance; ties broken by pair_id.
inline std::map<std::string, std::vector<std::string>> nearest_neighbors(const std::vector<CurveSet>& sets,
                                                                          std::size_t k) {
  if (k < 1) throw ConfigError("K must be >= 1");
  if (k >= sets.size())
    throw ConfigError("K = " + std::to_string(k) + " needs at least " + std::to_string(k + 1) + " curvesets, have " +
                      std::to_string(sets.size()));
  std::map<std::string, std::vector<std::string>> out;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    cand.clear();
    for (std::size_t j = 0; j < sets.size(); ++j) {
      if (j == i) continue;
      const double dx = sets[i].station_xy[0] - sets[j].station_xy[0];
      const double dy = sets[i].station_xy[1] - sets[j].station_xy[1];
      cand.emplace_back(dx * dx + dy * dy, j);
    }
    auto less = [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first < b.first;
      return sets[a.second].pair_id < sets[b.second].pair_id;
    };
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), less);
    auto& ids = out[sets[i].pair_id];
    ids.reserve(k);
    for (std::size_t r = 0; r < k; ++r) ids.push_back(sets[cand[r].second].pair_id);
  }
  return out;
}

}  // namespace dispick
