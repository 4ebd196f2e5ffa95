#pragma once

// Layered elastic earth models and multimodal Rayleigh-wave dispersion.
//
// The secular function is the Dunkin delta-matrix (second-order minors of
// the Thomson-Haskell propagator) carried from the half-space up to the
// free surface.  Hyperbolic terms are factored as exp(p) * (1 +- exp(-2p))/2
// and the running 5-vector is renormalised after every layer, so the
// function stays finite at 5 Hz over kilometre-thick layers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace dispick {

struct Layer {
  double thickness_km = 0.0;  // ignored for the half-space
  double vp = 0.0;            // km/s
  double vs = 0.0;            // km/s
  double rho = 0.0;           // g/cm^3
};

struct VelocityModel {
  std::vector<Layer> layers;  // surface-down
  Layer halfspace;

  void validate() const {
    if (layers.empty()) throw ConfigError("velocity model needs at least one finite layer");
    auto check = [](const Layer& l, bool finite, std::size_t i) {
      std::string where = finite ? "layer " + std::to_string(i) : std::string("half-space");
      if (!(l.vs > 0.0) || !(l.vp > l.vs)) throw ConfigError(where + ": requires vp > vs > 0");
      if (!(l.rho > 0.0)) throw ConfigError(where + ": density must be positive");
      if (finite && !(l.thickness_km > 0.0)) throw ConfigError(where + ": thickness must be positive");
    };
    for (std::size_t i = 0; i < layers.size(); ++i) check(layers[i], true, i);
    check(halfspace, false, 0);
  }

  double min_vs() const {
    double v = halfspace.vs;
    for (const auto& l : layers) v = std::min(v, l.vs);
    return v;
  }
  double max_vs() const {
    double v = halfspace.vs;
    for (const auto& l : layers) v = std::max(v, l.vs);
    return v;
  }
};

/// Four-layer stand-in for the survey-average model (three layers over a
/// half-space). Fundamental group velocities stay within 0.7-1.6 km/s over
/// 0.2-5 Hz; the first overtone appears near 0.35 Hz.
inline VelocityModel reference_model() {
  VelocityModel m;
  m.layers = {{0.40, 1.80, 0.90, 2.0}, {0.60, 2.28, 1.20, 2.2}, {1.00, 2.88, 1.60, 2.4}};
  m.halfspace = {0.0, 3.85, 2.20, 2.6};
  return m;
}

/// A homogeneous medium expressed as one finite layer over an identical
/// half-space (the model type always carries a finite layer).
inline VelocityModel homogeneous_model(double vp, double vs, double rho, double thickness_km = 1.0) {
  VelocityModel m;
  m.layers = {{thickness_km, vp, vs, rho}};
  m.halfspace = {0.0, vp, vs, rho};
  return m;
}

inline nlohmann::json layer_to_json(const Layer& l, bool finite) {
  nlohmann::json j;
  if (finite) j["thickness_km"] = l.thickness_km;
  j["vp_km_s"] = l.vp;
  j["vs_km_s"] = l.vs;
  j["rho_g_cm3"] = l.rho;
  return j;
}

inline nlohmann::json to_json(const VelocityModel& m) {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers) j["layers"].push_back(layer_to_json(l, true));
  j["halfspace"] = layer_to_json(m.halfspace, false);
  return j;
}

inline VelocityModel model_from_json(const nlohmann::json& j) {
  auto read = [](const nlohmann::json& o, bool finite) {
    for (auto it = o.begin(); it != o.end(); ++it) {
      const auto& k = it.key();
      if (k != "vp_km_s" && k != "vs_km_s" && k != "rho_g_cm3" && !(finite && k == "thickness_km"))
        throw ConfigError("velocity model: unknown key '" + k + "'");
    }
    Layer l;
    if (finite) l.thickness_km = o.at("thickness_km").get<double>();
    l.vp = o.at("vp_km_s").get<double>();
    l.vs = o.at("vs_km_s").get<double>();
    l.rho = o.at("rho_g_cm3").get<double>();
    return l;
  };
  VelocityModel m;
  try {
    for (const auto& l : j.at("layers")) m.layers.push_back(read(l, true));
    m.halfspace = read(j.at("halfspace"), false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("velocity model: ") + e.what());
  }
  m.validate();
  return m;
}

inline std::uint64_t model_hash(const VelocityModel& m) { return fnv1a(to_json(m).dump()); }

// ---------------------------------------------------------------------------
// Random perturbation

struct PerturbConfig {
  double max_frac_velocity = 0.10;
  double max_frac_thickness = 0.10;
  std::uint64_t seed = 0;

  void validate() const {
    auto ok = [](double f) { return f >= 0.0 && f < 1.0; };
    if (!ok(max_frac_velocity) || !ok(max_frac_thickness))
      throw ConfigError("perturbation fractions must lie in [0, 1)");
  }
};

/// Scales every vp, vs and thickness by an independent U[1-f, 1+f] factor.
/// Density is left alone. A layer whose draw gives vp <= vs is redrawn.
inline VelocityModel perturb_model(const VelocityModel& model, const PerturbConfig& cfg, Rng& rng) {
  cfg.validate();
  model.validate();
  const double fv = cfg.max_frac_velocity;
  const double fh = cfg.max_frac_thickness;
  auto factor = [&rng](double f) { return f == 0.0 ? 1.0 : uniform(rng, 1.0 - f, 1.0 + f); };
  auto perturb = [&](Layer l, bool finite) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Layer out = l;
      out.vp = l.vp * factor(fv);
      out.vs = l.vs * factor(fv);
      if (finite) out.thickness_km = l.thickness_km * factor(fh);
      if (out.vp > out.vs) return out;
    }
    throw ConfigError("perturbation cannot keep vp > vs for this model");
  };
  VelocityModel out;
  out.layers.reserve(model.layers.size());
  for (const auto& l : model.layers) out.layers.push_back(perturb(l, true));
  out.halfspace = perturb(model.halfspace, false);
  return out;
}

// ---------------------------------------------------------------------------
// Secular function

namespace detail {

struct LayerTerms {
  double a0, cpcq, cpy, cpz, cqw, cqx, xy, xz, wy, wz;
  double exa;  // log of the factored-out exponential growth
};

// Vertical wavenumber |k^2 - (w/v)^2|^(1/2); `evanescent` when c < v.
inline double vertical_wavenumber(double k, double kv, bool& evanescent) {
  evanescent = k > kv;
  return std::sqrt((k + kv) * std::abs(k - kv));
}

inline LayerTerms layer_terms(double k, double omega, const Layer& l) {
  const double h = l.thickness_km;
  bool p_ev = false, s_ev = false;
  const double ra = vertical_wavenumber(k, omega / l.vp, p_ev);
  const double rb = vertical_wavenumber(k, omega / l.vs, s_ev);
  const double p = ra * h;
  const double q = rb * h;

  double cosp, w, x, pex = 0.0;
  if (p_ev) {
    pex = p;
    const double fac = p < 16.0 ? std::exp(-2.0 * p) : 0.0;
    cosp = 0.5 * (1.0 + fac);
    const double sinp = 0.5 * (1.0 - fac);
    w = ra > 1e-12 ? sinp / ra : h;
    x = ra * sinp;
  } else {
    const double sinp = std::sin(p);
    cosp = std::cos(p);
    w = ra > 1e-12 ? sinp / ra : h;
    x = -ra * sinp;
  }

  double cosq, y, z, sex = 0.0;
  if (s_ev) {
    sex = q;
    const double fac = q < 16.0 ? std::exp(-2.0 * q) : 0.0;
    cosq = 0.5 * (1.0 + fac);
    const double sinq = 0.5 * (1.0 - fac);
    y = rb > 1e-12 ? sinq / rb : h;
    z = rb * sinq;
  } else {
    const double sinq = std::sin(q);
    cosq = std::cos(q);
    y = rb > 1e-12 ? sinq / rb : h;
    z = -rb * sinq;
  }

  LayerTerms t;
  t.exa = pex + sex;
  t.a0 = t.exa < 60.0 ? std::exp(-t.exa) : 0.0;
  t.cpcq = cosp * cosq;
  t.cpy = cosp * y;
  t.cpz = cosp * z;
  t.cqw = cosq * w;
  t.cqx = cosq * x;
  t.xy = x * y;
  t.xz = x * z;
  t.wy = w * y;
  t.wz = w * z;
  return t;
}

// Dunkin's 5x5 reduced compound propagator for one layer.
inline void dunkin_matrix(double ca[5][5], double wvno2, double gam, double gammk, double rho,
                          const LayerTerms& t) {
  const double gamm1 = gam - 1.0;
  const double twgm1 = gam + gamm1;
  const double gmgmk = gam * gammk;
  const double gmgm1 = gam * gamm1;
  const double gm1sq = gamm1 * gamm1;
  const double rho2 = rho * rho;
  const double a0pq = t.a0 - t.cpcq;

  ca[0][0] = t.cpcq - 2.0 * gmgm1 * a0pq - gmgmk * t.xz - wvno2 * gm1sq * t.wy;
  ca[0][1] = (wvno2 * t.cpy - t.cqx) / rho;
  ca[0][2] = -(twgm1 * a0pq + gammk * t.xz + wvno2 * gamm1 * t.wy) / rho;
  ca[0][3] = (t.cpz - wvno2 * t.cqw) / rho;
  ca[0][4] = -(2.0 * wvno2 * a0pq + t.xz + wvno2 * wvno2 * t.wy) / rho2;

  ca[1][0] = (gmgmk * t.cpz - gm1sq * t.cqw) * rho;
  ca[1][1] = t.cpcq;
  ca[1][2] = gammk * t.cpz - gamm1 * t.cqw;
  ca[1][3] = -t.wz;
  ca[1][4] = ca[0][3];

  ca[3][0] = (gm1sq * t.cpy - gmgmk * t.cqx) * rho;
  ca[3][1] = -t.xy;
  ca[3][2] = gamm1 * t.cpy - gammk * t.cqx;
  ca[3][3] = ca[1][1];
  ca[3][4] = ca[0][1];

  ca[4][0] = -(2.0 * gmgmk * gm1sq * a0pq + gmgmk * gmgmk * t.xz + gm1sq * gm1sq * t.wy) * rho2;
  ca[4][1] = ca[3][0];
  ca[4][2] = -(gammk * gamm1 * twgm1 * a0pq + gam * gammk * gammk * t.xz + gamm1 * gm1sq * t.wy) * rho;
  ca[4][3] = ca[1][0];
  ca[4][4] = ca[0][0];

  const double tt = -2.0 * wvno2;
  ca[2][0] = tt * ca[4][2];
  ca[2][1] = tt * ca[3][2];
  ca[2][2] = t.a0 + 2.0 * (t.cpcq - ca[0][0]);
  ca[2][3] = tt * ca[1][2];
  ca[2][4] = tt * ca[0][2];
}

}  // namespace detail

/// Rayleigh secular function at (frequency [Hz], phase velocity c [km/s]).
/// Zeros are modal phase velocities.  The value carries an arbitrary
/// positive scale (renormalised per layer) so only its sign and zeros are
/// meaningful; it is continuous in c between roots.
inline double rayleigh_secular(const VelocityModel& model, double frequency, double c) {
  const double omega = std::max(2.0 * M_PI * frequency, 1e-4);
  const double k = omega / c;
  const double wvno2 = k * k;

  const Layer& hs = model.halfspace;
  bool ev = false;
  const double ra = detail::vertical_wavenumber(k, omega / hs.vp, ev);
  const double rb = detail::vertical_wavenumber(k, omega / hs.vs, ev);
  double t = hs.vs / omega;
  double gammk = 2.0 * t * t;
  double gam = gammk * wvno2;
  double gamm1 = gam - 1.0;
  double rho = hs.rho;

  double e[5] = {rho * rho * (gamm1 * gamm1 - gam * gammk * ra * rb), -rho * ra,
                 rho * (gamm1 - gammk * ra * rb), rho * rb, wvno2 - ra * rb};

  double ca[5][5];
  for (auto it = model.layers.rbegin(); it != model.layers.rend(); ++it) {
    const Layer& l = *it;
    t = l.vs / omega;
    gammk = 2.0 * t * t;
    gam = gammk * wvno2;
    const auto terms = detail::layer_terms(k, omega, l);
    detail::dunkin_matrix(ca, wvno2, gam, gammk, l.rho, terms);
    double ee[5];
    double peak = 0.0;
    for (int i = 0; i < 5; ++i) {
      double acc = 0.0;
      for (int j = 0; j < 5; ++j) acc += e[j] * ca[j][i];
      ee[i] = acc;
      peak = std::max(peak, std::abs(acc));
    }
    if (peak < 1e-300) peak = 1.0;
    for (int i = 0; i < 5; ++i) e[i] = ee[i] / peak;
  }
  return e[0];
}

// ---------------------------------------------------------------------------
// Modal roots and group velocity

struct ModeId {
  int index = 0;  // 0 fundamental, 1 first overtone
  friend bool operator==(ModeId, ModeId) = default;
};

inline constexpr ModeId kFundamental{0};
inline constexpr ModeId kFirstOvertone{1};

struct RootSearch {
  double scan_step = 0.005;     // km/s
  double tolerance = 1e-11;     // bisection stops below this bracket width
  double low_fraction = 0.7;    // scan starts at low_fraction * min(vs)
  double high_fraction = 0.999; // and ends at high_fraction * max(vs)
};

namespace detail {

inline double bisect(const VelocityModel& m, double f, double lo, double hi, double slo, double tol) {
  while (hi - lo > tol) {
    const double mid = 0.5 * (lo + hi);
    const double sm = rayleigh_secular(m, f, mid);
    if (sm == 0.0) return mid;
    if ((sm < 0.0) == (slo < 0.0)) {
      lo = mid;
      slo = sm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Up to `n_modes` phase velocities at `frequency`, ascending (index 0 is
/// the fundamental).  Fewer are returned when higher modes are cut off.
inline std::vector<double> find_phase_velocities(const VelocityModel& model, double frequency, int n_modes,
                                                 const RootSearch& rs = {}) {
  if (n_modes < 1) throw ConfigError("n_modes must be >= 1");
  if (!(frequency > 0.0)) throw ConfigError("frequency must be positive");
  std::vector<double> roots;
  const double c_lo = rs.low_fraction * model.min_vs();
  const double c_hi = rs.high_fraction * model.max_vs();
  const auto steps = static_cast<long>(std::ceil((c_hi - c_lo) / rs.scan_step));
  double prev_c = c_lo;
  double prev_s = rayleigh_secular(model, frequency, prev_c);
  for (long i = 1; i <= steps && static_cast<int>(roots.size()) < n_modes; ++i) {
    const double c = std::min(c_lo + static_cast<double>(i) * rs.scan_step, c_hi);
    const double s = rayleigh_secular(model, frequency, c);
    if (s == 0.0) {
      roots.push_back(c);
    } else if ((s < 0.0) != (prev_s < 0.0) && prev_s != 0.0) {
      roots.push_back(detail::bisect(model, frequency, prev_c, c, prev_s, rs.tolerance));
    }
    prev_c = c;
    prev_s = s;
  }
  return roots;
}

/// Refines the root closest to `guess` at `frequency` by widening a local
/// bracket; used for the group-velocity stencil.
inline std::optional<double> refine_root_near(const VelocityModel& model, double frequency, double guess,
                                              const RootSearch& rs = {}) {
  const double c_lo = rs.low_fraction * model.min_vs();
  const double c_hi = rs.high_fraction * model.max_vs();
  for (double half = 2e-4; half <= 0.02; half *= 2.0) {
    const double lo = std::max(c_lo, guess - half);
    const double hi = std::min(c_hi, guess + half);
    const double slo = rayleigh_secular(model, frequency, lo);
    const double shi = rayleigh_secular(model, frequency, hi);
    if ((slo < 0.0) != (shi < 0.0)) return detail::bisect(model, frequency, lo, hi, slo, rs.tolerance);
  }
  return std::nullopt;
}

/// Group velocity U = d(omega)/dk of `mode` by a centred difference with
/// relative frequency step `h`.  Falls back to a one-sided stencil of twice
/// the width when one side of the stencil has lost the mode; nullopt means
/// a curve gap.
inline std::optional<double> group_velocity(const VelocityModel& model, ModeId mode, double frequency,
                                            double h = 1e-4, const RootSearch& rs = {}) {
  const auto roots = find_phase_velocities(model, frequency, mode.index + 1, rs);
  if (static_cast<int>(roots.size()) <= mode.index) return std::nullopt;
  const double c0 = roots[mode.index];
  auto slope = [](double f1, double c1, double f2, double c2) {
    const double w1 = 2.0 * M_PI * f1, w2 = 2.0 * M_PI * f2;
    return (w2 - w1) / (w2 / c2 - w1 / c1);
  };
  const double fm = frequency * (1.0 - h), fp = frequency * (1.0 + h);
  const auto cm = refine_root_near(model, fm, c0, rs);
  const auto cp = refine_root_near(model, fp, c0, rs);
  std::optional<double> u;
  if (cm && cp) {
    u = slope(fm, *cm, fp, *cp);
  } else if (cp) {
    const double f2 = frequency * (1.0 + 2.0 * h);
    if (auto c2 = refine_root_near(model, f2, c0, rs)) u = slope(frequency, c0, f2, *c2);
  } else if (cm) {
    const double f2 = frequency * (1.0 - 2.0 * h);
    if (auto c2 = refine_root_near(model, f2, c0, rs)) u = slope(f2, *c2, frequency, c0);
  }
  if (u && std::isfinite(*u) && *u > 0.0) return u;
  return std::nullopt;
}

struct DispersionSample {
  double frequency;       // Hz
  double phase_velocity;  // km/s
  double group_velocity;  // km/s
};

struct DispersionCurve {
  ModeId mode;
  std::vector<DispersionSample> samples;  // frequency strictly increasing
};

inline std::vector<double> log_spaced(double lo, double hi, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  if (n == 1) {
    out[0] = lo;
    return out;
  }
  const double a = std::log10(lo), b = std::log10(hi);
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = std::pow(10.0, a + (b - a) * i / (n - 1));
  return out;
}

/// One curve per requested mode; frequencies where a mode does not exist
/// (below cut-off, or no stable stencil) are left out of that curve.
inline std::vector<DispersionCurve> compute_dispersion(const VelocityModel& model,
                                                       const std::vector<double>& freq_grid,
                                                       const std::vector<ModeId>& modes, double h = 1e-4,
                                                       const RootSearch& rs = {}) {
  if (freq_grid.empty()) throw ConfigError("frequency grid is empty");
  for (std::size_t i = 0; i < freq_grid.size(); ++i) {
    if (!(freq_grid[i] > 0.0) || (i > 0 && !(freq_grid[i] > freq_grid[i - 1])))
      throw ConfigError("frequency grid must be positive and strictly increasing");
  }
  std::vector<DispersionCurve> curves;
  if (modes.empty()) return curves;
  int max_mode = 0;
  for (auto m : modes) {
    if (m.index < 0) throw ConfigError("mode index must be >= 0");
    max_mode = std::max(max_mode, m.index);
  }
  for (auto m : modes) curves.push_back({m, {}});

  for (double f : freq_grid) {
    const auto roots = find_phase_velocities(model, f, max_mode + 1, rs);
    const double fm = f * (1.0 - h), fp = f * (1.0 + h);
    for (auto& curve : curves) {
      const int idx = curve.mode.index;
      if (static_cast<int>(roots.size()) <= idx) continue;
      const double c0 = roots[static_cast<std::size_t>(idx)];
      const auto cm = refine_root_near(model, fm, c0, rs);
      const auto cp = refine_root_near(model, fp, c0, rs);
      std::optional<double> u;
      if (cm && cp) {
        const double w1 = 2.0 * M_PI * fm, w2 = 2.0 * M_PI * fp;
        u = (w2 - w1) / (w2 / *cp - w1 / *cm);
      } else {
        u = group_velocity(model, curve.mode, f, h, rs);
      }
      if (u && std::isfinite(*u) && *u > 0.0) curve.samples.push_back({f, c0, *u});
    }
  }
  return curves;
}

}  // namespace dispick
