#pragma once

// Frequency-time analysis: a bank of zero-phase Gaussian filters
// H(w) = exp(-alpha (w - w0)^2 / w0^2), analytic envelopes, and the
// time -> group-velocity remap t = distance / v.

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "curve.hpp"
#include "error.hpp"
#include "fft.hpp"
#include "forward_model.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace dispick {

struct Waveform {
  std::vector<double> samples;
  double dt = 0.0;          // s
  double distance_km = 0.0;
  std::string pair_id;

  double duration() const { return samples.empty() ? 0.0 : dt * static_cast<double>(samples.size() - 1); }

  void validate() const {
    if (!(dt > 0.0)) throw DataError("waveform " + pair_id + ": dt must be positive");
    if (!(distance_km > 0.0)) throw DataError("waveform " + pair_id + ": distance must be positive");
    if (samples.size() < 64) throw DataError("waveform " + pair_id + ": needs at least 64 samples");
  }
};

struct FilterConfig {
  double alpha = 25.0;
  double f_min = 0.2;  // Hz
  double f_max = 5.0;  // Hz
  int n_centers = 64;  // log-spaced

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("filter alpha must be positive");
    if (!(f_min > 0.0) || !(f_max > f_min)) throw ConfigError("filter band must be positive and increasing");
    if (n_centers < 1) throw ConfigError("n_centers must be >= 1");
  }
  std::vector<double> centers() const { return log_spaced(f_min, f_max, n_centers); }
};

/// 128 points linear in [0.3, 4.5] km/s.
inline std::vector<double> default_velocity_grid(int n = 128, double lo = 0.3, double hi = 4.5) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (n - 1);
  return v;
}

inline double gaussian_response(double omega, double omega0, double alpha) {
  const double d = (omega - omega0) / omega0;
  return std::exp(-alpha * d * d);
}

/// Zero-phase narrowband filtering of `signal` around `f0` (real output).
inline std::vector<double> gaussian_filter(const std::vector<double>& signal, double dt, double f0, double alpha) {
  const std::size_t n = signal.size();
  const std::size_t nfft = fft::next_pow2(2 * n);
  auto spec = fft::rfft(signal, nfft);
  const double dw = 2.0 * M_PI / (static_cast<double>(nfft) * dt);
  for (std::size_t k = 0; k < spec.size(); ++k)
    spec[k] *= gaussian_response(dw * static_cast<double>(k), 2.0 * M_PI * f0, alpha);
  auto out = fft::irfft(spec, nfft);
  out.resize(n);
  return out;
}

namespace detail {

// Analytic signal magnitude from a one-sided spectrum; `weight(k)` shapes bin k.
template <class Weight>
void envelope_from_spectrum(const std::vector<fft::cplx>& half, fft::InverseC2C& inv, std::size_t n,
                            Weight&& weight, std::vector<double>& env) {
  auto& buf = inv.buffer();
  std::fill(buf.begin(), buf.end(), fft::cplx{});
  const std::size_t nyq = half.size() - 1;
  buf[0] = half[0] * weight(0);
  for (std::size_t k = 1; k < nyq; ++k) buf[k] = 2.0 * half[k] * weight(k);
  buf[nyq] = half[nyq] * weight(nyq);
  inv.execute();
  env.resize(n);
  for (std::size_t i = 0; i < n; ++i) env[i] = std::abs(buf[i]);
}

}  // namespace detail

/// Magnitude of the analytic signal (negative frequencies zeroed, positive
/// doubled).  Zero-padded to twice the length to keep wrap-around away.
inline std::vector<double> analytic_envelope(const std::vector<double>& signal, double dt) {
  (void)dt;
  if (signal.size() < 4) throw DataError("analytic_envelope: need at least 4 samples");
  const std::size_t nfft = fft::next_pow2(2 * signal.size());
  const auto half = fft::rfft(signal, nfft);
  fft::InverseC2C inv(nfft);
  std::vector<double> env;
  detail::envelope_from_spectrum(half, inv, signal.size(), [](std::size_t) { return 1.0; }, env);
  return env;
}

/// Frequency-velocity energy map, row-major [frequency][velocity].
struct FtanMap {
  std::vector<double> freq_grid;  // Hz, increasing
  std::vector<double> vel_grid;   // km/s, increasing
  std::vector<double> amplitude;  // normalised so the global peak is 1

  double at(std::size_t fi, std::size_t vi) const { return amplitude[fi * vel_grid.size() + vi]; }
  double& at(std::size_t fi, std::size_t vi) { return amplitude[fi * vel_grid.size() + vi]; }
};

inline FtanMap ftan(const Waveform& w, const FilterConfig& cfg, const std::vector<double>& vel_grid) {
  w.validate();
  cfg.validate();
  if (vel_grid.size() < 2) throw ConfigError("velocity grid needs at least two points");
  for (std::size_t i = 0; i < vel_grid.size(); ++i) {
    if (!(vel_grid[i] > 0.1 && vel_grid[i] < 10.0)) throw ConfigError("velocity grid must lie in (0.1, 10) km/s");
    if (i > 0 && !(vel_grid[i] > vel_grid[i - 1])) throw ConfigError("velocity grid must be increasing");
  }
  const double t_needed = w.distance_km / vel_grid.front();
  if (t_needed > w.duration()) {
    throw DataError("waveform " + w.pair_id + " covers 0-" + std::to_string(w.duration()) +
                    " s but velocities down to " + std::to_string(vel_grid.front()) + " km/s at " +
                    std::to_string(w.distance_km) + " km need the window up to " + std::to_string(t_needed) +
                    " s");
  }

  const std::size_t n = w.samples.size();
  const std::size_t nfft = fft::next_pow2(2 * n);
  const auto half = fft::rfft(w.samples, nfft);
  fft::InverseC2C inv(nfft);
  const double dw = 2.0 * M_PI / (static_cast<double>(nfft) * w.dt);

  FtanMap map;
  map.freq_grid = cfg.centers();
  map.vel_grid = vel_grid;
  map.amplitude.assign(map.freq_grid.size() * vel_grid.size(), 0.0);

  std::vector<double> env;
  for (std::size_t fi = 0; fi < map.freq_grid.size(); ++fi) {
    const double w0 = 2.0 * M_PI * map.freq_grid[fi];
    detail::envelope_from_spectrum(
        half, inv, n, [&](std::size_t k) { return gaussian_response(dw * static_cast<double>(k), w0, cfg.alpha); },
        env);
    for (std::size_t vi = 0; vi < vel_grid.size(); ++vi) {
      const double x = w.distance_km / vel_grid[vi] / w.dt;
      const auto i0 = static_cast<std::size_t>(std::floor(x));
      const double frac = x - static_cast<double>(i0);
      const double a = env[i0];
      const double b = i0 + 1 < n ? env[i0 + 1] : env[i0];
      map.at(fi, vi) = a + frac * (b - a);
    }
  }
  const double peak = *std::max_element(map.amplitude.begin(), map.amplitude.end());
  if (!(peak > 0.0)) throw DataError("waveform " + w.pair_id + " has no energy in the analysis band");
  for (auto& a : map.amplitude) a /= peak;
  return map;
}

/// Local maxima along velocity for every frequency column, strongest
/// `max_peaks_per_freq` kept.  Interior peaks get a three-point parabolic
/// velocity refinement.  On a flat maximum the lowest-velocity sample wins;
/// window-edge samples only count when the whole column is one plateau.
inline std::vector<PickPoint> extract_ridges(const FtanMap& map, int max_peaks_per_freq) {
  if (max_peaks_per_freq < 1) throw ConfigError("max_peaks_per_freq must be >= 1");
  std::vector<PickPoint> out;
  const std::size_t nv = map.vel_grid.size();
  for (std::size_t fi = 0; fi < map.freq_grid.size(); ++fi) {
    std::vector<PickPoint> col;
    std::size_t i = 0;
    while (i < nv) {
      std::size_t j = i;
      while (j + 1 < nv && map.at(fi, j + 1) == map.at(fi, i)) ++j;
      const double a = map.at(fi, i);
      if (i == 0 && j == nv - 1) {
        if (a > 0.0) col.push_back({map.freq_grid[fi], map.vel_grid[0], a, Label::noise});
      } else if (i > 0 && j < nv - 1 && a > map.at(fi, i - 1) && a > map.at(fi, j + 1)) {
        double v = map.vel_grid[i];
        if (i == j) {
          const double am = map.at(fi, i - 1), ap = map.at(fi, i + 1);
          const double denom = am - 2.0 * a + ap;
          if (denom < 0.0) {
            const double delta = std::clamp(0.5 * (am - ap) / denom, -0.5, 0.5);
            const double dv = delta < 0.0 ? map.vel_grid[i] - map.vel_grid[i - 1]
                                          : map.vel_grid[i + 1] - map.vel_grid[i];
            v += delta * dv;
          }
        }
        col.push_back({map.freq_grid[fi], v, a, Label::noise});
      }
      i = j + 1;
    }
    std::stable_sort(col.begin(), col.end(), [](const PickPoint& x, const PickPoint& y) { return x.amplitude > y.amplitude; });
    if (col.size() > static_cast<std::size_t>(max_peaks_per_freq)) col.resize(static_cast<std::size_t>(max_peaks_per_freq));
    std::sort(col.begin(), col.end(), [](const PickPoint& x, const PickPoint& y) { return x.velocity < y.velocity; });
    out.insert(out.end(), col.begin(), col.end());
  }
  return out;
}

/// Dispersed synthetic correlation: each curve contributes a spectrum that
/// is a sum of log-frequency Gaussian packets centred on its samples, with
/// phase equal to the integral of the group delay distance/U(f).  Energy at
/// frequency f therefore arrives at t = distance/U(f).  The trace is scaled
/// to unit peak before white noise of rms `noise_rms` is added.
inline Waveform synth_waveform(const std::vector<DispersionCurve>& curves, double distance_km, double dt,
                               double duration, const std::vector<double>& mode_amps, double noise_rms, Rng& rng,
                               std::string pair_id = "synthetic") {
  if (!(dt > 0.0) || !(distance_km > 0.0)) throw ConfigError("synth_waveform: dt and distance must be positive");
  if (!(duration > distance_km / 0.3)) throw ConfigError("synth_waveform: duration must exceed distance / 0.3 km/s");
  if (mode_amps.size() != curves.size()) throw ConfigError("synth_waveform: one amplitude per curve required");
  const auto n = static_cast<std::size_t>(std::llround(duration / dt)) + 1;
  const std::size_t nfft = fft::next_pow2(2 * n);
  const double df = 1.0 / (static_cast<double>(nfft) * dt);
  std::vector<fft::cplx> spec(nfft / 2 + 1);

  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& s = curves[ci].samples;
    if (s.empty() || mode_amps[ci] == 0.0) continue;
    std::vector<double> lf(s.size()), tau(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
      lf[i] = std::log10(s[i].frequency);
      tau[i] = distance_km / s[i].group_velocity;
    }
    double sigma = 0.05;
    if (s.size() > 1) sigma = std::max(0.01, (lf.back() - lf.front()) / static_cast<double>(s.size() - 1));
    auto delay = [&](double x) {
      if (x <= lf.front()) return tau.front();
      if (x >= lf.back()) return tau.back();
      const auto it = std::upper_bound(lf.begin(), lf.end(), x);
      const auto j = static_cast<std::size_t>(it - lf.begin());
      const double r = (x - lf[j - 1]) / (lf[j] - lf[j - 1]);
      return tau[j - 1] + r * (tau[j] - tau[j - 1]);
    };
    double phase = 0.0;
    double prev_tau = delay(std::log10(df));
    std::vector<double> amp(spec.size(), 0.0);
    double amp_peak = 0.0;
    for (std::size_t k = 1; k < spec.size(); ++k) {
      const double x = std::log10(df * static_cast<double>(k));
      double a = 0.0;
      for (double c : lf) a += std::exp(-0.5 * (x - c) * (x - c) / (sigma * sigma));
      amp[k] = a;
      amp_peak = std::max(amp_peak, a);
    }
    for (std::size_t k = 1; k < spec.size(); ++k) {
      const double t = delay(std::log10(df * static_cast<double>(k)));
      phase += 2.0 * M_PI * df * 0.5 * (t + prev_tau);
      prev_tau = t;
      spec[k] += mode_amps[ci] * amp[k] / amp_peak * std::polar(1.0, -phase);
    }
  }
  auto trace = fft::irfft(spec, nfft);
  trace.resize(n);
  double peak = 0.0;
  for (double v : trace) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (auto& v : trace) v /= peak;
  if (noise_rms > 0.0) {
    std::normal_distribution<double> g(0.0, noise_rms);
    for (auto& v : trace) v += g(rng);
  }
  return {std::move(trace), dt, distance_km, std::move(pair_id)};
}

/// Raw little-endian float32 samples at `base`.f32 plus `base`.json sidecar.
inline void write_waveform(const io::fs::path& base, const Waveform& w) {
  io::write_f32(io::fs::path(base).replace_extension(".f32"), w.samples);
  io::write_json(io::fs::path(base).replace_extension(".json"),
                 {{"dt", w.dt}, {"distance_km", w.distance_km}, {"pair_id", w.pair_id}});
}

inline Waveform read_waveform(const io::fs::path& base) {
  const auto meta = io::read_json(io::fs::path(base).replace_extension(".json"));
  Waveform w;
  try {
    w.dt = meta.at("dt").get<double>();
    w.distance_km = meta.at("distance_km").get<double>();
    w.pair_id = meta.at("pair_id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("waveform sidecar: ") + e.what());
  }
  w.samples = io::read_f32(io::fs::path(base).replace_extension(".f32"));
  w.validate();
  return w;
}

/// Greymap with velocity increasing upward and frequency to the right.
inline void write_pgm(const io::fs::path& p, const FtanMap& map) {
  const int rows = static_cast<int>(map.vel_grid.size());
  const int cols = static_cast<int>(map.freq_grid.size());
  std::vector<std::uint8_t> grey(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const double a = map.at(static_cast<std::size_t>(c), static_cast<std::size_t>(rows - 1 - r));
      grey[static_cast<std::size_t>(r * cols + c)] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(a, 0.0, 1.0)));
    }
  io::write_pgm(p, rows, cols, grey);
}

}  // namespace dispick
