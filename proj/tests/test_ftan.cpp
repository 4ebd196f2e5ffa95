#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <vector>

#include <dispick/ftan.hpp>

using namespace dispick;

namespace {

std::vector<DispersionCurve> reference_curves(std::vector<ModeId> modes = {kFundamental}) {
  return compute_dispersion(reference_model(), log_spaced(0.2, 5.0, 64), modes);
}

Waveform synth(const std::vector<DispersionCurve>& curves, double dist, std::vector<double> amps, double noise = 0.0,
               std::uint64_t seed = 1) {
  Rng rng(seed);
  return synth_waveform(curves, dist, 0.02, std::max(60.0, dist / 0.3 + 5.0), amps, noise, rng);
}

// Curve with constant group velocity over the band.
DispersionCurve flat_curve(double u) {
  DispersionCurve c{kFundamental, {}};
  for (double f : log_spaced(0.2, 5.0, 64)) c.samples.push_back({f, u, u});
  return c;
}

std::size_t nearest_index(const std::vector<double>& grid, double x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (std::abs(grid[i] - x) < std::abs(grid[best] - x)) best = i;
  return best;
}

}  // namespace

TEST(GaussianResponse, PeakAndWidth) {
  const double w0 = 2 * M_PI * 1.3;
  EXPECT_DOUBLE_EQ(gaussian_response(w0, w0, 25.0), 1.0);
  EXPECT_NEAR(gaussian_response(1.2 * w0, w0, 25.0), std::exp(-1.0), 1e-12);
  EXPECT_NEAR(gaussian_response(1.2 * w0, w0, 25.0), 0.3679, 1e-4);
  for (double d : {0.01, 0.1, 0.3}) EXPECT_DOUBLE_EQ(gaussian_response(w0 * (1 + d), w0, 25.0), gaussian_response(w0 * (1 - d), w0, 25.0));
}

TEST(Envelope, CosineIsFlat) {
  const double dt = 0.01, A = 2.5;
  std::vector<double> s(4000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = A * std::cos(2 * M_PI * 1.7 * i * dt + 0.3);
  const auto env = analytic_envelope(s, dt);
  for (std::size_t i = 800; i < 3200; ++i) EXPECT_NEAR(env[i], A, 0.01 * A) << i;
}

TEST(Envelope, ZeroSignal) {
  const auto env = analytic_envelope(std::vector<double>(256, 0.0), 0.01);
  for (double v : env) EXPECT_EQ(v, 0.0);
}

TEST(Envelope, WindowedCosinePeaksAtCentre) {
  const double dt = 0.01;
  const std::size_t n = 3000, centre = 1234;
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (static_cast<double>(i) - centre) * dt;
    s[i] = std::exp(-t * t / (2 * 0.8 * 0.8)) * std::cos(2 * M_PI * 3.0 * t);
  }
  const auto env = analytic_envelope(s, dt);
  const auto arg = static_cast<std::size_t>(std::max_element(env.begin(), env.end()) - env.begin());
  EXPECT_LE(std::abs(static_cast<long>(arg) - static_cast<long>(centre)), 1);
}

TEST(Envelope, BoundsSignalAndNonNegative) {
  Rng rng(9);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> s(1000);
  for (auto& v : s) v = g(rng);
  const auto env = analytic_envelope(s, 0.01);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_GE(env[i], 0.0);
    EXPECT_GE(env[i], std::abs(s[i]) - 1e-9);
  }
}

TEST(Envelope, TooShortRejected) { EXPECT_THROW(analytic_envelope({1, 2, 3}, 0.1), DataError); }

TEST(GaussianFilter, ZeroPhaseKeepsSymmetry) {
  const double dt = 0.01;
  const std::size_t n = 2001, mid = 1000;
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = (static_cast<double>(i) - mid) * dt;
    s[i] = std::exp(-t * t / 0.02);
  }
  const auto out = gaussian_filter(s, dt, 2.0, 25.0);
  double peak = 0, asym = 0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  for (std::size_t k = 1; k < 800; ++k) asym = std::max(asym, std::abs(out[mid + k] - out[mid - k]));
  EXPECT_LT(asym / peak, 1e-6);
}

TEST(Ftan, ConstantVelocityPacketLandsOnRidge) {
  // 2.5 km/s at 10 km: envelope peaks at t = 4 s.
  const auto w = synth({flat_curve(2.5)}, 10.0, {1.0});
  const auto vel = default_velocity_grid();
  const auto map = ftan(w, FilterConfig{}, vel);
  const double bin = vel[1] - vel[0];
  for (std::size_t fi = 0; fi < map.freq_grid.size(); ++fi) {
    if (map.freq_grid[fi] < 0.5 || map.freq_grid[fi] > 3.0) continue;
    std::size_t best = 0;
    for (std::size_t vi = 1; vi < vel.size(); ++vi)
      if (map.at(fi, vi) > map.at(fi, best)) best = vi;
    EXPECT_LE(std::abs(vel[best] - 2.5), bin) << "f=" << map.freq_grid[fi];
  }
}

TEST(Ftan, NormalisedAndAmplitudeInvariant) {
  auto w = synth(reference_curves(), 8.0, {1.0});
  const auto a = ftan(w, FilterConfig{}, default_velocity_grid());
  EXPECT_EQ(*std::max_element(a.amplitude.begin(), a.amplitude.end()), 1.0);
  for (double v : a.amplitude) EXPECT_GE(v, 0.0);
  for (double scale : {2.0, 1e-3, 7.5}) {
    Waveform s = w;
    for (auto& v : s.samples) v *= scale;
    const auto b = ftan(s, FilterConfig{}, default_velocity_grid());
    for (std::size_t i = 0; i < a.amplitude.size(); ++i) EXPECT_NEAR(a.amplitude[i], b.amplitude[i], 1e-12);
  }
}

TEST(Ftan, RidgesTrackGroupVelocity) {
  const auto m = reference_model();
  for (double dist : {5.0, 10.0, 15.0}) {
    const auto map = ftan(synth(reference_curves(), dist, {1.0}), FilterConfig{}, default_velocity_grid());
    const auto ridges = extract_ridges(map, 1);
    int checked = 0;
    for (const auto& p : ridges) {
      if (p.frequency < 0.5 || p.frequency > 3.0) continue;
      const auto u = group_velocity(m, kFundamental, p.frequency);
      ASSERT_TRUE(u);
      EXPECT_LT(std::abs(p.velocity - *u) / *u, 0.02) << "dist=" << dist << " f=" << p.frequency;
      ++checked;
    }
    EXPECT_GT(checked, 30);
  }
}

// The envelope spans ~1/(0.14 f) s, so locality needs the packet to travel
// a dozen or more cycles: 40 km covers the whole mid-band, 10 km its upper part.
class EnergyLocality : public ::testing::TestWithParam<std::array<double, 3>> {};

TEST_P(EnergyLocality, NinetyPercentWithinTenPercent) {
  const auto [dist, f_lo, f_hi] = GetParam();
  const auto m = reference_model();
  const auto map = ftan(synth(reference_curves(), dist, {1.0}), FilterConfig{}, default_velocity_grid());
  for (std::size_t fi = 0; fi < map.freq_grid.size(); ++fi) {
    const double f = map.freq_grid[fi];
    if (f < f_lo || f > f_hi) continue;
    const double u = *group_velocity(m, kFundamental, f);
    double total = 0, near = 0;
    for (std::size_t vi = 0; vi < map.vel_grid.size(); ++vi) {
      const double e = map.at(fi, vi) * map.at(fi, vi);
      total += e;
      if (std::abs(map.vel_grid[vi] - u) <= 0.1 * u) near += e;
    }
    EXPECT_GE(near / total, 0.9) << "f=" << f;
  }
}

INSTANTIATE_TEST_SUITE_P(FarField, EnergyLocality,
                         ::testing::Values(std::array<double, 3>{40.0, 0.5, 3.0}, std::array<double, 3>{10.0, 1.5, 3.0}));

TEST(Ftan, TwoModesGiveTwoRidges) {
  const auto m = reference_model();
  const auto curves = reference_curves({kFundamental, kFirstOvertone});
  const auto map = ftan(synth(curves, 40.0, {1.0, 1.0}), FilterConfig{}, default_velocity_grid());
  const auto ridges = extract_ridges(map, 2);
  int checked = 0;
  for (double f : map.freq_grid) {
    if (f < 0.5 || f > 2.0) continue;
    const double u0 = *group_velocity(m, kFundamental, f);
    const auto u1 = group_velocity(m, kFirstOvertone, f);
    if (!u1 || *u1 < 1.2 * u0) continue;
    std::vector<double> v;
    for (const auto& p : ridges)
      if (p.frequency == f) v.push_back(p.velocity);
    ASSERT_EQ(v.size(), 2u) << "f=" << f;
    EXPECT_LT(std::abs(v[0] - u0) / u0, 0.03) << "f=" << f;
    EXPECT_LT(std::abs(v[1] - *u1) / *u1, 0.03) << "f=" << f;
    ++checked;
  }
  EXPECT_GT(checked, 15);
}

TEST(Ftan, SilencedOvertoneAbsent) {
  const auto m = reference_model();
  const auto both = reference_curves({kFundamental, kFirstOvertone});
  const auto silenced = ftan(synth(both, 40.0, {1.0, 0.0}), FilterConfig{}, default_velocity_grid());
  const auto alone = ftan(synth({both[0]}, 40.0, {1.0}), FilterConfig{}, default_velocity_grid());
  const auto audible = ftan(synth(both, 40.0, {1.0, 1.0}), FilterConfig{}, default_velocity_grid());
  EXPECT_EQ(silenced.amplitude, alone.amplitude);
  for (std::size_t fi = 0; fi < silenced.freq_grid.size(); ++fi) {
    const double f = silenced.freq_grid[fi];
    if (f < 0.5 || f > 2.0) continue;
    const auto u1 = group_velocity(m, kFirstOvertone, f);
    if (!u1 || *u1 < 1.2 * *group_velocity(m, kFundamental, f)) continue;
    const auto vi = nearest_index(silenced.vel_grid, *u1);
    EXPECT_GT(audible.at(fi, vi), 10 * silenced.at(fi, vi)) << "f=" << f;
  }
}

TEST(Ftan, ShortWaveformNamesWindow) {
  Waveform w{std::vector<double>(500, 0.1), 0.02, 10.0, "AB"};
  try {
    ftan(w, FilterConfig{}, default_velocity_grid());
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("33.3"), std::string::npos) << e.what();
  }
}

TEST(Ftan, BadVelocityGridRejected) {
  const auto w = synth({flat_curve(2.0)}, 5.0, {1.0});
  EXPECT_THROW(ftan(w, FilterConfig{}, {0.05, 1.0}), ConfigError);
  EXPECT_THROW(ftan(w, FilterConfig{}, {1.0, 0.9}), ConfigError);
  EXPECT_THROW(ftan(w, FilterConfig{0.0}, default_velocity_grid()), ConfigError);
}

TEST(Ridges, SingleRidgeOnePointPerFrequency) {
  FtanMap map;
  map.freq_grid = {0.5, 1.0, 2.0};
  map.vel_grid = default_velocity_grid(50, 0.5, 3.0);
  map.amplitude.assign(150, 0.0);
  for (std::size_t fi = 0; fi < 3; ++fi)
    for (std::size_t vi = 0; vi < 50; ++vi) map.at(fi, vi) = std::exp(-std::pow((map.vel_grid[vi] - 1.5) / 0.2, 2));
  const auto r = extract_ridges(map, 3);
  ASSERT_EQ(r.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(r[i].frequency, map.freq_grid[i]);
    EXPECT_NEAR(r[i].velocity, 1.5, 0.01);
    EXPECT_EQ(r[i].label, Label::noise);
  }
}

TEST(Ridges, FlatColumnAtMostOnePeak) {
  FtanMap map;
  map.freq_grid = {1.0, 2.0};
  map.vel_grid = default_velocity_grid(20);
  map.amplitude.assign(40, 0.5);
  for (std::size_t vi = 0; vi < 20; ++vi) map.at(1, vi) = 0.0;
  const auto r = extract_ridges(map, 4);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].velocity, map.vel_grid.front());
}

TEST(Ridges, PlateauLowestVelocityWins) {
  FtanMap map;
  map.freq_grid = {1.0};
  map.vel_grid = default_velocity_grid(10);
  map.amplitude = {0, 0.2, 0.9, 0.9, 0.9, 0.3, 0, 0, 0, 0};
  const auto r = extract_ridges(map, 1);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].velocity, map.vel_grid[2]);
}

TEST(Ridges, KeepsStrongestPeaks) {
  FtanMap map;
  map.freq_grid = {1.0};
  map.vel_grid = default_velocity_grid(12);
  map.amplitude = {0, 0.3, 0, 0.9, 0, 0.5, 0, 1.0, 0, 0.2, 0, 0};
  const auto r = extract_ridges(map, 2);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].velocity, map.vel_grid[3]);
  EXPECT_EQ(r[1].velocity, map.vel_grid[7]);
  EXPECT_THROW(extract_ridges(map, 0), ConfigError);
}

TEST(Synth, SingleFrequencyWaveletArrivesOnTime) {
  DispersionCurve c{kFundamental, {{1.5, 1.2, 1.2}}};
  const auto w = synth({c}, 9.0, {1.0});
  const auto env = analytic_envelope(w.samples, w.dt);
  const auto arg = static_cast<double>(std::max_element(env.begin(), env.end()) - env.begin());
  EXPECT_NEAR(arg * w.dt, 9.0 / 1.2, 0.1);
}

TEST(Synth, NoiseIsSeeded) {
  const auto a = synth(reference_curves(), 5.0, {1.0}, 0.1, 3);
  const auto b = synth(reference_curves(), 5.0, {1.0}, 0.1, 3);
  const auto c = synth(reference_curves(), 5.0, {1.0}, 0.1, 4);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_NE(a.samples, c.samples);
}

TEST(Synth, PreconditionsChecked) {
  Rng rng(1);
  EXPECT_THROW(synth_waveform(reference_curves(), 10.0, 0.02, 20.0, {1.0}, 0, rng), ConfigError);
  EXPECT_THROW(synth_waveform(reference_curves(), 10.0, 0.02, 60.0, {1.0, 1.0}, 0, rng), ConfigError);
}

TEST(WaveformIo, RoundTripAsFloat32) {
  const auto dir = std::filesystem::temp_directory_path() / "dispick_wave_io";
  std::filesystem::create_directories(dir);
  const auto w = synth(reference_curves(), 5.0, {1.0});
  write_waveform(dir / "w", w);
  const auto r = read_waveform(dir / "w");
  EXPECT_EQ(r.dt, w.dt);
  EXPECT_EQ(r.distance_km, w.distance_km);
  EXPECT_EQ(r.pair_id, w.pair_id);
  ASSERT_EQ(r.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < r.samples.size(); ++i) EXPECT_EQ(r.samples[i], static_cast<float>(w.samples[i]));
  std::filesystem::remove_all(dir);
}
