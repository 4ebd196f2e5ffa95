#pragma once

// Thin RAII layer over FFTW's 1-D transforms.  Plans are created with
// FFTW_ESTIMATE (deterministic, no timing) under a process-wide mutex
// because the FFTW planner is not thread-safe.

#include <fftw3.h>

#include <algorithm>
#include <complex>
#include <memory>
#include <cstddef>
#include <mutex>
#include <span>
#include <vector>

namespace dispick::fft {

using cplx = std::complex<double>;

inline std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class Plan {
 public:
  explicit Plan(fftw_plan p) : plan_(p) {}
  Plan(const Plan&) = delete;
  Plan& operator=(const Plan&) = delete;
  ~Plan() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan_);
  }
  void execute() const { fftw_execute(plan_); }

 private:
  fftw_plan plan_;
};

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// Real-to-complex forward transform of `x` zero-padded to `n`; returns the
/// n/2+1 non-negative frequency bins.
inline std::vector<cplx> rfft(std::span<const double> x, std::size_t n) {
  std::vector<double> in(n, 0.0);
  std::copy_n(x.begin(), std::min(x.size(), n), in.begin());
  std::vector<cplx> out(n / 2 + 1);
  auto* o = reinterpret_cast<fftw_complex*>(out.data());
  std::unique_ptr<Plan> plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = std::make_unique<Plan>(fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(), o, FFTW_ESTIMATE));
  }
  plan->execute();
  return out;
}

/// Complex-to-real inverse of a half spectrum (n/2+1 bins), scaled by 1/n.
inline std::vector<double> irfft(std::span<const cplx> half, std::size_t n) {
  std::vector<cplx> in(half.begin(), half.end());
  in.resize(n / 2 + 1);
  std::vector<double> out(n);
  auto* i = reinterpret_cast<fftw_complex*>(in.data());
  std::unique_ptr<Plan> plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = std::make_unique<Plan>(fftw_plan_dft_c2r_1d(static_cast<int>(n), i, out.data(), FFTW_ESTIMATE));
  }
  plan->execute();
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

/// Reusable complex inverse transform of length n (scaled by 1/n).
class InverseC2C {
 public:
  explicit InverseC2C(std::size_t n) : n_(n), buf_(n) {
    auto* b = reinterpret_cast<fftw_complex*>(buf_.data());
    std::lock_guard lock(planner_mutex());
    plan_ = std::make_unique<Plan>(fftw_plan_dft_1d(static_cast<int>(n), b, b, FFTW_BACKWARD, FFTW_ESTIMATE));
  }
  std::vector<cplx>& buffer() { return buf_; }
  void execute() {
    plan_->execute();
    const double s = 1.0 / static_cast<double>(n_);
    for (auto& v : buf_) v *= s;
  }

 private:
  std::size_t n_;
  std::vector<cplx> buf_;
  std::unique_ptr<Plan> plan_;
};

}  // namespace dispick::fft
