#pragma once

#if defined(__SSE2__)
#include <xmmintrin.h>
#endif

namespace dispick::segnet {

/// Scoped flush-to-zero / denormals-are-zero for the calling thread.
/// Near convergence, gradients underflow into subnormals, which x86
/// handles several times slower.  Restores the previous mode on exit.
class FlushDenormals {
 public:
#if defined(__SSE2__)
  FlushDenormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | kFtz | kDaz); }
  ~FlushDenormals() { _mm_setcsr(saved_); }
#else
  FlushDenormals() = default;
#endif
  FlushDenormals(const FlushDenormals&) = delete;
  FlushDenormals& operator=(const FlushDenormals&) = delete;

 private:
#if defined(__SSE2__)
  static constexpr unsigned kFtz = 0x8000;
  static constexpr unsigned kDaz = 0x0040;
  unsigned saved_;
#endif
};

}  // namespace dispick::segnet
