#pragma once

#include <cstddef>
#include <string>

// Dense double-precision inner kernels used by the tensor ops.
//
// Every kernel exists in a scalar reference version and, where the build
// target supports it, a SIMD version (AVX2+FMA on x86-64, NEON on aarch64).
// The backend is picked once at startup: the environment variable
// LGCAPS_KERNELS=scalar|avx2|neon forces a lane, otherwise the best lane the
// CPU reports is used. SIMD lanes may reorder reductions, so results can
// differ from the scalar lane in the last ulps; the equivalence tests bound
// that difference.

namespace lgcaps::kernels {

struct Backend {
  const char* name;
  // sum_i x[i]*y[i]
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y[i] += a*x[i]
  void (*axpy)(double a, const double* x, double* y, std::size_t n);
  // out[i] = x[i] op y[i]
  void (*add)(const double* x, const double* y, double* out, std::size_t n);
  void (*sub)(const double* x, const double* y, double* out, std::size_t n);
  void (*mul)(const double* x, const double* y, double* out, std::size_t n);
  // x[i] *= a
  void (*scale)(double a, double* x, std::size_t n);
  double (*sum)(const double* x, std::size_t n);
  // max over n > 0 elements
  double (*max)(const double* x, std::size_t n);
};

const Backend& scalar_backend();
// Best SIMD backend compiled in and supported by this CPU, or nullptr.
const Backend* simd_backend();
// The lane selected at startup (honors LGCAPS_KERNELS).
const Backend& active();

inline double dot(const double* x, const double* y, std::size_t n) {
  return active().dot(x, y, n);
}
inline void axpy(double a, const double* x, double* y, std::size_t n) {
  active().axpy(a, x, y, n);
}
inline void add(const double* x, const double* y, double* out, std::size_t n) {
  active().add(x, y, out, n);
}
inline void sub(const double* x, const double* y, double* out, std::size_t n) {
  active().sub(x, y, out, n);
}
inline void mul(const double* x, const double* y, double* out, std::size_t n) {
  active().mul(x, y, out, n);
}
inline void scale(double a, double* x, std::size_t n) { active().scale(a, x, n); }
inline double sum(const double* x, std::size_t n) { return active().sum(x, n); }
inline double max(const double* x, std::size_t n) { return active().max(x, n); }

}  // namespace lgcaps::kernels
