#include "lgcaps/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace lgcaps::kernels {

const Backend* avx2_backend();
const Backend* neon_backend();

const Backend* simd_backend() {
  if (const Backend* b = avx2_backend()) return b;
  if (const Backend* b = neon_backend()) return b;
  return nullptr;
}

namespace {

const Backend& pick() {
  if (const char* want = std::getenv("LGCAPS_KERNELS")) {
    if (std::strcmp(want, "scalar") == 0) return scalar_backend();
    if (std::strcmp(want, "avx2") == 0 && avx2_backend()) return *avx2_backend();
    if (std::strcmp(want, "neon") == 0 && neon_backend()) return *neon_backend();
    // Unknown or unsupported request: fall through to autodetect.
  }
  if (const Backend* b = simd_backend()) return *b;
  return scalar_backend();
}

}  // namespace

const Backend& active() {
  static const Backend& chosen = pick();
  return chosen;
}

}  // namespace lgcaps::kernels
