#include "rundet/runtime.hpp"

#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace rundet {

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc's ceiling for this knob
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace rundet

namespace rundet {

const char* version() { return RUNDET_VERSION; }

std::string build_info() {
  std::string s = std::string("rundet ") + RUNDET_VERSION;
#if defined(__clang__)
  s += ", clang " __clang_version__;
#elif defined(__GNUC__)
  s += ", gcc " __VERSION__;
#endif
#ifdef NDEBUG
  s += ", release";
#else
  s += ", debug";
#endif
  return s;
}

}  // namespace rundet
