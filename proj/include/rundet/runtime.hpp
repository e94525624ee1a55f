#pragma once

#include <string>

namespace rundet {

/// Keeps large tensor buffers on the heap instead of fresh mmaps so that
/// each training step does not page-fault its working set back in. No-op
/// outside glibc. Call once at program start.
void tune_allocator();

const char* version();
/// One-line build description for provenance files.
std::string build_info();

}  // namespace rundet
