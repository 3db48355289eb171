#pragma once

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace fusion {

/// Keep large activation buffers on the heap instead of fresh mmap pages.
/// Per-step allocations are tens of MB; with the default thresholds every
/// step pays for page faults on memory glibc just returned to the kernel.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
}

}  // namespace fusion
