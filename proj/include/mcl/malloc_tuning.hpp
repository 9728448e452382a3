#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace mcl {

/// Training allocates and frees multi-megabyte tensors every step; glibc would
/// hand each one back to the kernel and fault it in again. Keep them in-process.
inline void tune_malloc_for_training() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace mcl
