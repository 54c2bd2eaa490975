// Copyright 2026 The ComPT Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace compt {

/// The autodiff graph allocates and frees many mid-sized buffers per step.
/// With glibc's default thresholds those go through mmap/munmap and the
/// kernel time dominates, so raise both thresholds once at startup.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace compt
