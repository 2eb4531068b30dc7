#pragma once

#include <cstdlib>
#include <string>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dbc::runtime {

/// Keeps large freed blocks on the heap instead of returning them to the OS.
/// Training allocates and frees the same multi-megabyte buffers every step;
/// without this each one is a fresh mmap plus page faults.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

/// Run-level worker count: DBCONF_THREADS if set to a positive integer,
/// otherwise the hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("DBCONF_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n > 0) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

}  // namespace dbc::runtime
