#pragma once

#include <cstddef>
#include <functional>

namespace vqfr {

// Number of worker threads for kernel-internal parallelism. Resolved once:
// VQFR_THREADS env var if set (>=1), else hardware concurrency.
int num_threads();

// Runs fn(i) for i in [0, n) split into contiguous static chunks, one per
// thread. Each index is processed by exactly one thread, so any per-element
// accumulation order is preserved and results do not depend on thread count.
// Small ranges (or grain hints) run inline on the calling thread.
void parallel_for(size_t n, const std::function<void(size_t)>& fn, size_t grain = 1);

// Chunked form: fn(begin, end) per chunk. Lower dispatch overhead for tight loops.
void parallel_for_chunks(size_t n, const std::function<void(size_t, size_t)>& fn,
                         size_t min_items_per_thread = 1);

}  // namespace vqfr
