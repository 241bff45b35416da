#pragma once

#include <cstdint>
#include <functional>

namespace wt {

// Worker threads available to parallel_for. Defaults to WT_THREADS if set,
// otherwise hardware_concurrency.
int max_threads();
void set_max_threads(int n);

// Runs fn(chunk_begin, chunk_end) over [0,n) split into fixed-size chunks.
// Chunk boundaries depend only on (n, grain), never on the worker count, so
// any caller that writes disjoint outputs per index, or combines per-chunk
// partials in chunk order, gets bit-identical results for every thread count.
// Nested calls run inline on the calling thread.
void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace wt
