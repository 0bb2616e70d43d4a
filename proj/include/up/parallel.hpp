// Row/chunk parallelism for the per-pixel kernels. Every kernel in this
// codebase is written against parallel_for; with the thread count set to 1
// (deterministic mode) the loops degrade to the plain serial reference.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace up {

// Global worker count for data-parallel kernels. 0 = use OpenMP default.
void set_thread_count(int n);
int thread_count();

// True when compiled with OpenMP and more than one worker is requested.
bool parallel_enabled();

// Runs body(i) for i in [0, n). Iterations must be independent.
template <typename Body>
void parallel_for(std::int64_t n, const Body& body) {
#if defined(_OPENMP)
    if (parallel_enabled() && n > 1) {
        const int nt = thread_count();
#pragma omp parallel for schedule(static) num_threads(nt)
        for (std::int64_t i = 0; i < n; ++i) body(i);
        return;
    }
#endif
    for (std::int64_t i = 0; i < n; ++i) body(i);
}

// Splits [0, n) into one contiguous chunk per worker and runs
// body(worker, begin, end). Used by kernels that accumulate into
// per-worker buffers which the caller reduces in worker order, so the
// result does not depend on scheduling.
template <typename Body>
void parallel_chunks(std::int64_t n, int workers, const Body& body) {
    workers = std::max(1, workers);
    if (workers == 1 || n <= 1) {
        body(0, std::int64_t{0}, n);
        return;
    }
    const std::int64_t chunk = (n + workers - 1) / workers;
#if defined(_OPENMP)
#pragma omp parallel for schedule(static, 1) num_threads(workers)
#endif
    for (int w = 0; w < workers; ++w) {
        const std::int64_t b = std::min<std::int64_t>(n, w * chunk);
        const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
        if (b < e) body(w, b, e);
    }
}

// Worker count parallel_chunks will actually use for n items.
int chunk_workers(std::int64_t n);

}  // namespace up
