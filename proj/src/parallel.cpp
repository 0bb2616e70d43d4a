#include "up/parallel.hpp"

#include <atomic>

namespace up {

namespace {
std::atomic<int> g_threads{0};  // 0 = OpenMP default
}

void set_thread_count(int n) { g_threads.store(n < 0 ? 0 : n); }

int thread_count() {
    int n = g_threads.load();
#if defined(_OPENMP)
    if (n == 0) n = omp_get_max_threads();
#else
    if (n == 0) n = 1;
#endif
    return n;
}

bool parallel_enabled() {
#if defined(_OPENMP)
    return thread_count() > 1;
#else
    return false;
#endif
}

int chunk_workers(std::int64_t n) {
    if (!parallel_enabled()) return 1;
    return static_cast<int>(std::min<std::int64_t>(thread_count(), std::max<std::int64_t>(1, n)));
}

}  // namespace up
