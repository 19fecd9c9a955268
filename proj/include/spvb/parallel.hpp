#ifndef SPVB_PARALLEL_HPP
#define SPVB_PARALLEL_HPP

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace spvb {

inline std::atomic<int>& thread_count_slot() {
    static std::atomic<int> n{0};
    return n;
}

inline void set_threads(int n) { thread_count_slot().store(n < 1 ? 1 : n); }

inline int get_threads() {
    int n = thread_count_slot().load();
    if (n > 0) return n;
    if (const char* env = std::getenv("SPVB_THREADS")) {
        int k = std::atoi(env);
        if (k >= 1) return k;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs fn(chunk_id, begin, end) over [0, n) split into chunks whose layout
// depends only on n, never on the thread count, so per-chunk partial results
// reduced in chunk order give identical answers for any --threads setting.
inline void parallel_chunks(int n, const std::function<void(int, int, int)>& fn,
                            int min_grain = 256) {
    if (n <= 0) return;
    int threads = get_threads();
    int chunk = std::max(min_grain, (n + 63) / 64);
    int n_chunks = (n + chunk - 1) / chunk;
    if (threads <= 1 || n_chunks <= 1) {
        for (int c = 0; c < n_chunks; ++c)
            fn(c, c * chunk, std::min(n, (c + 1) * chunk));
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            int c = next.fetch_add(1);
            if (c >= n_chunks) return;
            fn(c, c * chunk, std::min(n, (c + 1) * chunk));
        }
    };
    std::vector<std::thread> pool;
    int n_workers = std::min(threads, n_chunks);
    pool.reserve(static_cast<std::size_t>(n_workers));
    for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

inline int n_parallel_chunks(int n, int min_grain = 256) {
    if (n <= 0) return 0;
    int chunk = std::max(min_grain, (n + 63) / 64);
    return (n + chunk - 1) / chunk;
}

}  // namespace spvb

#endif
