#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace lanekeep {

// Runs fn(i) for i in [0, n) across up to n_threads workers. Callers must
// write results into per-index slots; aggregation stays deterministic because
// nothing is reduced here.
inline void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    if (n_threads <= 1 || n == 1) {
        for (int i = 0; i < n; i++) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    int spawn = std::min(n_threads, n);
    std::vector<std::thread> threads;
    threads.reserve(spawn - 1);
    for (int t = 1; t < spawn; t++) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();
}

// Splits [0, n) into a fixed number of contiguous chunks and runs
// fn(chunk_index, begin, end) for each. The chunk boundaries depend only on
// (n, n_chunks), so per-chunk accumulators reduced in chunk order give results
// independent of the worker count.
inline void parallel_chunks(int n, int n_chunks, int n_threads,
                            const std::function<void(int, int, int)>& fn) {
    if (n <= 0) return;
    n_chunks = std::min(std::max(n_chunks, 1), n);
    parallel_for(n_chunks, n_threads, [&](int c) {
        int begin = static_cast<int>(static_cast<long>(n) * c / n_chunks);
        int end = static_cast<int>(static_cast<long>(n) * (c + 1) / n_chunks);
        fn(c, begin, end);
    });
}

}  // namespace lanekeep
