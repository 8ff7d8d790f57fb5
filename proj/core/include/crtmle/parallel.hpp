#pragma once

#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace crtmle {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n). Each index is claimed by exactly one worker, so
// results written to slot i are race free and independent of the thread
// count; callers must not accumulate across indices inside fn.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    threads = resolve_threads(threads);
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::size_t pool = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> team;
    team.reserve(pool);
    for (std::size_t t = 0; t < pool; ++t) team.emplace_back(worker);
    for (auto& th : team) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace crtmle
