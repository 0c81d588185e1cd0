#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace cmidd {

/// Worker cap from CMIDD_THREADS; unset or 0 means hardware concurrency.
inline unsigned thread_count() {
    unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const char* env = std::getenv("CMIDD_THREADS");
    if (!env || !*env) return hw;
    try {
        long v = std::stol(env);
        return v <= 0 ? hw : static_cast<unsigned>(v);
    } catch (...) {
        return hw;
    }
}

/// Runs fn(i) for i in [0, n). Jobs must write only to their own slot; the
/// lowest-index exception is rethrown after all workers join.
template <typename F>
void parallel_for(std::size_t n, F&& fn) {
    unsigned workers = static_cast<unsigned>(std::min<std::size_t>(thread_count(), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace cmidd
