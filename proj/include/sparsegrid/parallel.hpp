#pragma once

#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace sparsegrid {

/// Runs fn(i) for i in [begin, end) on up to `threads` workers. Each index is
/// processed exactly once and indices must be independent, so results do not
/// depend on the worker count or schedule. threads == 0 means one worker per
/// hardware thread.
template <typename Fn>
void parallel_for(Eigen::Index begin, Eigen::Index end, int threads, Fn&& fn) {
    const Eigen::Index count = end - begin;
    if (count <= 0) return;
    if (threads == 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads <= 1 || count == 1) {
        for (Eigen::Index i = begin; i < end; ++i) fn(i);
        return;
    }
    const int workers = static_cast<int>(std::min<Eigen::Index>(threads, count));
    std::atomic<Eigen::Index> next{begin};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int t = 0; t < workers; ++t) {
        pool.emplace_back([&]() {
            while (!failed.load(std::memory_order_relaxed)) {
                const Eigen::Index i = next.fetch_add(1);
                if (i >= end) break;
                try {
                    fn(i);
                } catch (...) {
                    bool expected = false;
                    if (failed.compare_exchange_strong(expected, true))
                        error = std::current_exception();
                    break;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace sparsegrid
