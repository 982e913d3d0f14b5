#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace resflow {

// Runs fn(task) for task in [0, n_tasks) on up to `threads` workers. Tasks
// write to disjoint outputs; callers reduce in task order for determinism.
template <class Fn>
void parallel_for(int n_tasks, int threads, Fn&& fn) {
    const int workers = std::max(1, std::min(threads, n_tasks));
    if (workers == 1) {
        for (int t = 0; t < n_tasks; ++t) fn(t);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (int t = next++; t < n_tasks; t = next++) {
                try {
                    fn(t);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace resflow
