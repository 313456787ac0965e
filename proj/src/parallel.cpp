#include "proxmed/parallel.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace proxmed {

int default_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

void parallel_for(int n_tasks, int n_threads, const std::function<void(int)>& fn) {
    if (n_tasks <= 0) return;
    if (n_threads <= 0) n_threads = default_threads();
    if (n_threads > n_tasks) n_threads = n_tasks;

    if (n_threads == 1) {
        for (int i = 0; i < n_tasks; ++i) fn(i);
        return;
    }

    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;

    auto worker = [&]() {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n_tasks) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        }
    };

    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace proxmed
