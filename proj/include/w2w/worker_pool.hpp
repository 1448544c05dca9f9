#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace w2w {

/// Runs fn(i) for i in [0, count) on up to `workers` threads. Jobs are
/// claimed from a shared counter, so completion order is unspecified; callers
/// write results into per-index slots. Returns the per-job exceptions.
template <typename Fn>
std::vector<std::exception_ptr> parallel_for(std::size_t count, std::size_t workers, Fn&& fn) {
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto run = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
    if (n == 1) {
        run();
        return errors;
    }
    std::vector<std::thread> threads;
    threads.reserve(n);
    for (std::size_t t = 0; t < n; ++t) threads.emplace_back(run);
    for (auto& t : threads) t.join();
    return errors;
}

}  // namespace w2w
