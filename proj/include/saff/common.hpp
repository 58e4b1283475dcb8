#pragma once

#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace saff {

// Error taxonomy. The CLI maps these onto exit codes: configuration/contract
// problems -> 2, data problems -> 3, anything else -> 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct InputError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct MetricError : Error {
    using Error::Error;
};

// Worker-thread bound: SAFF_THREADS if set, else hardware concurrency.
inline int max_threads() {
    static const int n = [] {
        if (const char* env = std::getenv("SAFF_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw ? static_cast<int>(hw) : 1;
    }();
    return n;
}

// Runs fn(begin, end) over disjoint chunks of [0, n). Each index is handled by
// exactly one worker, so per-element reduction order never depends on the
// thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const std::size_t threads = static_cast<std::size_t>(max_threads());
    if (n == 0) return;
    if (threads <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    const std::size_t workers = std::min(threads, n);
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace saff
