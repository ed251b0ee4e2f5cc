// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace esmerge {

/// Worker cap: ESMERGE_THREADS when set (clamped to >= 1), otherwise the
/// hardware count.
inline int worker_count() {
    if (const char * env = std::getenv("ESMERGE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1)
            return n;
        return 1;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs body(i) for i in [0, n). Results must go to disjoint, preallocated
/// slots; reductions over the slots stay sequential in index order, so output
/// never depends on the worker count.
inline void parallel_for(int n, const std::function<void(int)> & body) {
    const int workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (int i = 0; i < n; ++i)
            body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += workers)
                body(i);
        });
    }
    for (auto & t : pool)
        t.join();
}

} // namespace esmerge
