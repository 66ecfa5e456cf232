// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace hetforest {

/// Runs fn(i) for i in [0, jobs) on up to `workers` threads. Jobs are handed
/// out in index order; a throwing job does not stop the others. Returns the
/// per-job error message (empty on success).
template <typename Fn>
std::vector<std::string> run_pool(std::size_t jobs, int workers, Fn&& fn) {
    std::vector<std::string> errors(jobs);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < jobs; i = next.fetch_add(1)) {
            try {
                fn(i);
            } catch (const std::exception& e) {
                errors[i] = e.what();
                if (errors[i].empty()) {
                    errors[i] = "unknown error";
                }
            } catch (...) {
                errors[i] = "unknown error";
            }
        }
    };
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), std::max<std::size_t>(1, jobs));
    if (n == 1) {
        worker();
        return errors;
    }
    std::vector<std::thread> pool;
    pool.reserve(n);
    for (std::size_t w = 0; w < n; ++w) {
        pool.emplace_back(worker);
    }
    for (auto& t : pool) {
        t.join();
    }
    return errors;
}

}  // namespace hetforest
