// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures for the unit tests: scratch directories, hand-rolled
// random generators and a table-driven causal language model.

#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "hetforest/ensemble.hpp"
#include "hetforest/rng.hpp"

namespace hetforest::testing {

class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("hetforest-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    ScratchDir(const ScratchDir&) = delete;
    ScratchDir& operator=(const ScratchDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out << bytes;
}

inline int random_int(Rng& rng, int lo, int hi) {
    return lo + static_cast<int>(uniform_below(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

inline double random_real(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Random distribution over n outcomes; spread controls how peaked it is.
inline std::vector<double> random_distribution(Rng& rng, std::size_t n, double spread = 2.0) {
    std::vector<double> w(n);
    double z = 0.0;
    for (auto& x : w) {
        x = std::exp(spread * standard_normal(rng));
        z += x;
    }
    for (auto& x : w) {
        x /= z;
    }
    return w;
}

inline std::vector<Token> random_tokens(Rng& rng, std::size_t n, int vocab) {
    std::vector<Token> t(n);
    for (auto& x : t) {
        x = static_cast<Token>(uniform_below(rng, static_cast<std::uint64_t>(vocab)));
    }
    return t;
}

/// Bigram model: p(x_t | x_{t-1}) from a table, with a separate row for the
/// first position. Stores probabilities so tests can evaluate it in linear space.
class TableModel final : public LanguageModel {
public:
    TableModel(std::size_t vocab, std::vector<double> first, std::vector<std::vector<double>> rows)
        : vocab_(vocab), first_(std::move(first)), rows_(std::move(rows)) {}

    static TableModel random(Rng& rng, std::size_t vocab, double spread = 2.0) {
        auto first = random_distribution(rng, vocab, spread);
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < vocab; ++i) {
            rows.push_back(random_distribution(rng, vocab, spread));
        }
        return TableModel(vocab, std::move(first), std::move(rows));
    }

    std::size_t vocab_size() const override { return vocab_; }

    /// Linear-space p(x_t = token | history).
    double prob(std::span<const Token> history, Token token) const {
        const auto& row = history.empty() ? first_ : rows_.at(static_cast<std::size_t>(history.back()));
        return row.at(static_cast<std::size_t>(token));
    }

    std::vector<double> predictive_logprobs(std::span<const Token> tokens) const override {
        std::vector<double> out(tokens.size() * vocab_);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            const auto& row = t == 0 ? first_ : rows_.at(static_cast<std::size_t>(tokens[t - 1]));
            for (std::size_t v = 0; v < vocab_; ++v) {
                out[t * vocab_ + v] = std::log(row[v]);
            }
        }
        return out;
    }

private:
    std::size_t vocab_;
    std::vector<double> first_;
    std::vector<std::vector<double>> rows_;
};

}  // namespace hetforest::testing
