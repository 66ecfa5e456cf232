// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Synthetic byte corpora with controllable statistics, for demos and tests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hetforest {

/// count consecutive byte values starting at first.
std::vector<std::uint8_t> byte_range(std::uint8_t first, std::size_t count);

/// Random order-k Markov source over an alphabet. Transition weights are
/// exp(sharpness * z) with z standard normal, so sharpness 0 is uniform
/// (maximum entropy) and large values approach a deterministic chain.
struct MarkovSource {
    std::vector<std::uint8_t> alphabet;
    int order = 1;
    double sharpness = 1.0;
    std::uint64_t table_seed = 0;
};

std::string generate_markov(const MarkovSource& source, std::size_t length, std::uint64_t sample_seed);

/// Entropy rate in nats per symbol of the source's chain, averaged over
/// contexts weighted by the empirical context frequency of a sample.
double empirical_entropy_rate(const MarkovSource& source, std::size_t sample_length, std::uint64_t sample_seed);

/// Repeats pattern; each byte is replaced by a uniform draw from the
/// pattern's own characters with probability noise.
std::string generate_periodic(std::string_view pattern, std::size_t length, double noise, std::uint64_t seed);

/// Writes a demo domain set (three iterations of easy/moderate/difficult
/// domains, two evaluation-only domains and a pretraining mixture) plus
/// registry.json to dir. Returns the registry path.
std::filesystem::path write_demo_corpus(const std::filesystem::path& dir, std::size_t bytes_per_domain,
                                        std::uint64_t seed);

}  // namespace hetforest
