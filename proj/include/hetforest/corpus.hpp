// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Per-domain corpora: byte-level tokenization, deterministic held-out splits,
// training batch streams and difficulty tiers from seed-model perplexities.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hetforest/rng.hpp"
#include "hetforest/types.hpp"

namespace hetforest {

std::vector<Token> tokenize(std::span<const std::uint8_t> bytes);
std::vector<Token> tokenize(std::string_view text);

/// Inverse of tokenize. Special tokens (BOS/EOS/PAD) carry no bytes and are dropped.
std::string detokenize(std::span<const Token> tokens);

struct DomainCorpus {
    std::string name;
    std::string raw_bytes;
    std::vector<Token> tokens;

    std::size_t token_count() const noexcept { return tokens.size(); }

    static DomainCorpus from_bytes(std::string name, std::string bytes);
    /// Reads the file verbatim (binary mode, newlines preserved).
    static DomainCorpus load(std::string name, const std::filesystem::path& path);
};

struct SplitSpec {
    double holdout_fraction = 0.05;
    std::uint64_t rng_seed = 0;
    double val_test_ratio = 0.5;
    std::size_t block_size = 128;
};

enum class SplitKind : std::uint8_t { Train, Val, Test };

/// Block-level assignment underlying a split. Blocks are consecutive runs of
/// block_size tokens; the last block may be shorter when the corpus length is
/// not a multiple of block_size. Held-out blocks form a contiguous tail.
struct SplitPlan {
    std::size_t token_count = 0;
    std::size_t block_size = 0;
    std::vector<SplitKind> blocks;
};

SplitPlan plan_split(std::size_t token_count, const SplitSpec& spec);

struct CorpusSplit {
    std::vector<Token> train;
    std::vector<Token> val;
    std::vector<Token> test;
    std::size_t block_size = 0;
};

CorpusSplit split(const DomainCorpus& corpus, const SplitSpec& spec);

/// Chop a held-out token stream into documents of at most block_size tokens.
std::vector<std::span<const Token>> documents(std::span<const Token> tokens, std::size_t block_size);

struct Batch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<Token> inputs;   // batch_size x seq_len, row-major
    std::vector<Token> targets;  // inputs shifted by one position

    std::span<const Token> input_row(std::size_t b) const {
        return {inputs.data() + b * seq_len, seq_len};
    }
    std::span<const Token> target_row(std::size_t b) const {
        return {targets.data() + b * seq_len, seq_len};
    }
};

/// Infinite stream of uniformly sampled training windows. Holds a private
/// cursor; the token storage it views must outlive it.
class BatchIterator {
public:
    BatchIterator(std::span<const Token> tokens, std::size_t seq_len, std::size_t batch_size,
                  std::uint64_t rng_seed);

    Batch next();

    std::size_t seq_len() const noexcept { return seq_len_; }
    std::size_t batch_size() const noexcept { return batch_size_; }

private:
    std::span<const Token> tokens_;
    std::size_t seq_len_;
    std::size_t batch_size_;
    Rng rng_;
};

/// Tertile cut of domains sorted by (seed perplexity, name).
std::map<std::string, Tier> classify_difficulty(const std::map<std::string, double>& seed_ppls);

struct RegistryEntry {
    std::string name;
    std::filesystem::path path;
    std::optional<Tier> tier_override;
    /// BTM iteration (1-based) that trains on this domain; nullopt for eval-only domains.
    std::optional<int> iteration;
    bool eval_only = false;
};

/// Registry file: JSON array of {name, path, tier_override?, iteration?, kind?}
/// where kind is "trained" (default) or "eval_only". Relative paths resolve
/// against the registry's directory.
std::vector<RegistryEntry> load_registry(const std::filesystem::path& path);
void save_registry(const std::filesystem::path& path, const std::vector<RegistryEntry>& entries);

}  // namespace hetforest
