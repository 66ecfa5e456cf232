// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hetforest/error.hpp"

namespace hetforest {

std::vector<Token> tokenize(std::span<const std::uint8_t> bytes) {
    std::vector<Token> out;
    out.reserve(bytes.size());
    for (std::uint8_t b : bytes) {
        out.push_back(static_cast<Token>(b));
    }
    return out;
}

std::vector<Token> tokenize(std::string_view text) {
    return tokenize(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()),
                                                  text.size()));
}

std::string detokenize(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t >= 0 && t < 256) {
            out.push_back(static_cast<char>(static_cast<std::uint8_t>(t)));
        }
    }
    return out;
}

DomainCorpus DomainCorpus::from_bytes(std::string name, std::string bytes) {
    DomainCorpus c;
    c.name = std::move(name);
    c.tokens = tokenize(bytes);
    c.raw_bytes = std::move(bytes);
    return c;
}

DomainCorpus DomainCorpus::load(std::string name, const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open corpus '" + path.string() + "' for domain '" + name + "'");
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_bytes(std::move(name), std::move(bytes));
}

SplitPlan plan_split(std::size_t token_count, const SplitSpec& spec) {
    if (!(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "holdout_fraction must lie in (0,1)");
    }
    if (!(spec.val_test_ratio > 0.0 && spec.val_test_ratio < 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "val_test_ratio must lie in (0,1)");
    }
    if (spec.block_size == 0) {
        throw Error(ErrorCode::InvalidArgument, "block_size must be positive");
    }
    if (static_cast<double>(token_count) < 10.0 / spec.holdout_fraction) {
        std::ostringstream msg;
        msg << "corpus has " << token_count << " tokens, need at least " << 10.0 / spec.holdout_fraction
            << " for holdout fraction " << spec.holdout_fraction;
        throw Error(ErrorCode::CorpusTooSmall, msg.str());
    }

    SplitPlan plan;
    plan.token_count = token_count;
    plan.block_size = spec.block_size;
    const std::size_t n_blocks = (token_count + spec.block_size - 1) / spec.block_size;
    if (n_blocks < 2) {
        throw Error(ErrorCode::CorpusTooSmall, "corpus shorter than two split blocks");
    }
    const double wanted = spec.holdout_fraction * static_cast<double>(token_count) /
                          static_cast<double>(spec.block_size);
    const std::size_t held = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(wanted)), 1,
                                                     n_blocks - 1);
    std::size_t n_val = static_cast<std::size_t>(std::llround(spec.val_test_ratio * static_cast<double>(held)));
    if (held >= 2) {
        n_val = std::clamp<std::size_t>(n_val, 1, held - 1);
    }

    plan.blocks.assign(n_blocks, SplitKind::Train);
    std::vector<std::size_t> tail(held);
    std::iota(tail.begin(), tail.end(), n_blocks - held);
    Rng rng(spec.rng_seed);
    shuffle_in_place(tail, rng);
    for (std::size_t i = 0; i < held; ++i) {
        plan.blocks[tail[i]] = i < n_val ? SplitKind::Val : SplitKind::Test;
    }
    return plan;
}

CorpusSplit split(const DomainCorpus& corpus, const SplitSpec& spec) {
    const SplitPlan plan = plan_split(corpus.token_count(), spec);
    CorpusSplit out;
    out.block_size = plan.block_size;
    for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
        const std::size_t begin = b * plan.block_size;
        const std::size_t end = std::min(begin + plan.block_size, corpus.token_count());
        auto& dst = plan.blocks[b] == SplitKind::Train ? out.train
                    : plan.blocks[b] == SplitKind::Val ? out.val
                                                       : out.test;
        dst.insert(dst.end(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                   corpus.tokens.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return out;
}

std::vector<std::span<const Token>> documents(std::span<const Token> tokens, std::size_t block_size) {
    if (block_size == 0) {
        throw Error(ErrorCode::InvalidArgument, "block_size must be positive");
    }
    std::vector<std::span<const Token>> docs;
    for (std::size_t i = 0; i < tokens.size(); i += block_size) {
        docs.push_back(tokens.subspan(i, std::min(block_size, tokens.size() - i)));
    }
    return docs;
}

BatchIterator::BatchIterator(std::span<const Token> tokens, std::size_t seq_len, std::size_t batch_size,
                             std::uint64_t rng_seed)
    : tokens_(tokens), seq_len_(seq_len), batch_size_(batch_size), rng_(rng_seed) {
    if (seq_len == 0 || batch_size == 0) {
        throw Error(ErrorCode::InvalidArgument, "seq_len and batch_size must be positive");
    }
    if (seq_len >= tokens.size()) {
        throw Error(ErrorCode::SequenceTooLong, "seq_len " + std::to_string(seq_len) +
                                                    " needs more than " + std::to_string(tokens.size()) +
                                                    " tokens");
    }
}

Batch BatchIterator::next() {
    Batch batch;
    batch.batch_size = batch_size_;
    batch.seq_len = seq_len_;
    batch.inputs.resize(batch_size_ * seq_len_);
    batch.targets.resize(batch_size_ * seq_len_);
    const std::size_t n_starts = tokens_.size() - seq_len_;
    for (std::size_t b = 0; b < batch_size_; ++b) {
        const std::size_t start = uniform_below(rng_, n_starts);
        std::copy_n(tokens_.begin() + static_cast<std::ptrdiff_t>(start), seq_len_,
                    batch.inputs.begin() + static_cast<std::ptrdiff_t>(b * seq_len_));
        std::copy_n(tokens_.begin() + static_cast<std::ptrdiff_t>(start + 1), seq_len_,
                    batch.targets.begin() + static_cast<std::ptrdiff_t>(b * seq_len_));
    }
    return batch;
}

std::map<std::string, Tier> classify_difficulty(const std::map<std::string, double>& seed_ppls) {
    if (seed_ppls.size() < 3) {
        throw Error(ErrorCode::TooFewDomains,
                    "need at least 3 domains to form tiers, got " + std::to_string(seed_ppls.size()));
    }
    std::vector<std::pair<double, std::string>> order;
    for (const auto& [name, ppl] : seed_ppls) {
        if (!std::isfinite(ppl) || ppl <= 1.0) {
            throw Error(ErrorCode::InvalidPerplexity, "domain '" + name + "' has perplexity " + std::to_string(ppl));
        }
        order.emplace_back(ppl, name);
    }
    std::sort(order.begin(), order.end());
    std::map<std::string, Tier> tiers;
    const std::size_t n = order.size();
    for (std::size_t i = 0; i < n; ++i) {
        tiers[order[i].second] = kAllTiers[(3 * i) / n];
    }
    return tiers;
}

std::vector<RegistryEntry> load_registry(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::IoError, "cannot open domain registry '" + path.string() + "'");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, "registry '" + path.string() + "': " + e.what());
    }
    if (!j.is_array()) {
        throw Error(ErrorCode::ConfigInvalid, "registry must be a JSON array");
    }
    const auto base = path.parent_path();
    std::vector<RegistryEntry> entries;
    for (const auto& item : j) {
        RegistryEntry e;
        try {
            e.name = item.at("name").get<std::string>();
            e.path = item.at("path").get<std::string>();
        } catch (const nlohmann::json::exception&) {
            throw Error(ErrorCode::ConfigInvalid, "registry entries need 'name' and 'path'");
        }
        if (e.path.is_relative()) {
            e.path = base / e.path;
        }
        if (item.contains("tier_override") && !item["tier_override"].is_null()) {
            e.tier_override = parse_tier(item["tier_override"].get<std::string>());
            if (!e.tier_override) {
                throw Error(ErrorCode::ConfigInvalid, "unknown tier_override for domain '" + e.name + "'");
            }
        }
        if (item.contains("iteration")) {
            e.iteration = item["iteration"].get<int>();
        }
        const std::string kind = item.value("kind", std::string("trained"));
        if (kind != "trained" && kind != "eval_only") {
            throw Error(ErrorCode::ConfigInvalid, "kind must be 'trained' or 'eval_only' for '" + e.name + "'");
        }
        e.eval_only = kind == "eval_only";
        if (!e.eval_only && !e.iteration) {
            e.iteration = 1;
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

void save_registry(const std::filesystem::path& path, const std::vector<RegistryEntry>& entries) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& e : entries) {
        nlohmann::json item{{"name", e.name}, {"path", e.path.string()},
                            {"kind", e.eval_only ? "eval_only" : "trained"}};
        if (e.tier_override) {
            item["tier_override"] = std::string(to_string(*e.tier_override));
        }
        if (e.iteration && !e.eval_only) {
            item["iteration"] = *e.iteration;
        }
        j.push_back(std::move(item));
    }
    std::ofstream out(path);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write registry '" + path.string() + "'");
    }
    out << j.dump(2) << "\n";
}

}  // namespace hetforest
