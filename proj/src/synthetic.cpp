// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/synthetic.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "hetforest/corpus.hpp"
#include "hetforest/error.hpp"
#include "hetforest/rng.hpp"

namespace hetforest {

namespace {

// Row-major cumulative transition table, one row of |alphabet| entries per context.
struct Chain {
    std::size_t symbols = 0;
    std::size_t contexts = 0;
    std::vector<double> cumulative;
    std::vector<double> probs;
};

Chain build_chain(const MarkovSource& src) {
    if (src.alphabet.empty() || src.order < 0 || src.order > 3) {
        throw Error(ErrorCode::InvalidArgument, "markov source needs a non-empty alphabet and order in [0, 3]");
    }
    Chain c;
    c.symbols = src.alphabet.size();
    c.contexts = 1;
    for (int i = 0; i < src.order; ++i) {
        c.contexts *= c.symbols;
    }
    c.cumulative.resize(c.contexts * c.symbols);
    c.probs.resize(c.contexts * c.symbols);
    Rng rng(derive_seed(src.table_seed, 0x7AB1EULL));
    std::vector<double> w(c.symbols);
    for (std::size_t ctx = 0; ctx < c.contexts; ++ctx) {
        double total = 0.0;
        for (auto& x : w) {
            x = std::exp(src.sharpness * standard_normal(rng));
            total += x;
        }
        double acc = 0.0;
        for (std::size_t j = 0; j < c.symbols; ++j) {
            c.probs[ctx * c.symbols + j] = w[j] / total;
            acc += w[j] / total;
            c.cumulative[ctx * c.symbols + j] = acc;
        }
        c.cumulative[ctx * c.symbols + c.symbols - 1] = 1.0;
    }
    return c;
}

template <typename Visit>
void walk(const MarkovSource& src, const Chain& c, std::size_t length, std::uint64_t seed, Visit&& visit) {
    Rng rng(seed);
    std::size_t ctx = uniform_below(rng, c.contexts);
    for (std::size_t i = 0; i < length; ++i) {
        const double u = uniform01(rng);
        const double* row = c.cumulative.data() + ctx * c.symbols;
        std::size_t j = 0;
        while (j + 1 < c.symbols && row[j] <= u) {
            ++j;
        }
        visit(ctx, j);
        ctx = src.order == 0 ? 0 : (ctx * c.symbols + j) % c.contexts;
    }
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write '" + p.string() + "'");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

std::vector<std::uint8_t> byte_range(std::uint8_t first, std::size_t count) {
    if (first + count > 256) {
        throw Error(ErrorCode::InvalidArgument, "byte range runs past 255");
    }
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<std::uint8_t>(first + i);
    }
    return out;
}

std::string generate_markov(const MarkovSource& source, std::size_t length, std::uint64_t sample_seed) {
    const Chain c = build_chain(source);
    std::string out;
    out.reserve(length);
    walk(source, c, length, sample_seed,
         [&](std::size_t, std::size_t j) { out.push_back(static_cast<char>(source.alphabet[j])); });
    return out;
}

double empirical_entropy_rate(const MarkovSource& source, std::size_t sample_length, std::uint64_t sample_seed) {
    const Chain c = build_chain(source);
    if (sample_length == 0) {
        return 0.0;
    }
    double h = 0.0;
    walk(source, c, sample_length, sample_seed, [&](std::size_t ctx, std::size_t) {
        for (std::size_t j = 0; j < c.symbols; ++j) {
            const double p = c.probs[ctx * c.symbols + j];
            if (p > 0.0) {
                h -= p * std::log(p);
            }
        }
    });
    return h / static_cast<double>(sample_length);
}

std::string generate_periodic(std::string_view pattern, std::size_t length, double noise, std::uint64_t seed) {
    if (pattern.empty()) {
        throw Error(ErrorCode::InvalidArgument, "pattern must not be empty");
    }
    Rng rng(seed);
    std::string out;
    out.reserve(length);
    for (std::size_t i = 0; i < length; ++i) {
        char c = pattern[i % pattern.size()];
        if (noise > 0.0 && uniform01(rng) < noise) {
            c = pattern[uniform_below(rng, pattern.size())];
        }
        out.push_back(c);
    }
    return out;
}

std::filesystem::path write_demo_corpus(const std::filesystem::path& dir, std::size_t bytes_per_domain,
                                        std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    static constexpr std::string_view patterns[] = {
        "once upon a time the cat sat on the mat. ",
        "the little fox ran to the river and back. ",
        "a small bird sang on the old oak tree. ",
    };
    std::vector<RegistryEntry> entries;
    std::string pretrain;
    const std::size_t share = bytes_per_domain / 8;
    for (int k = 1; k <= 3; ++k) {
        const auto ks = static_cast<std::uint64_t>(k);
        std::map<std::string, std::string> row;
        row["story" + std::to_string(k)] =
            generate_periodic(patterns[k - 1], bytes_per_domain, 0.02, derive_seed(seed, ks, 1));
        row["prose" + std::to_string(k)] = generate_markov(
            {byte_range(static_cast<std::uint8_t>('a'), 26), 1, 1.5, derive_seed(seed, ks, 2)}, bytes_per_domain,
            derive_seed(seed, ks, 3));
        row["code" + std::to_string(k)] = generate_markov(
            {byte_range(0x21, 64), 2, 0.6, derive_seed(seed, ks, 4)}, bytes_per_domain, derive_seed(seed, ks, 5));
        for (const auto& [name, text] : row) {
            write_file(dir / (name + ".txt"), text);
            entries.push_back({name, name + ".txt", std::nullopt, k, false});
            pretrain += text.substr(0, share);
        }
    }
    const std::string eval_a = generate_markov({byte_range(static_cast<std::uint8_t>('A'), 20), 1, 1.0,
                                                derive_seed(seed, 10)},
                                               bytes_per_domain / 2, derive_seed(seed, 11));
    const std::string eval_b = generate_periodic("to be or not to be, that is the question. ", bytes_per_domain / 2,
                                                 0.05, derive_seed(seed, 12));
    write_file(dir / "heldout_caps.txt", eval_a);
    write_file(dir / "heldout_verse.txt", eval_b);
    entries.push_back({"heldout_caps", "heldout_caps.txt", std::nullopt, std::nullopt, true});
    entries.push_back({"heldout_verse", "heldout_verse.txt", std::nullopt, std::nullopt, true});
    write_file(dir / "pretrain.txt", pretrain);

    const auto registry = dir / "registry.json";
    save_registry(registry, entries);
    return registry;
}

}  // namespace hetforest
