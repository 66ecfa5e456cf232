// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "hetforest/ensemble.hpp"
#include "support.hpp"

using namespace hetforest;
using hetforest::testing::TableModel;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Forest {
    std::vector<TableModel> models;
    ModelSet members() const {
        ModelSet m;
        for (const auto& x : models) {
            m.push_back(&x);
        }
        return m;
    }
};

Forest random_forest(Rng& rng, std::size_t n, std::size_t vocab) {
    Forest f;
    for (std::size_t i = 0; i < n; ++i) {
        f.models.push_back(TableModel::random(rng, vocab));
    }
    return f;
}

// Direct evaluation: posterior weights as normalized products of prior and
// likelihood, mixture as a weighted sum.
double linear_space_nll(const Forest& f, const std::vector<double>& prior, std::span<const Token> x) {
    const std::size_t n = f.models.size();
    std::vector<double> lik(n, 1.0);
    double nll = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) {
        const auto history = x.subspan(0, t);
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            z += prior[i] * lik[i];
        }
        double p = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            p += prior[i] * lik[i] / z * f.models[i].prob(history, x[t]);
        }
        nll -= std::log(p);
        for (std::size_t i = 0; i < n; ++i) {
            lik[i] *= f.models[i].prob(history, x[t]);
        }
    }
    return nll;
}

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no hetforest::Error thrown";
    return ErrorCode::IoError;
}

}  // namespace

TEST(LogSumExp, Basics) {
    const std::vector<double> a{std::log(1.0), std::log(2.0), std::log(3.0)};
    EXPECT_NEAR(log_sum_exp(a), std::log(6.0), 1e-15);
    const std::vector<double> big{1000.0, 1000.0};
    EXPECT_NEAR(log_sum_exp(big), 1000.0 + std::log(2.0), 1e-12);
    const std::vector<double> none{-kInf, -kInf};
    EXPECT_EQ(log_sum_exp(none), -kInf);
    EXPECT_EQ(log_sum_exp(std::span<const double>{}), -kInf);
    const std::vector<double> some{-kInf, 0.0};
    EXPECT_EQ(log_sum_exp(some), 0.0);
}

TEST(SequenceNll, MatchesLinearSpaceOracle) {
    Rng rng(100);
    int cases = 0;
    for (int trial = 0; trial < 1200; ++trial) {
        const std::size_t n = 2 + uniform_below(rng, 2);
        const std::size_t vocab = 2 + uniform_below(rng, 7);
        const std::size_t len = 1 + uniform_below(rng, 8);
        const auto forest = random_forest(rng, n, vocab);
        const bool uniform = uniform_below(rng, 2) == 0;
        const auto prior_probs = uniform ? std::vector<double>(n, 1.0 / static_cast<double>(n))
                                         : hetforest::testing::random_distribution(rng, n, 1.0);
        const DomainPrior prior = uniform ? DomainPrior::uniform() : DomainPrior::fixed(prior_probs);
        const auto x = hetforest::testing::random_tokens(rng, len, static_cast<int>(vocab));
        const double got = sequence_nll(forest.members(), prior, x).total_nll;
        const double want = linear_space_nll(forest, prior_probs, x);
        ASSERT_NEAR(got, want, 1e-9 * std::abs(want)) << "trial " << trial;
        ++cases;
    }
    EXPECT_GE(cases, 1000);
}

TEST(SequenceNll, SingleExpertIsPlainLikelihood) {
    Rng rng(7);
    const auto forest = random_forest(rng, 1, 5);
    const auto x = hetforest::testing::random_tokens(rng, 8, 5);
    double want = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) {
        want -= std::log(forest.models[0].prob(std::span<const Token>(x).subspan(0, t), x[t]));
    }
    EXPECT_NEAR(sequence_nll(forest.members(), {}, x).total_nll, want, 1e-12);
}

TEST(Posterior, InvariantsHoldEveryStep) {
    Rng rng(200);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 2 + uniform_below(rng, 3);
        const std::size_t vocab = 2 + uniform_below(rng, 7);
        const auto forest = random_forest(rng, n, vocab);
        const auto prior_probs = hetforest::testing::random_distribution(rng, n, 1.0);
        const auto prior = DomainPrior::fixed(prior_probs);
        const auto x = hetforest::testing::random_tokens(rng, 1 + uniform_below(rng, 8), static_cast<int>(vocab));
        const auto score = sequence_nll(forest.members(), prior, x);
        ASSERT_EQ(score.posterior_trace.size(), x.size());
        // Prior recovery at t = 0.
        for (std::size_t i = 0; i < n; ++i) {
            ASSERT_NEAR(score.posterior_trace[0][i], prior_probs[i], 1e-12);
        }
        for (std::size_t t = 0; t < x.size(); ++t) {
            double sum = 0.0;
            for (double w : score.posterior_trace[t]) {
                ASSERT_GE(w, 0.0);
                sum += w;
            }
            ASSERT_NEAR(sum, 1.0, 1e-9);
            // Mixture probability lies within the experts' range.
            const auto hist = std::span<const Token>(x).subspan(0, t);
            double lo = 1.0, hi = 0.0;
            for (const auto& m : forest.models) {
                lo = std::min(lo, m.prob(hist, x[t]));
                hi = std::max(hi, m.prob(hist, x[t]));
            }
            const double p = std::exp(-score.token_nll[t]);
            ASSERT_GE(p, lo * (1.0 - 1e-12));
            ASSERT_LE(p, hi * (1.0 + 1e-12));
        }
    }
}

TEST(Posterior, ShiftInvariance) {
    Rng rng(300);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + uniform_below(rng, 4);
        auto state = init_posterior(n, DomainPrior::fixed(hetforest::testing::random_distribution(rng, n)));
        for (auto& c : state.cum_loglik) {
            c = -hetforest::testing::random_real(rng, 0.0, 50.0);
        }
        const auto w = posterior_weights(state);
        const double shift = hetforest::testing::random_real(rng, -500.0, 500.0);
        auto shifted = state;
        for (auto& c : shifted.cum_loglik) {
            c += shift;
        }
        const auto ws = posterior_weights(shifted);
        for (std::size_t i = 0; i < n; ++i) {
            ASSERT_NEAR(w[i], ws[i], 1e-12);
        }
        // Same for the mixture produced by a step.
        const std::size_t vocab = 4;
        std::vector<double> rows;
        for (std::size_t i = 0; i < n; ++i) {
            for (double p : hetforest::testing::random_distribution(rng, vocab)) {
                rows.push_back(std::log(p));
            }
        }
        const auto a = step(state, rows, vocab, 1);
        const auto b = step(shifted, rows, vocab, 1);
        for (std::size_t v = 0; v < vocab; ++v) {
            ASSERT_NEAR(a.log_probs[v], b.log_probs[v], 1e-12);
        }
    }
}

TEST(Posterior, OneHotPriorCollapses) {
    Rng rng(400);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + uniform_below(rng, 2);
        const std::size_t vocab = 2 + uniform_below(rng, 7);
        const auto forest = random_forest(rng, n, vocab);
        const std::size_t pick = uniform_below(rng, n);
        std::vector<double> onehot(n, 0.0);
        onehot[pick] = 1.0;
        const auto x = hetforest::testing::random_tokens(rng, 1 + uniform_below(rng, 8), static_cast<int>(vocab));
        const auto mixed = sequence_nll(forest.members(), DomainPrior::fixed(onehot), x);
        const auto solo = sequence_nll({&forest.models[pick]}, {}, x);
        ASSERT_NEAR(mixed.total_nll, solo.total_nll, 1e-12);
        for (const auto& w : mixed.posterior_trace) {
            for (std::size_t i = 0; i < n; ++i) {
                ASSERT_EQ(w[i], i == pick ? 1.0 : 0.0);
            }
        }
    }
}

TEST(Posterior, ConcentratesOnGeneratingExpert) {
    // Experts over disjoint halves of the vocabulary: one token is enough.
    const std::size_t vocab = 4;
    std::vector<std::vector<double>> lo(vocab, {0.5, 0.5, 0.0, 0.0}), hi(vocab, {0.0, 0.0, 0.5, 0.5});
    TableModel a(vocab, lo[0], lo), b(vocab, hi[0], hi);
    const std::vector<Token> x{2, 3, 2, 2};
    const auto s = sequence_nll({&a, &b}, {}, x);
    EXPECT_NEAR(s.posterior_trace[0][0], 0.5, 1e-15);
    EXPECT_NEAR(s.posterior_trace[1][1], 1.0, 1e-15);
    EXPECT_NEAR(s.total_nll, std::log(4.0) + 3 * std::log(2.0), 1e-12);
}

TEST(Step, Errors) {
    const auto state = init_posterior(2, {});
    const std::vector<double> good{std::log(0.5), std::log(0.5), std::log(0.25), std::log(0.75)};
    EXPECT_NO_THROW(step(state, good, 2, 1));
    EXPECT_EQ(code_of([&] { step(state, good, 3, 1); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([&] { step(state, good, 2, 2); }), ErrorCode::TokenOutOfRange);
    const std::vector<double> bad{std::log(0.5), std::log(0.6), std::log(0.25), std::log(0.75)};
    EXPECT_EQ(code_of([&] { step(state, bad, 2, 0); }), ErrorCode::UnnormalizedExpert);
}

TEST(DomainPrior, Validation) {
    EXPECT_NO_THROW(DomainPrior::uniform().validate(3));
    EXPECT_NO_THROW(DomainPrior::fixed({0.2, 0.8}).validate(2));
    EXPECT_EQ(code_of([] { DomainPrior::fixed({0.2, 0.8}).validate(3); }), ErrorCode::DimensionMismatch);
    EXPECT_EQ(code_of([] { DomainPrior::fixed({0.2, 0.7}).validate(2); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([] { DomainPrior::fixed({-0.2, 1.2}).validate(2); }), ErrorCode::InvalidArgument);
    EXPECT_EQ(code_of([] { DomainPrior::uniform().validate(0); }), ErrorCode::InvalidArgument);
}

TEST(SequenceNll, Errors) {
    Rng rng(1);
    const auto forest = random_forest(rng, 2, 4);
    const auto other = TableModel::random(rng, 5);
    const std::vector<Token> x{1, 2};
    EXPECT_EQ(code_of([&] { sequence_nll(forest.members(), {}, {}); }), ErrorCode::EmptyEval);
    EXPECT_EQ(code_of([&] { perplexity(forest.members(), {}, {}); }), ErrorCode::EmptyEval);
    EXPECT_EQ(code_of([&] { sequence_nll({&forest.models[0], &other}, {}, x); }), ErrorCode::DimensionMismatch);
    const std::vector<Token> oob{1, 4};
    EXPECT_EQ(code_of([&] { sequence_nll(forest.members(), {}, oob); }), ErrorCode::TokenOutOfRange);
    EXPECT_EQ(code_of([&] { sequence_nll(forest.members(), DomainPrior::fixed({1.0}), x); }),
              ErrorCode::DimensionMismatch);
}

TEST(CorpusPerplexity, TokenWeightedOverDocuments) {
    Rng rng(9);
    const auto forest = random_forest(rng, 3, 6);
    const auto a = hetforest::testing::random_tokens(rng, 5, 6);
    const auto b = hetforest::testing::random_tokens(rng, 8, 6);
    const std::vector<std::span<const Token>> docs{a, b};
    const double nll = sequence_nll(forest.members(), {}, a).total_nll + sequence_nll(forest.members(), {}, b).total_nll;
    EXPECT_NEAR(corpus_perplexity(forest.members(), {}, docs), std::exp(nll / 13.0), 1e-12);
    std::vector<Token> joined(a);
    joined.insert(joined.end(), b.begin(), b.end());
    EXPECT_NEAR(corpus_perplexity(forest.members(), {}, docs, false), perplexity(forest.members(), {}, joined),
                1e-12);
    EXPECT_EQ(code_of([&] { corpus_perplexity(forest.members(), {}, {}); }), ErrorCode::EmptyEval);
}

TEST(PosteriorTrace, Csv) {
    SequenceScore s;
    s.posterior_trace = {{0.5, 0.5}, {0.25, 0.75}};
    const auto csv = posterior_trace_csv(s, {"easy", "difficult"});
    EXPECT_EQ(csv, "t,easy,difficult\n0,0.5,0.5\n1,0.25,0.75\n");
}
