// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Bayesian mixture of expert language models. Each expert i scores the
// history; the domain posterior is
//
//     w_i(t) = prior_i * p(x_<t | expert i) / sum_j prior_j * p(x_<t | expert j)
//
// and the next-token distribution is sum_i w_i(t) * p_i(x_t | x_<t). All of it
// is carried in log space.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "hetforest/tinylm.hpp"
#include "hetforest/types.hpp"

namespace hetforest {

struct DomainPrior {
    enum class Kind { Uniform, Fixed };
    Kind kind = Kind::Uniform;
    std::vector<double> values;  // probabilities, Fixed only

    static DomainPrior uniform() { return {}; }
    static DomainPrior fixed(std::vector<double> probabilities);

    /// Throws DimensionMismatch / InvalidArgument.
    void validate(std::size_t n) const;
    bool operator==(const DomainPrior&) const = default;
};

struct PosteriorState {
    std::vector<double> cum_loglik;  // log p(x_<t | expert i)
    std::vector<double> log_prior;
    std::size_t t = 0;

    std::size_t size() const noexcept { return cum_loglik.size(); }
};

PosteriorState init_posterior(std::size_t n, const DomainPrior& prior);

/// softmax(cum_loglik + log_prior).
std::vector<double> posterior_weights(const PosteriorState& state);

/// Numerically stable log(sum(exp(x))); -inf for an empty or all -inf input.
double log_sum_exp(std::span<const double> x) noexcept;

/// Tolerance on |logsumexp(row)| for an expert distribution to count as normalized.
inline constexpr double kNormalizationTolerance = 1e-6;

struct EnsembleStep {
    std::vector<double> log_probs;  // mixture over the vocabulary
    PosteriorState next;
};

/// Mixes the n rows of per_expert_logprobs [n x vocab] under the current
/// posterior, then folds the observed token into the state.
EnsembleStep step(const PosteriorState& state, std::span<const double> per_expert_logprobs, std::size_t vocab,
                  Token observed);

/// Anything that can produce causal next-token log-probabilities.
class LanguageModel {
public:
    virtual ~LanguageModel() = default;
    virtual std::size_t vocab_size() const = 0;
    /// Row t: log p(. | x_<t), row 0 conditioned on an empty history.
    virtual std::vector<double> predictive_logprobs(std::span<const Token> tokens) const = 0;
};

/// Non-owning adapter over a trained checkpoint.
class ExpertModel final : public LanguageModel {
public:
    explicit ExpertModel(const ExpertCheckpoint& checkpoint) : checkpoint_(&checkpoint) {}
    std::size_t vocab_size() const override;
    std::vector<double> predictive_logprobs(std::span<const Token> tokens) const override;

private:
    const ExpertCheckpoint* checkpoint_;
};

using ModelSet = std::vector<const LanguageModel*>;

struct SequenceScore {
    double total_nll = 0.0;
    std::vector<double> token_nll;
    /// Posterior weights in effect before each token, [tokens x experts].
    std::vector<std::vector<double>> posterior_trace;
};

SequenceScore sequence_nll(const ModelSet& experts, const DomainPrior& prior, std::span<const Token> tokens);

/// exp(total_nll / token count). Throws EmptyEval on an empty sequence.
double perplexity(const ModelSet& experts, const DomainPrior& prior, std::span<const Token> tokens);

/// Token-weighted perplexity over documents. With reset_per_document the
/// posterior restarts at the prior for each document; otherwise the documents
/// are scored as one concatenated stream.
double corpus_perplexity(const ModelSet& experts, const DomainPrior& prior,
                         const std::vector<std::span<const Token>>& docs, bool reset_per_document = true);

/// CSV with header "t,<name_0>,<name_1>,..." and one row per token.
std::string posterior_trace_csv(const SequenceScore& score, const std::vector<std::string>& expert_names);

}  // namespace hetforest
