// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "hetforest/error.hpp"

namespace hetforest {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_token(Token tok, std::size_t vocab) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab) {
        throw Error(ErrorCode::TokenOutOfRange, "token " + std::to_string(tok) + " outside vocabulary of " +
                                                    std::to_string(vocab));
    }
}

std::vector<double> log_weights(const PosteriorState& state) {
    std::vector<double> s(state.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = state.cum_loglik[i] + state.log_prior[i];
    }
    const double z = log_sum_exp(s);
    for (double& v : s) {
        v -= z;
    }
    return s;
}

}  // namespace

DomainPrior DomainPrior::fixed(std::vector<double> probabilities) {
    DomainPrior p;
    p.kind = Kind::Fixed;
    p.values = std::move(probabilities);
    p.validate(p.values.size());
    return p;
}

void DomainPrior::validate(std::size_t n) const {
    if (n == 0) {
        throw Error(ErrorCode::InvalidArgument, "ensemble needs at least one expert");
    }
    if (kind == Kind::Uniform) {
        return;
    }
    if (values.size() != n) {
        throw Error(ErrorCode::DimensionMismatch, "fixed prior has " + std::to_string(values.size()) +
                                                      " entries for " + std::to_string(n) + " experts");
    }
    double sum = 0.0;
    for (double v : values) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw Error(ErrorCode::InvalidArgument, "prior probabilities must be finite and nonnegative");
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw Error(ErrorCode::InvalidArgument, "prior probabilities must sum to 1");
    }
}

PosteriorState init_posterior(std::size_t n, const DomainPrior& prior) {
    prior.validate(n);
    PosteriorState s;
    s.cum_loglik.assign(n, 0.0);
    if (prior.kind == DomainPrior::Kind::Uniform) {
        s.log_prior.assign(n, std::log(1.0 / static_cast<double>(n)));
    } else {
        s.log_prior.resize(n);
        std::transform(prior.values.begin(), prior.values.end(), s.log_prior.begin(),
                       [](double p) { return p > 0.0 ? std::log(p) : kNegInf; });
    }
    return s;
}

double log_sum_exp(std::span<const double> x) noexcept {
    double m = kNegInf;
    for (double v : x) {
        m = std::max(m, v);
    }
    if (m == kNegInf) {
        return kNegInf;
    }
    double acc = 0.0;
    for (double v : x) {
        acc += std::exp(v - m);
    }
    return m + std::log(acc);
}

std::vector<double> posterior_weights(const PosteriorState& state) {
    auto w = log_weights(state);
    for (double& v : w) {
        v = std::exp(v);
    }
    return w;
}

EnsembleStep step(const PosteriorState& state, std::span<const double> per_expert_logprobs, std::size_t vocab,
                  Token observed) {
    const std::size_t n = state.size();
    if (n == 0 || vocab == 0 || per_expert_logprobs.size() != n * vocab) {
        throw Error(ErrorCode::DimensionMismatch, "expected " + std::to_string(n) + " x " + std::to_string(vocab) +
                                                      " expert log-probabilities");
    }
    check_token(observed, vocab);
    for (std::size_t i = 0; i < n; ++i) {
        const double z = log_sum_exp(per_expert_logprobs.subspan(i * vocab, vocab));
        if (!(std::abs(z) <= kNormalizationTolerance)) {
            throw Error(ErrorCode::UnnormalizedExpert,
                        "expert " + std::to_string(i) + " log-partition " + std::to_string(z));
        }
    }

    const auto lw = log_weights(state);
    EnsembleStep out;
    out.log_probs.resize(vocab);
    std::vector<double> terms(n);
    for (std::size_t v = 0; v < vocab; ++v) {
        for (std::size_t i = 0; i < n; ++i) {
            terms[i] = lw[i] + per_expert_logprobs[i * vocab + v];
        }
        out.log_probs[v] = log_sum_exp(terms);
    }

    out.next = state;
    for (std::size_t i = 0; i < n; ++i) {
        out.next.cum_loglik[i] += per_expert_logprobs[i * vocab + static_cast<std::size_t>(observed)];
    }
    out.next.t += 1;
    return out;
}

std::size_t ExpertModel::vocab_size() const {
    return static_cast<std::size_t>(checkpoint_->config().vocab_size);
}

std::vector<double> ExpertModel::predictive_logprobs(std::span<const Token> tokens) const {
    return hetforest::predictive_logprobs(checkpoint_->params, tokens);
}

SequenceScore sequence_nll(const ModelSet& experts, const DomainPrior& prior, std::span<const Token> tokens) {
    if (tokens.empty()) {
        throw Error(ErrorCode::EmptyEval, "cannot score an empty sequence");
    }
    PosteriorState state = init_posterior(experts.size(), prior);
    const std::size_t vocab = experts.front()->vocab_size();
    for (const auto* e : experts) {
        if (e->vocab_size() != vocab) {
            throw Error(ErrorCode::DimensionMismatch, "experts disagree on vocabulary size");
        }
    }
    for (Token tok : tokens) {
        check_token(tok, vocab);
    }

    const std::size_t n = experts.size();
    std::vector<std::vector<double>> rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        rows[i] = experts[i]->predictive_logprobs(tokens);
    }

    SequenceScore score;
    score.token_nll.reserve(tokens.size());
    score.posterior_trace.reserve(tokens.size());
    std::vector<double> slab(n * vocab);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(rows[i].begin() + static_cast<std::ptrdiff_t>(t * vocab), vocab,
                        slab.begin() + static_cast<std::ptrdiff_t>(i * vocab));
        }
        score.posterior_trace.push_back(posterior_weights(state));
        auto s = step(state, slab, vocab, tokens[t]);
        const double nll = -s.log_probs[static_cast<std::size_t>(tokens[t])];
        score.token_nll.push_back(nll);
        score.total_nll += nll;
        state = std::move(s.next);
    }
    return score;
}

double perplexity(const ModelSet& experts, const DomainPrior& prior, std::span<const Token> tokens) {
    if (tokens.empty()) {
        throw Error(ErrorCode::EmptyEval, "cannot compute perplexity of an empty sequence");
    }
    const auto score = sequence_nll(experts, prior, tokens);
    return std::exp(score.total_nll / static_cast<double>(tokens.size()));
}

double corpus_perplexity(const ModelSet& experts, const DomainPrior& prior,
                         const std::vector<std::span<const Token>>& docs, bool reset_per_document) {
    double nll = 0.0;
    std::size_t count = 0;
    if (reset_per_document) {
        for (const auto& d : docs) {
            if (d.empty()) {
                continue;
            }
            nll += sequence_nll(experts, prior, d).total_nll;
            count += d.size();
        }
    } else {
        std::vector<Token> all;
        for (const auto& d : docs) {
            all.insert(all.end(), d.begin(), d.end());
        }
        if (!all.empty()) {
            nll = sequence_nll(experts, prior, all).total_nll;
            count = all.size();
        }
    }
    if (count == 0) {
        throw Error(ErrorCode::EmptyEval, "no evaluation tokens");
    }
    return std::exp(nll / static_cast<double>(count));
}

std::string posterior_trace_csv(const SequenceScore& score, const std::vector<std::string>& expert_names) {
    std::string out = "t";
    for (const auto& name : expert_names) {
        out += ',' + name;
    }
    out += '\n';
    char buf[32];
    for (std::size_t t = 0; t < score.posterior_trace.size(); ++t) {
        const auto& w = score.posterior_trace[t];
        if (w.size() != expert_names.size()) {
            throw Error(ErrorCode::DimensionMismatch, "trace width does not match expert names");
        }
        out += std::to_string(t);
        for (double v : w) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

}  // namespace hetforest
