// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// A small Llama-style decoder: pre-norm RMSNorm, rotary position embeddings,
// SwiGLU feed-forward, tied input/output embeddings. Forward and backward
// passes are written out by hand; the same code runs in float (training and
// inference) and double (gradient checks).

#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hetforest/corpus.hpp"
#include "hetforest/error.hpp"
#include "hetforest/types.hpp"

namespace hetforest {

struct ExpertConfig {
    int hidden_size = 64;
    int intermediate_size = 192;
    int num_heads = 2;
    int num_layers = 2;
    int vocab_size = kByteVocab;
    int seq_len = 128;
    std::optional<Tier> tier;  // nullopt: shared across tiers (homogeneous seed)

    double init_std = 0.02;
    double rope_theta = 10000.0;
    double norm_eps = 1e-5;

    void validate() const;
    int head_dim() const noexcept { return hidden_size / num_heads; }

    /// Equal shapes and numerics, ignoring the tier label.
    bool same_architecture(const ExpertConfig& other) const noexcept;
    bool operator==(const ExpertConfig&) const = default;
};

/// Elements of one transformer layer excluding norms (the quantity the model
/// size column of the seed-model table counts, per layer).
std::int64_t layer_matrix_params(const ExpertConfig& config) noexcept;
/// Closed-form parameter count for the full model (embeddings counted once: tied head).
std::int64_t param_count(const ExpertConfig& config) noexcept;

struct TensorInfo {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::size_t size() const noexcept { return rows * cols; }
};

/// Flat parameter layout, in checkpoint order:
///   tok_embedding [vocab x hidden]
///   for each layer l:
///     layers.l.attn_norm [hidden]
///     layers.l.wq, wk, wv, wo [hidden x hidden]
///     layers.l.ffn_norm [hidden]
///     layers.l.w_gate, w_up [hidden x intermediate]
///     layers.l.w_down [intermediate x hidden]
///   final_norm [hidden]
/// Matrices act on row vectors (y = x W), so W is stored [in x out].
class ParamLayout {
public:
    struct Layer {
        std::size_t attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down;
    };

    explicit ParamLayout(const ExpertConfig& config);

    std::size_t total() const noexcept { return total_; }
    const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
    const Layer& layer(std::size_t l) const { return layers_.at(l); }
    std::size_t embedding() const noexcept { return 0; }
    std::size_t final_norm() const noexcept { return final_norm_; }

private:
    std::vector<TensorInfo> tensors_;
    std::vector<Layer> layers_;
    std::size_t final_norm_ = 0;
    std::size_t total_ = 0;
};

template <typename T>
struct ModelParams {
    ExpertConfig config;
    std::vector<T> values;

    std::size_t size() const noexcept { return values.size(); }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out{config, {}};
        out.values.assign(values.begin(), values.end());
        return out;
    }
    bool operator==(const ModelParams&) const = default;
};

/// Scaled-normal init (output projections additionally scaled by 1/sqrt(2*layers)),
/// norm gains exactly 1. Deterministic in (config, seed).
template <typename T>
ModelParams<T> init_model(const ExpertConfig& config, std::uint64_t rng_seed);

/// Logits for a batch of equal-length sequences, returned [batch*seq x vocab].
template <typename T>
std::vector<T> forward(const ModelParams<T>& params, std::span<const Token> tokens, std::size_t batch,
                       std::size_t seq);

/// Mean next-token cross-entropy over every (sequence, position) of the batch;
/// grads is resized to the parameter count and overwritten.
template <typename T>
T loss_and_grad(const ModelParams<T>& params, const Batch& batch, std::vector<T>& grads);

/// Forward-only loss.
template <typename T>
T batch_loss(const ModelParams<T>& params, const Batch& batch);

/// log p(. | context) over the vocabulary, computed in double from the logits.
/// An empty context is fed as a lone BOS token.
std::vector<double> next_token_logprobs(const ModelParams<float>& params, std::span<const Token> context);

/// Row t holds log p(. | x_<t) for every position of `tokens`, row-major
/// [tokens.size() x vocab]. Contexts longer than seq_len are truncated to the
/// most recent seq_len tokens; row 0 conditions on BOS only.
std::vector<double> predictive_logprobs(const ModelParams<float>& params, std::span<const Token> tokens);

struct TrainSchedule {
    int total_steps = 600;
    int warmup_steps = 50;
    double max_lr = 5e-4;
    double min_lr = 5e-5;
    int batch_tokens = 1024;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    double weight_decay = 0.0;

    void validate() const;
    bool operator==(const TrainSchedule&) const = default;
};

/// Linear warm-up from 0 to max_lr, then cosine annealing down to min_lr at total_steps.
double lr_at(int step, const TrainSchedule& schedule);

struct LineageEntry {
    int iteration = 0;
    std::string domain;
    std::string parent_id;
    bool operator==(const LineageEntry&) const = default;
};

struct ExpertCheckpoint {
    ModelParams<float> params;
    int step = 0;
    std::vector<LineageEntry> lineage;
    std::string id;

    const ExpertConfig& config() const noexcept { return params.config; }
};

/// Wrap parameters into a checkpoint and stamp its content id.
ExpertCheckpoint make_checkpoint(ModelParams<float> params, int step, std::vector<LineageEntry> lineage);

/// Adam with bias correction, optional decoupled weight decay and global-norm clipping.
template <typename T>
class AdamOptimizer {
public:
    AdamOptimizer(std::size_t n, const TrainSchedule& schedule);

    /// Clips grads in place; returns the pre-clip global norm.
    double step(std::span<T> params, std::span<T> grads, double lr);

private:
    TrainSchedule schedule_;
    std::vector<T> m_;
    std::vector<T> v_;
    long t_ = 0;
};

struct TrainOptions {
    /// Appended to the lineage (with parent = start checkpoint id); nullopt for pretraining.
    std::optional<LineageEntry> record;
    /// Tier stamped into the produced checkpoints' config.
    std::optional<Tier> tier;
    /// Optional per-step loss sink.
    std::vector<double>* loss_log = nullptr;
};

/// Runs Adam for schedule.total_steps steps, emitting a checkpoint at every
/// requested step and at the final step (sorted by step).
std::vector<ExpertCheckpoint> train(const ExpertCheckpoint& start, BatchIterator& data,
                                    const TrainSchedule& schedule, const std::set<int>& checkpoint_steps,
                                    const TrainOptions& options = {});

/// Thrown by train() on divergence; carries the last finite-loss checkpoint.
class NonFiniteLossError : public Error {
public:
    NonFiniteLossError(int failed_step, ExpertCheckpoint last_good);
    int failed_step() const noexcept { return failed_step_; }
    const ExpertCheckpoint& last_good() const noexcept { return last_good_; }

private:
    int failed_step_;
    ExpertCheckpoint last_good_;
};

}  // namespace hetforest
