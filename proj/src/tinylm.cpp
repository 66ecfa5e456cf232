// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "hetforest/checkpoint.hpp"
#include "hetforest/kernels.hpp"
#include "hetforest/rng.hpp"

namespace hetforest {

void ExpertConfig::validate() const {
    std::ostringstream why;
    if (hidden_size <= 0 || intermediate_size <= 0 || num_heads <= 0 || num_layers <= 0 || vocab_size <= 0 ||
        seq_len <= 0) {
        why << "all sizes must be positive";
    } else if (hidden_size % num_heads != 0) {
        why << "hidden_size " << hidden_size << " not divisible by num_heads " << num_heads;
    } else if (head_dim() % 2 != 0) {
        why << "head_dim " << head_dim() << " must be even for rotary embeddings";
    } else if (intermediate_size < hidden_size) {
        why << "intermediate_size " << intermediate_size << " below hidden_size " << hidden_size;
    } else if (vocab_size < kByteVocab) {
        why << "vocab_size must cover the byte vocabulary (" << kByteVocab << ")";
    } else if (!(init_std > 0.0) || !(rope_theta > 0.0) || !(norm_eps > 0.0)) {
        why << "init_std, rope_theta and norm_eps must be positive";
    }
    if (!why.str().empty()) {
        throw Error(ErrorCode::InvalidConfig, why.str());
    }
}

bool ExpertConfig::same_architecture(const ExpertConfig& other) const noexcept {
    ExpertConfig a = *this;
    ExpertConfig b = other;
    a.tier.reset();
    b.tier.reset();
    return a == b;
}

std::int64_t layer_matrix_params(const ExpertConfig& c) noexcept {
    const std::int64_t h = c.hidden_size;
    const std::int64_t i = c.intermediate_size;
    return 4 * h * h + 3 * h * i;
}

std::int64_t param_count(const ExpertConfig& c) noexcept {
    const std::int64_t h = c.hidden_size;
    return static_cast<std::int64_t>(c.vocab_size) * h + c.num_layers * (2 * h + layer_matrix_params(c)) + h;
}

ParamLayout::ParamLayout(const ExpertConfig& config) {
    const auto h = static_cast<std::size_t>(config.hidden_size);
    const auto im = static_cast<std::size_t>(config.intermediate_size);
    auto add = [&](std::string name, std::size_t rows, std::size_t cols) {
        tensors_.push_back({std::move(name), total_, rows, cols});
        total_ += rows * cols;
        return tensors_.back().offset;
    };
    add("tok_embedding", static_cast<std::size_t>(config.vocab_size), h);
    for (int l = 0; l < config.num_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Layer layer{};
        layer.attn_norm = add(p + "attn_norm", h, 1);
        layer.wq = add(p + "wq", h, h);
        layer.wk = add(p + "wk", h, h);
        layer.wv = add(p + "wv", h, h);
        layer.wo = add(p + "wo", h, h);
        layer.ffn_norm = add(p + "ffn_norm", h, 1);
        layer.w_gate = add(p + "w_gate", h, im);
        layer.w_up = add(p + "w_up", h, im);
        layer.w_down = add(p + "w_down", im, h);
        layers_.push_back(layer);
    }
    final_norm_ = add("final_norm", h, 1);
}

template <typename T>
ModelParams<T> init_model(const ExpertConfig& config, std::uint64_t rng_seed) {
    config.validate();
    const ParamLayout layout(config);
    ModelParams<T> params{config, std::vector<T>(layout.total())};
    Rng rng(rng_seed);
    const double proj_scale = 1.0 / std::sqrt(2.0 * config.num_layers);
    for (const auto& t : layout.tensors()) {
        auto* dst = params.values.data() + t.offset;
        const bool is_norm = t.cols == 1;
        const bool is_output_proj = t.name.ends_with(".wo") || t.name.ends_with(".w_down");
        const double std = config.init_std * (is_output_proj ? proj_scale : 1.0);
        for (std::size_t i = 0; i < t.size(); ++i) {
            dst[i] = is_norm ? T(1) : static_cast<T>(std * standard_normal(rng));
        }
    }
    return params;
}

namespace {

template <typename T>
struct LayerCache {
    std::vector<T> x_in, inv_rms1, a, q, k, v, probs, attn, x_mid, inv_rms2, b, gate, up, act;
};

template <typename T>
struct Activations {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::size_t rows = 0;
    std::vector<Token> tokens;
    std::vector<LayerCache<T>> layers;
    std::vector<T> x_final, inv_rms_f, y, logits;
    std::vector<T> rope_cos, rope_sin;  // [seq x head_dim/2]
};

template <typename T>
void rmsnorm_forward(const T* x, const T* gain, T* out, T* inv_rms, std::size_t rows, std::size_t h, double eps) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * h;
        T ss = 0;
        for (std::size_t j = 0; j < h; ++j) {
            ss += xr[j] * xr[j];
        }
        const T inv = T(1) / std::sqrt(ss / static_cast<T>(h) + static_cast<T>(eps));
        inv_rms[r] = inv;
        T* o = out + r * h;
        for (std::size_t j = 0; j < h; ++j) {
            o[j] = xr[j] * inv * gain[j];
        }
    }
}

// dx += d(rmsnorm)/dx . dy ; dgain += dy * x * inv_rms
template <typename T>
void rmsnorm_backward(const T* x, const T* gain, const T* inv_rms, const T* dy, T* dx, T* dgain, std::size_t rows,
                      std::size_t h) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * h;
        const T* dyr = dy + r * h;
        T* dxr = dx + r * h;
        const T inv = inv_rms[r];
        T dot = 0;
        for (std::size_t j = 0; j < h; ++j) {
            dot += dyr[j] * gain[j] * xr[j];
        }
        const T coef = inv * inv * inv * dot / static_cast<T>(h);
        for (std::size_t j = 0; j < h; ++j) {
            dxr[j] += inv * gain[j] * dyr[j] - coef * xr[j];
            dgain[j] += dyr[j] * xr[j] * inv;
        }
    }
}

template <typename T>
void rope_tables(const ExpertConfig& c, std::size_t seq, std::vector<T>& cos_t, std::vector<T>& sin_t) {
    const std::size_t half = static_cast<std::size_t>(c.head_dim()) / 2;
    cos_t.resize(seq * half);
    sin_t.resize(seq * half);
    for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(c.rope_theta, -2.0 * static_cast<double>(i) / c.head_dim());
            const double angle = static_cast<double>(t) * freq;
            cos_t[t * half + i] = static_cast<T>(std::cos(angle));
            sin_t[t * half + i] = static_cast<T>(std::sin(angle));
        }
    }
}

// Rotates consecutive pairs of every head by the position angle; inverse=true
// applies the transpose rotation (used for gradients).
template <typename T>
void apply_rope(T* x, const Activations<T>& acts, std::size_t heads, std::size_t head_dim, bool inverse) {
    const std::size_t half = head_dim / 2;
    const std::size_t stride = heads * head_dim;
    for (std::size_t r = 0; r < acts.rows; ++r) {
        const std::size_t t = r % acts.seq;
        const T* cs = acts.rope_cos.data() + t * half;
        const T* sn = acts.rope_sin.data() + t * half;
        for (std::size_t hd = 0; hd < heads; ++hd) {
            T* v = x + r * stride + hd * head_dim;
            for (std::size_t i = 0; i < half; ++i) {
                const T x0 = v[2 * i];
                const T x1 = v[2 * i + 1];
                const T s = inverse ? -sn[i] : sn[i];
                v[2 * i] = x0 * cs[i] - x1 * s;
                v[2 * i + 1] = x0 * s + x1 * cs[i];
            }
        }
    }
}

template <typename T>
T silu(T g) {
    return g / (T(1) + std::exp(-g));
}

template <typename T>
void check_tokens(const ExpertConfig& c, std::span<const Token> tokens, std::size_t batch, std::size_t seq) {
    if (seq == 0 || batch == 0 || tokens.size() != batch * seq) {
        throw Error(ErrorCode::InvalidArgument, "token buffer does not match batch x seq");
    }
    if (seq > static_cast<std::size_t>(c.seq_len)) {
        throw Error(ErrorCode::SequenceTooLong,
                    "sequence length " + std::to_string(seq) + " exceeds seq_len " + std::to_string(c.seq_len));
    }
    for (Token t : tokens) {
        if (t < 0 || t >= c.vocab_size) {
            throw Error(ErrorCode::TokenOutOfRange, "token id " + std::to_string(t) + " outside vocabulary");
        }
    }
}

template <typename T>
void run_forward(const ModelParams<T>& params, const ParamLayout& layout, std::span<const Token> tokens,
                 std::size_t batch, std::size_t seq, Activations<T>& acts) {
    const ExpertConfig& c = params.config;
    check_tokens<T>(c, tokens, batch, seq);
    const auto h = static_cast<std::size_t>(c.hidden_size);
    const auto im = static_cast<std::size_t>(c.intermediate_size);
    const auto heads = static_cast<std::size_t>(c.num_heads);
    const auto hd = static_cast<std::size_t>(c.head_dim());
    const auto vocab = static_cast<std::size_t>(c.vocab_size);
    const std::size_t rows = batch * seq;
    const T* w = params.values.data();
    auto mat = [&](std::size_t offset, std::size_t n) { return std::span<const T>(w + offset, n); };

    acts.batch = batch;
    acts.seq = seq;
    acts.rows = rows;
    acts.tokens.assign(tokens.begin(), tokens.end());
    rope_tables(c, seq, acts.rope_cos, acts.rope_sin);
    acts.layers.resize(static_cast<std::size_t>(c.num_layers));

    std::vector<T> x(rows * h);
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(w + layout.embedding() + static_cast<std::size_t>(tokens[r]) * h, h, x.data() + r * h);
    }

    for (std::size_t l = 0; l < acts.layers.size(); ++l) {
        const auto& L = layout.layer(l);
        auto& lc = acts.layers[l];
        lc.x_in = x;
        lc.inv_rms1.resize(rows);
        lc.a.resize(rows * h);
        rmsnorm_forward(x.data(), w + L.attn_norm, lc.a.data(), lc.inv_rms1.data(), rows, h, c.norm_eps);

        lc.q.resize(rows * h);
        lc.k.resize(rows * h);
        lc.v.resize(rows * h);
        kernels::matmul<T>(lc.a, mat(L.wq, h * h), lc.q, rows, h, h);
        kernels::matmul<T>(lc.a, mat(L.wk, h * h), lc.k, rows, h, h);
        kernels::matmul<T>(lc.a, mat(L.wv, h * h), lc.v, rows, h, h);
        apply_rope(lc.q.data(), acts, heads, hd, false);
        apply_rope(lc.k.data(), acts, heads, hd, false);

        lc.attn.resize(rows * h);
        lc.probs.resize(batch * heads * seq * seq);
        kernels::attention_forward<T>(lc.q, lc.k, lc.v, lc.attn, lc.probs, batch, seq, heads, hd);
        kernels::matmul<T>(lc.attn, mat(L.wo, h * h), x, rows, h, h, /*accumulate=*/true);
        lc.x_mid = x;

        lc.inv_rms2.resize(rows);
        lc.b.resize(rows * h);
        rmsnorm_forward(x.data(), w + L.ffn_norm, lc.b.data(), lc.inv_rms2.data(), rows, h, c.norm_eps);
        lc.gate.resize(rows * im);
        lc.up.resize(rows * im);
        lc.act.resize(rows * im);
        kernels::matmul<T>(lc.b, mat(L.w_gate, h * im), lc.gate, rows, h, im);
        kernels::matmul<T>(lc.b, mat(L.w_up, h * im), lc.up, rows, h, im);
        for (std::size_t i = 0; i < rows * im; ++i) {
            lc.act[i] = silu(lc.gate[i]) * lc.up[i];
        }
        kernels::matmul<T>(lc.act, mat(L.w_down, im * h), x, rows, im, h, /*accumulate=*/true);
    }

    acts.x_final = x;
    acts.inv_rms_f.resize(rows);
    acts.y.resize(rows * h);
    rmsnorm_forward(x.data(), w + layout.final_norm(), acts.y.data(), acts.inv_rms_f.data(), rows, h, c.norm_eps);

    std::vector<T> emb_t(h * vocab);
    kernels::transpose<T>(mat(layout.embedding(), vocab * h), emb_t, vocab, h);
    acts.logits.resize(rows * vocab);
    kernels::matmul<T>(acts.y, emb_t, acts.logits, rows, h, vocab);
}

// Mean cross-entropy; when dlogits is non-null it receives d(loss)/d(logits).
template <typename T>
double cross_entropy(const std::vector<T>& logits, std::span<const Token> targets, std::size_t vocab,
                     std::vector<T>* dlogits) {
    const std::size_t rows = targets.size();
    if (dlogits) {
        dlogits->resize(rows * vocab);
    }
    double total = 0.0;
    const T inv_rows = T(1) / static_cast<T>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* lr = logits.data() + r * vocab;
        const T mx = *std::max_element(lr, lr + vocab);
        T sum = 0;
        for (std::size_t j = 0; j < vocab; ++j) {
            sum += std::exp(lr[j] - mx);
        }
        const T lse = mx + std::log(sum);
        total += static_cast<double>(lse - lr[static_cast<std::size_t>(targets[r])]);
        if (dlogits) {
            T* d = dlogits->data() + r * vocab;
            for (std::size_t j = 0; j < vocab; ++j) {
                d[j] = std::exp(lr[j] - lse) * inv_rows;
            }
            d[static_cast<std::size_t>(targets[r])] -= inv_rows;
        }
    }
    return total / static_cast<double>(rows);
}

template <typename T>
void run_backward(const ModelParams<T>& params, const ParamLayout& layout, const Activations<T>& acts,
                  std::vector<T>& dlogits, std::vector<T>& grads) {
    const ExpertConfig& c = params.config;
    const auto h = static_cast<std::size_t>(c.hidden_size);
    const auto im = static_cast<std::size_t>(c.intermediate_size);
    const auto heads = static_cast<std::size_t>(c.num_heads);
    const auto hd = static_cast<std::size_t>(c.head_dim());
    const auto vocab = static_cast<std::size_t>(c.vocab_size);
    const std::size_t rows = acts.rows;
    const T* w = params.values.data();
    T* g = grads.data();
    auto mat = [&](std::size_t offset, std::size_t n) { return std::span<const T>(w + offset, n); };
    auto gmat = [&](std::size_t offset, std::size_t n) { return std::span<T>(g + offset, n); };

    // Output head (tied to the embedding).
    kernels::matmul_at_b<T>(dlogits, acts.y, gmat(layout.embedding(), vocab * h), rows, vocab, h);
    std::vector<T> dy(rows * h);
    kernels::matmul<T>(dlogits, mat(layout.embedding(), vocab * h), dy, rows, vocab, h);

    std::vector<T> dx(rows * h, T(0));
    rmsnorm_backward(acts.x_final.data(), w + layout.final_norm(), acts.inv_rms_f.data(), dy.data(), dx.data(),
                     g + layout.final_norm(), rows, h);

    std::vector<T> wt;         // transposed weight scratch
    std::vector<T> dact(rows * im), dgate(rows * im), dup(rows * im);
    std::vector<T> db(rows * h), dattn(rows * h), dq(rows * h), dk(rows * h), dv(rows * h), da(rows * h);

    for (std::size_t li = acts.layers.size(); li-- > 0;) {
        const auto& L = layout.layer(li);
        const auto& lc = acts.layers[li];

        // Feed-forward block: x_out = x_mid + act . W_down
        wt.resize(h * im);
        kernels::transpose<T>(mat(L.w_down, im * h), wt, im, h);
        kernels::matmul<T>(dx, wt, dact, rows, h, im);
        kernels::matmul_at_b<T>(lc.act, dx, gmat(L.w_down, im * h), rows, im, h);
        for (std::size_t i = 0; i < rows * im; ++i) {
            const T gt = lc.gate[i];
            const T sig = T(1) / (T(1) + std::exp(-gt));
            const T s = gt * sig;
            dup[i] = dact[i] * s;
            dgate[i] = dact[i] * lc.up[i] * sig * (T(1) + gt * (T(1) - sig));
        }
        kernels::matmul_at_b<T>(lc.b, dgate, gmat(L.w_gate, h * im), rows, h, im);
        kernels::matmul_at_b<T>(lc.b, dup, gmat(L.w_up, h * im), rows, h, im);
        kernels::transpose<T>(mat(L.w_gate, h * im), wt, h, im);
        kernels::matmul<T>(dgate, wt, db, rows, im, h);
        kernels::transpose<T>(mat(L.w_up, h * im), wt, h, im);
        kernels::matmul<T>(dup, wt, db, rows, im, h, /*accumulate=*/true);
        rmsnorm_backward(lc.x_mid.data(), w + L.ffn_norm, lc.inv_rms2.data(), db.data(), dx.data(),
                         g + L.ffn_norm, rows, h);

        // Attention block: x_mid = x_in + attn . W_o
        wt.resize(h * h);
        kernels::transpose<T>(mat(L.wo, h * h), wt, h, h);
        kernels::matmul<T>(dx, wt, dattn, rows, h, h);
        kernels::matmul_at_b<T>(lc.attn, dx, gmat(L.wo, h * h), rows, h, h);
        kernels::attention_backward<T>(lc.q, lc.k, lc.v, lc.probs, dattn, dq, dk, dv, acts.batch, acts.seq, heads,
                                       hd);
        apply_rope(dq.data(), acts, heads, hd, true);
        apply_rope(dk.data(), acts, heads, hd, true);
        kernels::matmul_at_b<T>(lc.a, dq, gmat(L.wq, h * h), rows, h, h);
        kernels::matmul_at_b<T>(lc.a, dk, gmat(L.wk, h * h), rows, h, h);
        kernels::matmul_at_b<T>(lc.a, dv, gmat(L.wv, h * h), rows, h, h);
        kernels::transpose<T>(mat(L.wq, h * h), wt, h, h);
        kernels::matmul<T>(dq, wt, da, rows, h, h);
        kernels::transpose<T>(mat(L.wk, h * h), wt, h, h);
        kernels::matmul<T>(dk, wt, da, rows, h, h, true);
        kernels::transpose<T>(mat(L.wv, h * h), wt, h, h);
        kernels::matmul<T>(dv, wt, da, rows, h, h, true);
        rmsnorm_backward(lc.x_in.data(), w + L.attn_norm, lc.inv_rms1.data(), da.data(), dx.data(),
                         g + L.attn_norm, rows, h);
    }

    for (std::size_t r = 0; r < rows; ++r) {
        T* ge = g + layout.embedding() + static_cast<std::size_t>(acts.tokens[r]) * h;
        const T* dr = dx.data() + r * h;
        for (std::size_t j = 0; j < h; ++j) {
            ge[j] += dr[j];
        }
    }
}

}  // namespace

template <typename T>
std::vector<T> forward(const ModelParams<T>& params, std::span<const Token> tokens, std::size_t batch,
                       std::size_t seq) {
    const ParamLayout layout(params.config);
    Activations<T> acts;
    run_forward(params, layout, tokens, batch, seq, acts);
    return std::move(acts.logits);
}

template <typename T>
T loss_and_grad(const ModelParams<T>& params, const Batch& batch, std::vector<T>& grads) {
    const ParamLayout layout(params.config);
    Activations<T> acts;
    run_forward(params, layout, batch.inputs, batch.batch_size, batch.seq_len, acts);
    std::vector<T> dlogits;
    const double loss = cross_entropy(acts.logits, batch.targets,
                                      static_cast<std::size_t>(params.config.vocab_size), &dlogits);
    grads.assign(layout.total(), T(0));
    if (!std::isfinite(loss)) {
        return static_cast<T>(loss);
    }
    run_backward(params, layout, acts, dlogits, grads);
    return static_cast<T>(loss);
}

template <typename T>
T batch_loss(const ModelParams<T>& params, const Batch& batch) {
    const auto logits = forward(params, batch.inputs, batch.batch_size, batch.seq_len);
    return static_cast<T>(
        cross_entropy<T>(logits, batch.targets, static_cast<std::size_t>(params.config.vocab_size), nullptr));
}

namespace {

void log_softmax_row(const float* logits, std::size_t vocab, double* out) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) {
        mx = std::max(mx, static_cast<double>(logits[j]));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
        sum += std::exp(static_cast<double>(logits[j]) - mx);
    }
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < vocab; ++j) {
        out[j] = static_cast<double>(logits[j]) - lse;
    }
}

}  // namespace

std::vector<double> next_token_logprobs(const ModelParams<float>& params, std::span<const Token> context) {
    const auto vocab = static_cast<std::size_t>(params.config.vocab_size);
    const Token bos[1] = {kBos};
    const std::span<const Token> input = context.empty() ? std::span<const Token>(bos) : context;
    if (input.size() > static_cast<std::size_t>(params.config.seq_len)) {
        throw Error(ErrorCode::SequenceTooLong, "context of " + std::to_string(context.size()) +
                                                    " tokens exceeds seq_len " +
                                                    std::to_string(params.config.seq_len));
    }
    const auto logits = forward(params, input, 1, input.size());
    std::vector<double> out(vocab);
    log_softmax_row(logits.data() + (input.size() - 1) * vocab, vocab, out.data());
    return out;
}

std::vector<double> predictive_logprobs(const ModelParams<float>& params, std::span<const Token> tokens) {
    const auto vocab = static_cast<std::size_t>(params.config.vocab_size);
    const auto window = static_cast<std::size_t>(params.config.seq_len);
    const std::size_t n = tokens.size();
    std::vector<double> out(n * vocab);
    if (n == 0) {
        return out;
    }
    const auto first = next_token_logprobs(params, {});
    std::copy(first.begin(), first.end(), out.begin());

    // Positions 1..prefix share one causal pass over the leading tokens.
    const std::size_t prefix = std::min(n - 1, window);
    if (prefix > 0) {
        const auto logits = forward(params, tokens.first(prefix), 1, prefix);
        for (std::size_t t = 1; t <= prefix; ++t) {
            log_softmax_row(logits.data() + (t - 1) * vocab, vocab, out.data() + t * vocab);
        }
    }
    for (std::size_t t = prefix + 1; t < n; ++t) {
        const auto logits = forward(params, tokens.subspan(t - window, window), 1, window);
        log_softmax_row(logits.data() + (window - 1) * vocab, vocab, out.data() + t * vocab);
    }
    return out;
}

void TrainSchedule::validate() const {
    std::ostringstream why;
    if (total_steps < 0 || warmup_steps < 0) {
        why << "step counts must be non-negative";
    } else if (total_steps > 0 && warmup_steps >= total_steps) {
        why << "warmup_steps " << warmup_steps << " must be below total_steps " << total_steps;
    } else if (total_steps == 0 && warmup_steps != 0) {
        why << "an empty schedule cannot have warm-up";
    } else if (!(min_lr > 0.0) || !(min_lr <= max_lr)) {
        why << "need 0 < min_lr <= max_lr";
    } else if (batch_tokens <= 0) {
        why << "batch_tokens must be positive";
    } else if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
        why << "invalid Adam hyper-parameters";
    } else if (!(grad_clip > 0.0) || weight_decay < 0.0) {
        why << "grad_clip must be positive and weight_decay non-negative";
    }
    if (!why.str().empty()) {
        throw Error(ErrorCode::InvalidConfig, why.str());
    }
}

double lr_at(int step, const TrainSchedule& s) {
    if (step < 0 || step > s.total_steps) {
        throw Error(ErrorCode::StepOutOfRange,
                    "step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) + "]");
    }
    if (s.total_steps == 0) {
        return 0.0;
    }
    if (step < s.warmup_steps) {
        return s.max_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    }
    const double progress =
        static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
    return s.min_lr + (s.max_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ExpertCheckpoint make_checkpoint(ModelParams<float> params, int step, std::vector<LineageEntry> lineage) {
    ExpertCheckpoint ck{std::move(params), step, std::move(lineage), {}};
    ck.id = compute_checkpoint_id(ck);
    return ck;
}

template <typename T>
AdamOptimizer<T>::AdamOptimizer(std::size_t n, const TrainSchedule& schedule)
    : schedule_(schedule), m_(n, T(0)), v_(n, T(0)) {}

template <typename T>
double AdamOptimizer<T>::step(std::span<T> params, std::span<T> grads, double lr) {
    double sq = 0.0;
    for (T g : grads) {
        sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        return norm;
    }
    if (norm > schedule_.grad_clip) {
        const T scale = static_cast<T>(schedule_.grad_clip / norm);
        for (T& g : grads) {
            g *= scale;
        }
    }
    ++t_;
    const T b1 = static_cast<T>(schedule_.beta1);
    const T b2 = static_cast<T>(schedule_.beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(schedule_.beta1, static_cast<double>(t_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(schedule_.beta2, static_cast<double>(t_)));
    const T step_lr = static_cast<T>(lr);
    const T eps = static_cast<T>(schedule_.adam_eps);
    const T decay = static_cast<T>(lr * schedule_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        m_[i] = b1 * m_[i] + (T(1) - b1) * g;
        v_[i] = b2 * v_[i] + (T(1) - b2) * g * g;
        const T mhat = m_[i] / bc1;
        const T vhat = v_[i] / bc2;
        params[i] -= step_lr * mhat / (std::sqrt(vhat) + eps) + decay * params[i];
    }
    return norm;
}

NonFiniteLossError::NonFiniteLossError(int failed_step, ExpertCheckpoint last_good)
    : Error(ErrorCode::NonFiniteLoss, "training diverged at step " + std::to_string(failed_step)),
      failed_step_(failed_step),
      last_good_(std::move(last_good)) {}

std::vector<ExpertCheckpoint> train(const ExpertCheckpoint& start, BatchIterator& data,
                                    const TrainSchedule& schedule, const std::set<int>& checkpoint_steps,
                                    const TrainOptions& options) {
    schedule.validate();
    if (!checkpoint_steps.empty() && (*checkpoint_steps.begin() < 0 || *checkpoint_steps.rbegin() > schedule.total_steps)) {
        throw Error(ErrorCode::StepOutOfRange, "checkpoint steps must lie within [0, total_steps]");
    }
    if (data.seq_len() > static_cast<std::size_t>(start.config().seq_len)) {
        throw Error(ErrorCode::SequenceTooLong, "batch sequence length exceeds the model's seq_len");
    }

    std::vector<LineageEntry> lineage = start.lineage;
    if (options.record) {
        LineageEntry rec = *options.record;
        rec.parent_id = start.id;
        lineage.push_back(std::move(rec));
    }
    ModelParams<float> params = start.params;
    if (options.tier) {
        params.config.tier = options.tier;
    }

    std::set<int> emit = checkpoint_steps;
    emit.insert(schedule.total_steps);
    std::vector<ExpertCheckpoint> out;
    if (emit.count(0)) {
        out.push_back(make_checkpoint(params, 0, lineage));
    }

    AdamOptimizer<float> opt(params.size(), schedule);
    std::vector<float> grads;
    for (int s = 1; s <= schedule.total_steps; ++s) {
        const Batch batch = data.next();
        const float loss = loss_and_grad(params, batch, grads);
        if (!std::isfinite(loss)) {
            throw NonFiniteLossError(s, make_checkpoint(params, s - 1, lineage));
        }
        const double norm = opt.step(params.values, grads, lr_at(s, schedule));
        if (!std::isfinite(norm)) {
            throw NonFiniteLossError(s, make_checkpoint(params, s - 1, lineage));
        }
        if (options.loss_log) {
            options.loss_log->push_back(loss);
        }
        if (emit.count(s)) {
            out.push_back(make_checkpoint(params, s, lineage));
        }
    }
    return out;
}

template ModelParams<float> init_model<float>(const ExpertConfig&, std::uint64_t);
template ModelParams<double> init_model<double>(const ExpertConfig&, std::uint64_t);
template std::vector<float> forward<float>(const ModelParams<float>&, std::span<const Token>, std::size_t,
                                           std::size_t);
template std::vector<double> forward<double>(const ModelParams<double>&, std::span<const Token>, std::size_t,
                                             std::size_t);
template float loss_and_grad<float>(const ModelParams<float>&, const Batch&, std::vector<float>&);
template double loss_and_grad<double>(const ModelParams<double>&, const Batch&, std::vector<double>&);
template float batch_loss<float>(const ModelParams<float>&, const Batch&);
template double batch_loss<double>(const ModelParams<double>&, const Batch&);
template class AdamOptimizer<float>;
template class AdamOptimizer<double>;

}  // namespace hetforest
