// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "hetforest/ensemble.hpp"
#include "hetforest/kernels.hpp"
#include "hetforest/tinylm.hpp"
#include "support.hpp"

using namespace hetforest;

namespace {

ExpertConfig micro_config() {
    ExpertConfig c;
    c.hidden_size = 8;
    c.intermediate_size = 12;
    c.num_heads = 2;
    c.num_layers = 2;
    c.seq_len = 8;
    c.init_std = 0.4;
    return c;
}

Batch random_batch(Rng& rng, std::size_t batch, std::size_t seq, int vocab) {
    Batch b;
    b.batch_size = batch;
    b.seq_len = seq;
    b.inputs = hetforest::testing::random_tokens(rng, batch * seq, vocab);
    b.targets = hetforest::testing::random_tokens(rng, batch * seq, vocab);
    return b;
}

std::string param_class(const std::string& tensor) {
    const auto dot = tensor.rfind('.');
    return dot == std::string::npos ? tensor : tensor.substr(dot + 1);
}

}  // namespace

TEST(ExpertConfig, ParamCountMatchesLayout) {
    for (auto c : {ExpertConfig{}, micro_config()}) {
        EXPECT_EQ(param_count(c), static_cast<std::int64_t>(ParamLayout(c).total()));
    }
    ExpertConfig desk;
    EXPECT_EQ(param_count(desk), 123392);
    EXPECT_EQ(layer_matrix_params(desk), 4 * 64 * 64 + 3 * 64 * 192);
}

TEST(ExpertConfig, Validation) {
    auto c = micro_config();
    c.num_heads = 3;
    EXPECT_THROW(c.validate(), Error);
    c = micro_config();
    c.hidden_size = 6;
    c.num_heads = 2;
    EXPECT_THROW(c.validate(), Error);  // odd head_dim
    c = micro_config();
    c.vocab_size = 100;
    EXPECT_THROW(c.validate(), Error);
    EXPECT_NO_THROW(micro_config().validate());
}

TEST(InitModel, DeterministicAndNormsAreOne) {
    const auto c = micro_config();
    const auto a = init_model<float>(c, 9);
    const auto b = init_model<float>(c, 9);
    EXPECT_EQ(a, b);
    EXPECT_NE(a.values, init_model<float>(c, 10).values);
    const ParamLayout layout(c);
    for (const auto& t : layout.tensors()) {
        if (param_class(t.name).find("norm") != std::string::npos) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                EXPECT_EQ(a.values[t.offset + i], 1.0f);
            }
        }
    }
}

// Central finite differences in double on a model small enough to check
// every single parameter.
TEST(Gradient, FiniteDifferenceEveryParameterClass) {
    const auto config = micro_config();
    auto params = init_model<double>(config, 4);
    Rng rng(8);
    // Move norm gains away from 1 so their gradients are exercised in general position.
    const ParamLayout layout(config);
    for (const auto& t : layout.tensors()) {
        if (param_class(t.name).find("norm") != std::string::npos) {
            for (std::size_t i = 0; i < t.size(); ++i) {
                params.values[t.offset + i] = 1.0 + 0.3 * standard_normal(rng);
            }
        }
    }
    ASSERT_LE(params.size(), 10000u);
    const Batch batch = random_batch(rng, 2, 6, config.vocab_size);

    std::vector<double> grads;
    loss_and_grad(params, batch, grads);
    ASSERT_EQ(grads.size(), params.size());

    const double h = 1e-5;
    std::map<std::string, std::pair<double, double>> class_norms;  // (|diff|^2, |grad|^2)
    double worst = 0.0;
    std::string worst_name;
    for (const auto& t : layout.tensors()) {
        auto& acc = class_norms[param_class(t.name)];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const std::size_t idx = t.offset + i;
            const double saved = params.values[idx];
            params.values[idx] = saved + h;
            const double up = batch_loss(params, batch);
            params.values[idx] = saved - h;
            const double down = batch_loss(params, batch);
            params.values[idx] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double diff = std::abs(numeric - grads[idx]);
            const double scale = std::max({std::abs(numeric), std::abs(grads[idx]), 1e-6});
            if (diff / scale > worst) {
                worst = diff / scale;
                worst_name = t.name + "[" + std::to_string(i) + "]";
            }
            acc.first += diff * diff;
            acc.second += grads[idx] * grads[idx];
        }
    }
    EXPECT_LT(worst, 1e-4) << worst_name;
    for (const char* cls : {"tok_embedding", "attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up",
                            "w_down", "final_norm"}) {
        ASSERT_TRUE(class_norms.count(cls)) << cls;
        const auto [d2, g2] = class_norms[cls];
        EXPECT_GT(g2, 0.0) << cls;
        EXPECT_LT(std::sqrt(d2 / g2), 1e-4) << cls;
    }
}

TEST(Gradient, LossMatchesForwardCrossEntropy) {
    const auto config = micro_config();
    const auto params = init_model<double>(config, 2);
    Rng rng(1);
    const Batch batch = random_batch(rng, 3, 5, config.vocab_size);
    const auto logits = forward(params, batch.inputs, batch.batch_size, batch.seq_len);
    const std::size_t V = static_cast<std::size_t>(config.vocab_size);
    double total = 0.0;
    for (std::size_t r = 0; r < batch.inputs.size(); ++r) {
        const std::span<const double> row(logits.data() + r * V, V);
        total += log_sum_exp(row) - row[static_cast<std::size_t>(batch.targets[r])];
    }
    EXPECT_NEAR(batch_loss(params, batch), total / static_cast<double>(batch.inputs.size()), 1e-12);
}

TEST(Forward, Causal) {
    const auto config = micro_config();
    const auto params = init_model<float>(config, 3);
    Rng rng(2);
    const std::size_t seq = 8, V = static_cast<std::size_t>(config.vocab_size);
    const auto tokens = hetforest::testing::random_tokens(rng, seq, 256);
    const auto base = forward(params, tokens, 1, seq);
    for (std::size_t j = 0; j < seq; ++j) {
        auto changed = tokens;
        changed[j] = (changed[j] + 17) % 256;
        const auto out = forward(params, changed, 1, seq);
        for (std::size_t p = 0; p < j; ++p) {
            for (std::size_t v = 0; v < V; ++v) {
                ASSERT_EQ(out[p * V + v], base[p * V + v]) << "position " << p << " saw token " << j;
            }
        }
        bool moved = false;
        for (std::size_t v = 0; v < V; ++v) {
            moved = moved || out[j * V + v] != base[j * V + v];
        }
        EXPECT_TRUE(moved);
    }
}

TEST(Forward, ThreadCountInvariant) {
    ExpertConfig c;
    const auto params = init_model<float>(c, 5);
    Rng rng(4);
    const auto tokens = hetforest::testing::random_tokens(rng, 2 * 64, 256);
    const auto ref = forward(params, tokens, 2, 64);
    kernels::set_kernel_threads(3);
    const auto par = forward(params, tokens, 2, 64);
    kernels::set_kernel_threads(1);
    EXPECT_EQ(ref, par);
}

TEST(Predictive, RowsMatchIncrementalContexts) {
    const auto config = micro_config();
    const auto params = init_model<float>(config, 6);
    Rng rng(5);
    const auto tokens = hetforest::testing::random_tokens(rng, 12, 256);  // longer than seq_len
    const auto rows = predictive_logprobs(params, tokens);
    const std::size_t V = static_cast<std::size_t>(config.vocab_size);
    ASSERT_EQ(rows.size(), tokens.size() * V);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const std::span<const double> row(rows.data() + t * V, V);
        EXPECT_NEAR(log_sum_exp(row), 0.0, 1e-9);
        const std::size_t begin = t > static_cast<std::size_t>(config.seq_len)
                                      ? t - static_cast<std::size_t>(config.seq_len)
                                      : 0;
        const auto direct =
            next_token_logprobs(params, std::span<const Token>(tokens.data() + begin, t - begin));
        for (std::size_t v = 0; v < V; ++v) {
            ASSERT_NEAR(row[v], direct[v], 1e-5) << "t=" << t;
        }
    }
}

TEST(Schedule, Endpoints) {
    TrainSchedule s;
    s.total_steps = 600;
    s.warmup_steps = 50;
    s.max_lr = 5e-3;
    s.min_lr = s.max_lr / 10.0;
    EXPECT_NEAR(lr_at(0, s), 0.0, 1e-12);
    EXPECT_NEAR(lr_at(50, s), 5e-3, 1e-12);
    EXPECT_NEAR(lr_at(600, s), 5e-4, 1e-12);
    EXPECT_NEAR(lr_at(25, s), 2.5e-3, 1e-12);
    EXPECT_NEAR(lr_at(325, s), 0.5 * (5e-3 + 5e-4), 1e-12);
    for (int i = 1; i < 600; ++i) {
        if (i < 50) {
            EXPECT_GT(lr_at(i + 1, s), lr_at(i, s));
        } else {
            EXPECT_LE(lr_at(i + 1, s), lr_at(i, s));
        }
    }
    EXPECT_THROW(lr_at(-1, s), Error);
    EXPECT_THROW(lr_at(601, s), Error);
}

TEST(Adam, ClipsAndReportsNorm) {
    TrainSchedule s;
    s.grad_clip = 1.0;
    AdamOptimizer<double> opt(2, s);
    std::vector<double> p{0.0, 0.0}, g{3.0, 4.0};
    EXPECT_DOUBLE_EQ(opt.step(p, g, 0.1), 5.0);
    EXPECT_NEAR(g[0], 0.6, 1e-15);
    EXPECT_NEAR(g[1], 0.8, 1e-15);
    // First bias-corrected Adam step moves each coordinate by about lr.
    EXPECT_NEAR(p[0], -0.1, 1e-6);
    EXPECT_NEAR(p[1], -0.1, 1e-6);
}

TEST(Adam, MinimizesQuadratic) {
    TrainSchedule s;
    AdamOptimizer<double> opt(3, s);
    std::vector<double> p{1.0, -2.0, 0.5}, g(3);
    for (int i = 0; i < 2000; ++i) {
        for (int j = 0; j < 3; ++j) {
            g[j] = 2.0 * (p[j] - j);
        }
        opt.step(p, g, 0.01);
    }
    for (int j = 0; j < 3; ++j) {
        EXPECT_NEAR(p[j], j, 1e-2);
    }
}

TEST(Train, LossDropsAndCheckpointsAreDeterministic) {
    ExpertConfig c = micro_config();
    c.hidden_size = 16;
    c.intermediate_size = 32;
    c.seq_len = 16;
    c.init_std = 0.02;
    const std::string text = [] {
        std::string s;
        for (int i = 0; i < 300; ++i) {
            s += "abcabd";
        }
        return s;
    }();
    const auto tokens = tokenize(text);
    TrainSchedule s;
    s.total_steps = 60;
    s.warmup_steps = 5;
    s.max_lr = 1e-2;
    s.min_lr = 1e-3;
    s.batch_tokens = 64;
    const auto start = make_checkpoint(init_model<float>(c, 1), 0, {});

    auto run = [&](int threads) {
        kernels::set_kernel_threads(threads);
        BatchIterator it(tokens, 16, 4, 7);
        std::vector<double> losses;
        TrainOptions opts;
        opts.record = LineageEntry{1, "abc", ""};
        opts.tier = Tier::Easy;
        opts.loss_log = &losses;
        auto out = train(start, it, s, {20, 40}, opts);
        kernels::set_kernel_threads(1);
        return std::make_pair(out, losses);
    };
    const auto [ckpts, losses] = run(1);
    ASSERT_EQ(ckpts.size(), 3u);
    EXPECT_EQ(ckpts[0].step, 20);
    EXPECT_EQ(ckpts[2].step, 60);
    EXPECT_LT(losses.back(), 0.5 * losses.front());
    ASSERT_EQ(ckpts[2].lineage.size(), 1u);
    EXPECT_EQ(ckpts[2].lineage[0].parent_id, start.id);
    EXPECT_EQ(ckpts[2].config().tier, Tier::Easy);

    const auto [again, losses2] = run(3);
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
        EXPECT_EQ(ckpts[i].id, again[i].id);
    }
}

TEST(Train, NonFiniteLossCarriesLastGood) {
    const auto c = micro_config();
    auto params = init_model<float>(c, 1);
    params.values[3] = std::numeric_limits<float>::quiet_NaN();
    const auto start = make_checkpoint(params, 0, {});
    std::vector<Token> tokens(200, 'a');
    BatchIterator it(tokens, 8, 2, 1);
    TrainSchedule s;
    s.total_steps = 5;
    s.warmup_steps = 1;
    try {
        train(start, it, s, {});
        FAIL() << "expected NonFiniteLossError";
    } catch (const NonFiniteLossError& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFiniteLoss);
        EXPECT_EQ(e.failed_step(), 1);
        EXPECT_EQ(e.last_good().step, 0);
    }
}
