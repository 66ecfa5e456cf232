// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// OpenMP kernels against their serial references. The Arg is the kernel
// thread count; reference benchmarks ignore it.

#include <benchmark/benchmark.h>

#include <vector>

#include "hetforest/kernels.hpp"
#include "hetforest/rng.hpp"
#include "hetforest/tinylm.hpp"

namespace kn = hetforest::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    hetforest::Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) {
        x = static_cast<float>(hetforest::standard_normal(rng));
    }
    return v;
}

// Rows = batch 8 x seq 128, the shape of a desk training step.
constexpr std::size_t kRows = 1024;
constexpr std::size_t kHidden = 64;
constexpr std::size_t kInter = 256;

template <bool Reference>
void BM_Matmul(benchmark::State& state) {
    kn::set_kernel_threads(static_cast<int>(state.range(0)));
    const auto a = random_vec(kRows * kHidden, 1), b = random_vec(kHidden * kInter, 2);
    std::vector<float> c(kRows * kInter);
    for (auto _ : state) {
        if constexpr (Reference) {
            kn::reference::matmul<float>(a, b, c, kRows, kHidden, kInter);
        } else {
            kn::matmul<float>(a, b, c, kRows, kHidden, kInter);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kRows * kHidden * kInter));
    kn::set_kernel_threads(1);
}

template <bool Reference>
void BM_MatmulAtB(benchmark::State& state) {
    kn::set_kernel_threads(static_cast<int>(state.range(0)));
    const auto a = random_vec(kRows * kHidden, 3), b = random_vec(kRows * kInter, 4);
    std::vector<float> c(kHidden * kInter);
    for (auto _ : state) {
        std::fill(c.begin(), c.end(), 0.0f);
        if constexpr (Reference) {
            kn::reference::matmul_at_b<float>(a, b, c, kRows, kHidden, kInter);
        } else {
            kn::matmul_at_b<float>(a, b, c, kRows, kHidden, kInter);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(kRows * kHidden * kInter));
    kn::set_kernel_threads(1);
}

struct AttentionData {
    static constexpr std::size_t batch = 8, seq = 128, heads = 2, head_dim = 32;
    std::vector<float> q = random_vec(batch * seq * heads * head_dim, 5);
    std::vector<float> k = random_vec(q.size(), 6);
    std::vector<float> v = random_vec(q.size(), 7);
    std::vector<float> dout = random_vec(q.size(), 8);
    std::vector<float> out = std::vector<float>(q.size());
    std::vector<float> probs = std::vector<float>(batch * heads * seq * seq);
    std::vector<float> dq = std::vector<float>(q.size()), dk = dq, dv = dq;
};

template <bool Reference>
void BM_AttentionForward(benchmark::State& state) {
    kn::set_kernel_threads(static_cast<int>(state.range(0)));
    AttentionData d;
    using D = AttentionData;
    for (auto _ : state) {
        if constexpr (Reference) {
            kn::reference::attention_forward<float>(d.q, d.k, d.v, d.out, d.probs, D::batch, D::seq, D::heads,
                                                    D::head_dim);
        } else {
            kn::attention_forward<float>(d.q, d.k, d.v, d.out, d.probs, D::batch, D::seq, D::heads, D::head_dim);
        }
        benchmark::DoNotOptimize(d.out.data());
    }
    kn::set_kernel_threads(1);
}

template <bool Reference>
void BM_AttentionBackward(benchmark::State& state) {
    kn::set_kernel_threads(static_cast<int>(state.range(0)));
    AttentionData d;
    using D = AttentionData;
    kn::reference::attention_forward<float>(d.q, d.k, d.v, d.out, d.probs, D::batch, D::seq, D::heads, D::head_dim);
    for (auto _ : state) {
        if constexpr (Reference) {
            kn::reference::attention_backward<float>(d.q, d.k, d.v, d.probs, d.dout, d.dq, d.dk, d.dv, D::batch,
                                                     D::seq, D::heads, D::head_dim);
        } else {
            kn::attention_backward<float>(d.q, d.k, d.v, d.probs, d.dout, d.dq, d.dk, d.dv, D::batch, D::seq,
                                          D::heads, D::head_dim);
        }
        benchmark::DoNotOptimize(d.dq.data());
    }
    kn::set_kernel_threads(1);
}

// One full forward/backward pass of a ~200k parameter expert.
void BM_TrainStep(benchmark::State& state) {
    kn::set_kernel_threads(static_cast<int>(state.range(0)));
    hetforest::ExpertConfig cfg;
    cfg.hidden_size = 64;
    cfg.intermediate_size = 256;
    cfg.num_heads = 2;
    cfg.num_layers = 3;
    cfg.seq_len = 128;
    const auto params = hetforest::init_model<float>(cfg, 1);
    hetforest::Rng rng(9);
    hetforest::Batch batch;
    batch.batch_size = 8;
    batch.seq_len = 128;
    for (std::size_t i = 0; i < 8 * 128; ++i) {
        batch.inputs.push_back(static_cast<hetforest::Token>(hetforest::uniform_below(rng, 256)));
        batch.targets.push_back(static_cast<hetforest::Token>(hetforest::uniform_below(rng, 256)));
    }
    std::vector<float> grads;
    for (auto _ : state) {
        benchmark::DoNotOptimize(hetforest::loss_and_grad(params, batch, grads));
    }
    state.counters["params"] = static_cast<double>(params.size());
    kn::set_kernel_threads(1);
}

}  // namespace

BENCHMARK(BM_Matmul<true>)->Name("matmul/reference")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_Matmul<false>)->Name("matmul/omp")->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMicrosecond)->UseRealTime();
BENCHMARK(BM_MatmulAtB<true>)->Name("matmul_at_b/reference")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulAtB<false>)
    ->Name("matmul_at_b/omp")
    ->Arg(1)
    ->Arg(2)
    ->Arg(4)
    ->Unit(benchmark::kMicrosecond)
    ->UseRealTime();
BENCHMARK(BM_AttentionForward<true>)->Name("attention_forward/reference")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_AttentionForward<false>)
    ->Name("attention_forward/omp")
    ->Arg(1)
    ->Arg(2)
    ->Arg(4)
    ->Unit(benchmark::kMicrosecond)
    ->UseRealTime();
BENCHMARK(BM_AttentionBackward<true>)->Name("attention_backward/reference")->Arg(1)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_AttentionBackward<false>)
    ->Name("attention_backward/omp")
    ->Arg(1)
    ->Arg(2)
    ->Arg(4)
    ->Unit(benchmark::kMicrosecond)
    ->UseRealTime();
BENCHMARK(BM_TrainStep)->Name("train_step")->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
