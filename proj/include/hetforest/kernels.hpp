// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

// Dense kernels behind the tiny language model.
//
// Every parallel kernel partitions its OUTPUT across OpenMP threads and keeps
// the per-element summation order identical to the serial reference in
// kernels::reference, so results are bitwise independent of the thread count.
// The reference versions exist for tests and the benchmark target.

#pragma once

#include <cstddef>
#include <span>

namespace hetforest::kernels {

/// Threads used by kernels issued from the calling thread (default 1).
/// Training workers set this for themselves; it never leaks across threads.
void set_kernel_threads(int n) noexcept;
int kernel_threads() noexcept;

/// C[MxN] = A[MxK] * B[KxN]  (or += when accumulate).
template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

/// C[PxQ] += A[MxP]^T * B[MxQ]. Sums over m in increasing order.
template <typename T>
void matmul_at_b(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t p,
                 std::size_t q);

/// out[CxR] = in[RxC]^T
template <typename T>
void transpose(std::span<const T> in, std::span<T> out, std::size_t rows, std::size_t cols);

/// Causal multi-head attention over activations laid out [batch*seq, heads*head_dim].
/// probs receives softmax weights [batch, heads, seq, seq] (upper triangle zero).
template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, std::size_t batch, std::size_t seq, std::size_t heads,
                       std::size_t head_dim);

/// Gradients of attention_forward; dq/dk/dv are overwritten.
template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::size_t batch, std::size_t seq, std::size_t heads,
                        std::size_t head_dim);

namespace reference {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate = false);

template <typename T>
void matmul_at_b(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t p,
                 std::size_t q);

template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, std::size_t batch, std::size_t seq, std::size_t heads,
                       std::size_t head_dim);

template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::size_t batch, std::size_t seq, std::size_t heads,
                        std::size_t head_dim);

}  // namespace reference

}  // namespace hetforest::kernels
