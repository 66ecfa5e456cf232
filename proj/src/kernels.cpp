// Copyright (c) 2026, hetforest contributors
// SPDX-License-Identifier: Apache-2.0

#include "hetforest/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

namespace hetforest::kernels {

namespace {
thread_local int g_kernel_threads = 1;
}

void set_kernel_threads(int n) noexcept { g_kernel_threads = std::max(1, n); }
int kernel_threads() noexcept { return g_kernel_threads; }

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
    const T* __restrict pa = a.data();
    const T* __restrict pb = b.data();
    T* __restrict pc = c.data();
    const int threads = kernel_threads();
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for num_threads(threads) if (threads > 1) schedule(static)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        T* crow = pc + static_cast<std::size_t>(i) * n;
        if (!accumulate) {
            std::fill(crow, crow + n, T(0));
        }
        const T* arow = pa + static_cast<std::size_t>(i) * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            const T* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aik * brow[j];
            }
        }
    }
}

template <typename T>
void matmul_at_b(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t p,
                 std::size_t q) {
    const T* __restrict pa = a.data();
    const T* __restrict pb = b.data();
    T* __restrict pc = c.data();
    const int threads = kernel_threads();
    const auto rows = static_cast<std::ptrdiff_t>(p);
#pragma omp parallel for num_threads(threads) if (threads > 1) schedule(static)
    for (std::ptrdiff_t r = 0; r < rows; ++r) {
        T* crow = pc + static_cast<std::size_t>(r) * q;
        for (std::size_t i = 0; i < m; ++i) {
            const T air = pa[i * p + static_cast<std::size_t>(r)];
            const T* brow = pb + i * q;
            for (std::size_t j = 0; j < q; ++j) {
                crow[j] += air * brow[j];
            }
        }
    }
}

template <typename T>
void transpose(std::span<const T> in, std::span<T> out, std::size_t rows, std::size_t cols) {
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[c * rows + r] = in[r * cols + c];
        }
    }
}

namespace {

template <typename T>
void attention_head_forward(const T* q, const T* k, const T* v, T* out, T* probs, std::size_t seq,
                            std::size_t stride, std::size_t head_dim) {
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    for (std::size_t t = 0; t < seq; ++t) {
        const T* qt = q + t * stride;
        T* prow = probs + t * seq;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
            const T* ks = k + s * stride;
            T dot = 0;
            for (std::size_t d = 0; d < head_dim; ++d) {
                dot += qt[d] * ks[d];
            }
            prow[s] = dot * scale;
            mx = std::max(mx, prow[s]);
        }
        T sum = 0;
        for (std::size_t s = 0; s <= t; ++s) {
            prow[s] = std::exp(prow[s] - mx);
            sum += prow[s];
        }
        const T inv = T(1) / sum;
        for (std::size_t s = 0; s <= t; ++s) {
            prow[s] *= inv;
        }
        std::fill(prow + t + 1, prow + seq, T(0));
        T* ot = out + t * stride;
        std::fill(ot, ot + head_dim, T(0));
        for (std::size_t s = 0; s <= t; ++s) {
            const T p = prow[s];
            const T* vs = v + s * stride;
            for (std::size_t d = 0; d < head_dim; ++d) {
                ot[d] += p * vs[d];
            }
        }
    }
}

template <typename T>
void attention_head_backward(const T* q, const T* k, const T* v, const T* probs, const T* dout, T* dq, T* dk,
                             T* dv, std::size_t seq, std::size_t stride, std::size_t head_dim,
                             std::vector<T>& dscore) {
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    for (std::size_t t = 0; t < seq; ++t) {
        std::fill(dq + t * stride, dq + t * stride + head_dim, T(0));
        std::fill(dk + t * stride, dk + t * stride + head_dim, T(0));
        std::fill(dv + t * stride, dv + t * stride + head_dim, T(0));
    }
    dscore.resize(seq);
    for (std::size_t t = 0; t < seq; ++t) {
        const T* prow = probs + t * seq;
        const T* dot_row = dout + t * stride;
        T weighted = 0;
        for (std::size_t s = 0; s <= t; ++s) {
            const T* vs = v + s * stride;
            T dp = 0;
            for (std::size_t d = 0; d < head_dim; ++d) {
                dp += dot_row[d] * vs[d];
            }
            dscore[s] = dp;
            weighted += prow[s] * dp;
        }
        const T* qt = q + t * stride;
        T* dqt = dq + t * stride;
        for (std::size_t s = 0; s <= t; ++s) {
            const T ds = prow[s] * (dscore[s] - weighted) * scale;
            const T* ks = k + s * stride;
            T* dks = dk + s * stride;
            T* dvs = dv + s * stride;
            for (std::size_t d = 0; d < head_dim; ++d) {
                dqt[d] += ds * ks[d];
                dks[d] += ds * qt[d];
                dvs[d] += prow[s] * dot_row[d];
            }
        }
    }
}

}  // namespace

template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, std::size_t batch, std::size_t seq, std::size_t heads,
                       std::size_t head_dim) {
    const std::size_t stride = heads * head_dim;
    const int threads = kernel_threads();
    const auto jobs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel for num_threads(threads) if (threads > 1) schedule(static)
    for (std::ptrdiff_t j = 0; j < jobs; ++j) {
        const std::size_t b = static_cast<std::size_t>(j) / heads;
        const std::size_t h = static_cast<std::size_t>(j) % heads;
        const std::size_t base = b * seq * stride + h * head_dim;
        attention_head_forward(q.data() + base, k.data() + base, v.data() + base, out.data() + base,
                               probs.data() + static_cast<std::size_t>(j) * seq * seq, seq, stride, head_dim);
    }
}

template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::size_t batch, std::size_t seq, std::size_t heads,
                        std::size_t head_dim) {
    const std::size_t stride = heads * head_dim;
    const int threads = kernel_threads();
    const auto jobs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel num_threads(threads) if (threads > 1)
    {
        std::vector<T> scratch;
#pragma omp for schedule(static)
        for (std::ptrdiff_t j = 0; j < jobs; ++j) {
            const std::size_t b = static_cast<std::size_t>(j) / heads;
            const std::size_t h = static_cast<std::size_t>(j) % heads;
            const std::size_t base = b * seq * stride + h * head_dim;
            attention_head_backward(q.data() + base, k.data() + base, v.data() + base,
                                    probs.data() + static_cast<std::size_t>(j) * seq * seq, dout.data() + base,
                                    dq.data() + base, dk.data() + base, dv.data() + base, seq, stride, head_dim,
                                    scratch);
        }
    }
}

namespace reference {

template <typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k,
            std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = accumulate ? c[i * n + j] : T(0);
            for (std::size_t kk = 0; kk < k; ++kk) {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

template <typename T>
void matmul_at_b(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t p,
                 std::size_t q) {
    for (std::size_t r = 0; r < p; ++r) {
        for (std::size_t j = 0; j < q; ++j) {
            T acc = c[r * q + j];
            for (std::size_t i = 0; i < m; ++i) {
                acc += a[i * p + r] * b[i * q + j];
            }
            c[r * q + j] = acc;
        }
    }
}

template <typename T>
void attention_forward(std::span<const T> q, std::span<const T> k, std::span<const T> v, std::span<T> out,
                       std::span<T> probs, std::size_t batch, std::size_t seq, std::size_t heads,
                       std::size_t head_dim) {
    const std::size_t stride = heads * head_dim;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    auto at = [&](std::span<const T> x, std::size_t b, std::size_t t, std::size_t h, std::size_t d) {
        return x[(b * seq + t) * stride + h * head_dim + d];
    };
    std::vector<T> row(seq);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            T* p = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t t = 0; t < seq; ++t) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t s = 0; s <= t; ++s) {
                    T dot = 0;
                    for (std::size_t d = 0; d < head_dim; ++d) {
                        dot += at(q, b, t, h, d) * at(k, b, s, h, d);
                    }
                    row[s] = dot * scale;
                    mx = std::max(mx, row[s]);
                }
                T sum = 0;
                for (std::size_t s = 0; s <= t; ++s) {
                    row[s] = std::exp(row[s] - mx);
                    sum += row[s];
                }
                for (std::size_t s = 0; s < seq; ++s) {
                    p[t * seq + s] = s <= t ? row[s] * (T(1) / sum) : T(0);
                }
                for (std::size_t d = 0; d < head_dim; ++d) {
                    T acc = 0;
                    for (std::size_t s = 0; s <= t; ++s) {
                        acc += p[t * seq + s] * at(v, b, s, h, d);
                    }
                    out[(b * seq + t) * stride + h * head_dim + d] = acc;
                }
            }
        }
    }
}

template <typename T>
void attention_backward(std::span<const T> q, std::span<const T> k, std::span<const T> v,
                        std::span<const T> probs, std::span<const T> dout, std::span<T> dq, std::span<T> dk,
                        std::span<T> dv, std::size_t batch, std::size_t seq, std::size_t heads,
                        std::size_t head_dim) {
    const std::size_t stride = heads * head_dim;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    auto idx = [&](std::size_t b, std::size_t t, std::size_t h, std::size_t d) {
        return (b * seq + t) * stride + h * head_dim + d;
    };
    std::fill(dq.begin(), dq.end(), T(0));
    std::fill(dk.begin(), dk.end(), T(0));
    std::fill(dv.begin(), dv.end(), T(0));
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t t = 0; t < seq; ++t) {
                std::vector<T> dp(t + 1);
                T weighted = 0;
                for (std::size_t s = 0; s <= t; ++s) {
                    T acc = 0;
                    for (std::size_t d = 0; d < head_dim; ++d) {
                        acc += dout[idx(b, t, h, d)] * v[idx(b, s, h, d)];
                    }
                    dp[s] = acc;
                    weighted += p[t * seq + s] * acc;
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const T ds = p[t * seq + s] * (dp[s] - weighted) * scale;
                    for (std::size_t d = 0; d < head_dim; ++d) {
                        dq[idx(b, t, h, d)] += ds * k[idx(b, s, h, d)];
                        dk[idx(b, s, h, d)] += ds * q[idx(b, t, h, d)];
                        dv[idx(b, s, h, d)] += p[t * seq + s] * dout[idx(b, t, h, d)];
                    }
                }
            }
        }
    }
}

}  // namespace reference

#define HETFOREST_INSTANTIATE(T)                                                                              \
    template void matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,  \
                            std::size_t, bool);                                                               \
    template void matmul_at_b<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,          \
                                 std::size_t, std::size_t);                                                   \
    template void transpose<T>(std::span<const T>, std::span<T>, std::size_t, std::size_t);                  \
    template void attention_forward<T>(std::span<const T>, std::span<const T>, std::span<const T>,           \
                                       std::span<T>, std::span<T>, std::size_t, std::size_t, std::size_t,    \
                                       std::size_t);                                                          \
    template void attention_backward<T>(std::span<const T>, std::span<const T>, std::span<const T>,          \
                                        std::span<const T>, std::span<const T>, std::span<T>, std::span<T>,  \
                                        std::span<T>, std::size_t, std::size_t, std::size_t, std::size_t);   \
    template void reference::matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,    \
                                       std::size_t, std::size_t, bool);                                       \
    template void reference::matmul_at_b<T>(std::span<const T>, std::span<const T>, std::span<T>,            \
                                            std::size_t, std::size_t, std::size_t);                           \
    template void reference::attention_forward<T>(std::span<const T>, std::span<const T>,                    \
                                                  std::span<const T>, std::span<T>, std::span<T>,            \
                                                  std::size_t, std::size_t, std::size_t, std::size_t);       \
    template void reference::attention_backward<T>(std::span<const T>, std::span<const T>,                   \
                                                   std::span<const T>, std::span<const T>,                   \
                                                   std::span<const T>, std::span<T>, std::span<T>,           \
                                                   std::span<T>, std::size_t, std::size_t, std::size_t,      \
                                                   std::size_t);

HETFOREST_INSTANTIATE(float)
HETFOREST_INSTANTIATE(double)

#undef HETFOREST_INSTANTIATE

}  // namespace hetforest::kernels
