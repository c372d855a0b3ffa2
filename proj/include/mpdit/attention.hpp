// SPDX-License-Identifier: Apache-2.0
//
// Cosine attention with temperature softmax. Row-stochastic attention maps
// can only shrink the value magnitude, so no activation normalization is
// applied anywhere in this path.

#pragma once

#include "mpdit/mp_ops.hpp"
#include "mpdit/tensor.hpp"

namespace mpdit {

struct AttentionConfig {
    int heads = 1;
    int head_dim = 0;
    double beta = 1.0; // softmax temperature, > 0
    bool cosine = false;

    void validate(int model_width) const;
};

// Picks the default temperature when a config leaves beta unset (0):
// 1/sqrt(head_dim) for cosine logits (similarities live in [-1,1]),
// sqrt(head_dim) for raw dot products (the usual scaled-dot attention).
double default_beta(bool cosine, int head_dim);

// x^T y / (|x||y|), clamped to [-1,1]; zero vectors are rejected.
double cosine_similarity(std::span<const double> x, std::span<const double> y);

// softmax(logits/beta) per row with max subtraction.
Tensor softmax_beta(const Tensor& logits, double beta);

// Single-head attention over [T, d_h] inputs. Cosine mode L2-normalizes the
// query and key rows before the dot product (the efficient equivalent of
// pairwise cosine similarity).
Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionConfig& cfg);

// Head split / merge around attention_forward, with MP projections.
Tensor multi_head_attention(const Tensor& x, const MPLinear& proj_q, const MPLinear& proj_k,
                            const MPLinear& proj_v, const MPLinear& proj_o,
                            const AttentionConfig& cfg);

} // namespace mpdit
