// SPDX-License-Identifier: Apache-2.0

#include "mpdit/attention.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mpdit {

void AttentionConfig::validate(int model_width) const {
    if (heads <= 0 || head_dim <= 0) {
        throw std::invalid_argument("attention: heads and head_dim must be positive");
    }
    if (heads * head_dim != model_width) {
        throw std::invalid_argument("attention: heads*head_dim = " +
                                    std::to_string(heads * head_dim) +
                                    " does not match width " + std::to_string(model_width));
    }
    if (beta <= 0.0) {
        throw std::invalid_argument("attention: beta must be positive");
    }
}

double default_beta(bool cosine, int head_dim) {
    const double root = std::sqrt(static_cast<double>(head_dim));
    return cosine ? 1.0 / root : root;
}

double cosine_similarity(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw std::invalid_argument("cosine_similarity: length mismatch");
    }
    double xx = 0.0, yy = 0.0, xy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx += x[i] * x[i];
        yy += y[i] * y[i];
        xy += x[i] * y[i];
    }
    if (xx == 0.0 || yy == 0.0) {
        throw std::invalid_argument("cosine_similarity: zero vector has no direction");
    }
    return std::clamp(xy / (std::sqrt(xx) * std::sqrt(yy)), -1.0, 1.0);
}

Tensor softmax_beta(const Tensor& logits, double beta) {
    return softmax_rows(logits, beta);
}

Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                         const AttentionConfig& cfg) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.shape() != k.shape() ||
        q.dim(0) != v.dim(0)) {
        throw std::invalid_argument("attention: incompatible shapes q" + shape_str(q.shape()) +
                                    " k" + shape_str(k.shape()) + " v" + shape_str(v.shape()));
    }
    Tensor logits;
    if (cfg.cosine) {
        logits = matmul_nt(row_normalize(q), row_normalize(k));
    } else {
        logits = matmul_nt(q, k);
    }
    Tensor map = softmax_beta(logits, cfg.beta);
    return matmul(map, v);
}

Tensor multi_head_attention(const Tensor& x, const MPLinear& proj_q, const MPLinear& proj_k,
                            const MPLinear& proj_v, const MPLinear& proj_o,
                            const AttentionConfig& cfg) {
    if (x.rank() != 2) {
        throw std::invalid_argument("attention: token input must be [T,d], got " +
                                    shape_str(x.shape()));
    }
    cfg.validate(x.dim(1));
    Tensor q = proj_q.forward(x);
    Tensor k = proj_k.forward(x);
    Tensor v = proj_v.forward(x);
    Tensor merged;
    for (int h = 0; h < cfg.heads; ++h) {
        const int off = h * cfg.head_dim;
        Tensor head = attention_forward(slice_last(q, off, cfg.head_dim),
                                        slice_last(k, off, cfg.head_dim),
                                        slice_last(v, off, cfg.head_dim), cfg);
        merged = merged.defined() ? concat_last(merged, head) : head;
    }
    return proj_o.forward(merged);
}

} // namespace mpdit
