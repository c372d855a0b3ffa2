// SPDX-License-Identifier: Apache-2.0

#include "mpdit/mp_ops.hpp"

#include <cmath>
#include <stdexcept>

namespace mpdit {

double mp_leaky_relu_gain(double alpha) {
    if (alpha < 0.0) {
        throw std::invalid_argument("mp_leaky_relu: negative slope must be >= 0");
    }
    return std::sqrt(2.0 / (alpha * alpha + 1.0));
}

MPLinear::MPLinear(int out_features, int in_features, bool mp, Rng& rng, double init_scale)
    : out_(out_features), in_(in_features), mp_(mp) {
    if (out_features <= 0 || in_features <= 0) {
        throw std::invalid_argument("mp_linear: non-positive dimensions");
    }
    weight = Tensor::from_values(
        {out_features, in_features},
        rng.normal_vec(static_cast<std::size_t>(out_features) * in_features, init_scale));
}

Tensor MPLinear::forward(const Tensor& x) const {
    const bool vector_in = x.rank() == 1;
    Tensor x2 = vector_in ? reshape(x, {1, x.dim(0)}) : x;
    if (x2.rank() != 2 || x2.dim(1) != in_) {
        throw std::invalid_argument("mp_linear: input " + shape_str(x.shape()) +
                                    " does not match weight " + shape_str(weight.shape()));
    }
    Tensor w = mp_ ? row_normalize(weight) : weight;
    Tensor y = matmul_nt(x2, w);
    return vector_in ? reshape(y, {out_}) : y;
}

Tensor mp_linear_forward(const MPLinear& layer, const Tensor& x) {
    return layer.forward(x);
}

Tensor mp_embedding_lookup(const MPLinear& table, int index) {
    Tensor row = embedding_row(table.weight, index);
    const double root_m = std::sqrt(static_cast<double>(table.in_features()));
    return scale(row_normalize(row), root_m);
}

Tensor concat_bias_ones(const Tensor& x) {
    Shape ones_shape = x.shape();
    ones_shape.back() = 1;
    return concat_last(x, Tensor::full(ones_shape, 1.0));
}

Tensor mp_residual(const Tensor& x, const Tensor& y, ResidualMix mix) {
    if (mix.alpha < 0.0 || mix.alpha > 1.0) {
        throw std::invalid_argument("mp_residual: alpha must lie in [0,1], got " +
                                    std::to_string(mix.alpha));
    }
    if (x.shape() != y.shape()) {
        throw std::invalid_argument("mp_residual: shape mismatch " + shape_str(x.shape()) +
                                    " vs " + shape_str(y.shape()));
    }
    if (mix.alpha == 1.0) return x;
    if (mix.alpha == 0.0) return y;
    return add(scale(x, std::sqrt(mix.alpha)), scale(y, std::sqrt(1.0 - mix.alpha)));
}

Tensor mp_silu(const Tensor& x) {
    return scale(silu_raw(x), kMpSiluGain);
}

Tensor mp_leaky_relu(const Tensor& x, double alpha) {
    return scale(leaky_relu_raw(x, alpha), mp_leaky_relu_gain(alpha));
}

ActivationGain ActivationGain::for_silu() {
    return {Kind::silu, 0.0, kMpSiluGain};
}

ActivationGain ActivationGain::for_leaky_relu(double alpha) {
    return {Kind::leaky_relu, alpha, mp_leaky_relu_gain(alpha)};
}

ActivationGain ActivationGain::for_relu() {
    return {Kind::relu, 0.0, mp_leaky_relu_gain(0.0)};
}

Tensor apply_mp_activation(const Tensor& x, const ActivationGain& act) {
    switch (act.kind) {
        case ActivationGain::Kind::silu:
            return scale(silu_raw(x), act.gain);
        case ActivationGain::Kind::leaky_relu:
            return scale(leaky_relu_raw(x, act.alpha), act.gain);
        case ActivationGain::Kind::relu:
            return scale(leaky_relu_raw(x, 0.0), act.gain);
    }
    throw std::logic_error("mp activation: unknown kind");
}

std::vector<double> sinusoidal_features(double position, int dim, bool unit_magnitude) {
    if (dim <= 0 || dim % 2 != 0) {
        throw std::invalid_argument("sinusoidal_features: dim must be positive and even");
    }
    std::vector<double> out(static_cast<std::size_t>(dim));
    const int pairs = dim / 2;
    const double gain = unit_magnitude ? std::sqrt(2.0) : 1.0;
    for (int i = 0; i < pairs; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / dim);
        out[static_cast<std::size_t>(2 * i)] = gain * std::sin(position * freq);
        out[static_cast<std::size_t>(2 * i + 1)] = gain * std::cos(position * freq);
    }
    return out;
}

Tensor sinusoidal_table(int length, int dim, bool unit_magnitude) {
    if (length <= 0) {
        throw std::invalid_argument("sinusoidal_table: non-positive length");
    }
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(length) * dim);
    for (int t = 0; t < length; ++t) {
        auto row = sinusoidal_features(static_cast<double>(t), dim, unit_magnitude);
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor::from_values({length, dim}, std::move(data));
}

Tensor mp_positional_encoding(const Tensor& tokens, const Tensor& table, ResidualMix mix) {
    if (tokens.rank() != 2 || table.rank() != 2 || tokens.dim(1) != table.dim(1)) {
        throw std::invalid_argument("mp_positional_encoding: tokens " + shape_str(tokens.shape()) +
                                    " vs table " + shape_str(table.shape()));
    }
    if (tokens.dim(0) > table.dim(0)) {
        throw std::invalid_argument("mp_positional_encoding: " + std::to_string(tokens.dim(0)) +
                                    " tokens exceed table length " + std::to_string(table.dim(0)));
    }
    Tensor rows = table;
    if (table.dim(0) != tokens.dim(0)) {
        // The table is a fixed constant, so a plain truncated copy suffices.
        const int t = tokens.dim(0);
        const int d = table.dim(1);
        auto v = table.values();
        rows = Tensor::from_values(
            {t, d}, std::vector<double>(v.begin(), v.begin() + static_cast<std::size_t>(t) * d));
    }
    return mp_residual(tokens, rows, mix);
}

} // namespace mpdit
