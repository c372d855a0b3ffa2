// SPDX-License-Identifier: Apache-2.0
//
// Magnitude-preserving building blocks: row-normalized linear maps and
// embeddings, square-root residual mixing, gain-scaled activations, the
// ones-concatenation bias trick, and the sinusoidal positional table.

#pragma once

#include "mpdit/rng.hpp"
#include "mpdit/tensor.hpp"

namespace mpdit {

// Gain constants for the scaled activations. The SiLU gain assumes
// unit-magnitude Gaussian input; the leaky-ReLU gain holds for any sigma.
inline constexpr double kSiluInputRms = 0.596;
inline constexpr double kMpSiluGain = 1.0 / kSiluInputRms;

double mp_leaky_relu_gain(double alpha);

// An activation paired with the gain that restores its input magnitude.
struct ActivationGain {
    enum class Kind { silu, leaky_relu, relu };
    Kind kind = Kind::silu;
    double alpha = 0.0; // negative slope, leaky_relu only
    double gain = kMpSiluGain;

    static ActivationGain for_silu();
    static ActivationGain for_leaky_relu(double alpha);
    static ActivationGain for_relu();
};

Tensor apply_mp_activation(const Tensor& x, const ActivationGain& act);

// Linear layer without bias. When `mp` is set, the weight rows are
// L2-normalized inside every forward pass and gradients flow through the
// normalization; a zero row is rejected.
class MPLinear {
public:
    MPLinear() = default;
    MPLinear(int out_features, int in_features, bool mp, Rng& rng, double init_scale);

    // x is [*, in]; result is [*, out]. Rank 1 and 2 supported.
    Tensor forward(const Tensor& x) const;

    int out_features() const { return out_; }
    int in_features() const { return in_; }
    bool mp() const { return mp_; }

    Tensor weight; // [out, in]

private:
    int out_ = 0;
    int in_ = 0;
    bool mp_ = false;
};

struct ResidualMix {
    double alpha = 0.3; // in [0,1]
};

Tensor mp_linear_forward(const MPLinear& layer, const Tensor& x);

// Row `index` of the table, L2-normalized and scaled by sqrt(width) so the
// returned vector has unit expected magnitude.
Tensor mp_embedding_lookup(const MPLinear& table, int index);

// Appends a constant 1 to the last axis.
Tensor concat_bias_ones(const Tensor& x);

// sqrt(alpha)*x + sqrt(1-alpha)*y.
Tensor mp_residual(const Tensor& x, const Tensor& y, ResidualMix mix);

Tensor mp_silu(const Tensor& x);
Tensor mp_leaky_relu(const Tensor& x, double alpha);

// Fixed sinusoidal table [length, dim]. The mp variant rescales each row to
// unit expected magnitude (a sin/cos pair contributes mean square 1/2).
Tensor sinusoidal_table(int length, int dim, bool unit_magnitude);
std::vector<double> sinusoidal_features(double position, int dim, bool unit_magnitude);

// tokens [T,d] mixed with the positional table: the mp path uses the
// residual rule above, the plain path adds the table directly.
Tensor mp_positional_encoding(const Tensor& tokens, const Tensor& table, ResidualMix mix);

} // namespace mpdit
