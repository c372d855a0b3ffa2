// SPDX-License-Identifier: Apache-2.0
//
// Block conditioning: scale/shift/gate vectors and pairwise rotation angles,
// predicted per block from the conditioning embedding.

#pragma once

#include <optional>

#include "mpdit/mp_ops.hpp"
#include "mpdit/tensor.hpp"

namespace mpdit {

struct ModulationFlags {
    bool scale = true;
    bool shift = true;
    bool rotate = false;

    bool any() const { return scale || shift || rotate; }
    bool operator==(const ModulationFlags&) const = default;
};

// Per-branch conditioning parameters. Disabled components behave as the
// identity: s = 1, b = 0, no rotation. The gate is always present whenever
// any flag is enabled.
struct ModulationParams {
    Tensor scale;  // [d], defined iff flags.scale
    Tensor shift;  // [d], defined iff flags.shift
    Tensor gate;   // [d]
    Tensor angles; // [d/2], defined iff flags.rotate
};

// s (.) x + b over tokens, honoring disabled flags.
Tensor apply_scale_shift(const Tensor& x, const ModulationParams& p);

// g (.) layer_out; the gate stays elementwise even when rotation is enabled.
Tensor apply_gate(const Tensor& layer_out, const ModulationParams& p);

// Planar rotation of channel pairs (x_{2i}, x_{2i+1}) by theta_i, shared
// across tokens. Euclidean norm of every token is preserved exactly.
Tensor rotate_pairs(const Tensor& x, const Tensor& theta);

// Applies the enabled modulation components to a token block: scale/shift
// first, then rotation.
Tensor apply_modulation(const Tensor& x, const ModulationParams& p);

// One linear head per block maps the conditioning embedding to the
// concatenated parameters of both branches. The head output passes through a
// zero-initialized scalar gain, so at initialization s = 1, b = 0, g = 0 and
// theta = 0 regardless of the weight draw (a zero MP weight matrix would
// have undefined row directions, so the gain carries the zero-init role).
class ModulationHead {
public:
    ModulationHead() = default;
    ModulationHead(int width, int cond_dim, ModulationFlags flags, bool mp, Rng& rng);

    // Returns {attention branch, mlp branch} parameters.
    std::pair<ModulationParams, ModulationParams> forward(const Tensor& cond) const;

    const ModulationFlags& flags() const { return flags_; }
    bool has_parameters() const { return flags_.any(); }
    static int branch_output_dim(int width, ModulationFlags flags);

    MPLinear linear;  // [2*branch_output_dim, cond_dim]
    Tensor out_gain;  // scalar, zero at init

private:
    int width_ = 0;
    ModulationFlags flags_{};
    bool mp_ = false;
};

} // namespace mpdit
