// SPDX-License-Identifier: Apache-2.0

#include "mpdit/modulation.hpp"

#include <cmath>
#include <stdexcept>

namespace mpdit {

Tensor apply_scale_shift(const Tensor& x, const ModulationParams& p) {
    Tensor out = x;
    if (p.scale.defined()) out = mul(out, p.scale);
    if (p.shift.defined()) out = add(out, p.shift);
    return out;
}

Tensor apply_gate(const Tensor& layer_out, const ModulationParams& p) {
    return p.gate.defined() ? mul(layer_out, p.gate) : layer_out;
}

Tensor rotate_pairs(const Tensor& x, const Tensor& theta) {
    const int d = x.shape().back();
    if (d % 2 != 0) {
        throw std::invalid_argument("rotate_pairs: channel width must be even, got " +
                                    std::to_string(d));
    }
    if (theta.rank() != 1 || theta.dim(0) != d / 2) {
        throw std::invalid_argument("rotate_pairs: expected " + std::to_string(d / 2) +
                                    " angles, got shape " + shape_str(theta.shape()));
    }
    const int pairs = d / 2;
    Tensor out = Tensor::zeros(x.shape());
    auto xv = x.values();
    auto tv = theta.values();
    auto ov = out.values_mut();
    const std::size_t rows = xv.size() / static_cast<std::size_t>(d);
    std::vector<double> cs(static_cast<std::size_t>(pairs)), sn(static_cast<std::size_t>(pairs));
    for (int i = 0; i < pairs; ++i) {
        cs[static_cast<std::size_t>(i)] = std::cos(tv[static_cast<std::size_t>(i)]);
        sn[static_cast<std::size_t>(i)] = std::sin(tv[static_cast<std::size_t>(i)]);
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double* orow = ov.data() + r * d;
        for (int i = 0; i < pairs; ++i) {
            const double a = xr[2 * i], b = xr[2 * i + 1];
            orow[2 * i] = cs[static_cast<std::size_t>(i)] * a - sn[static_cast<std::size_t>(i)] * b;
            orow[2 * i + 1] = sn[static_cast<std::size_t>(i)] * a + cs[static_cast<std::size_t>(i)] * b;
        }
    }
    if (Tape* tape = Tape::active()) {
        Tensor xc = x, tc = theta, oc = out;
        tape->record([xc, tc, oc, cs, sn, d, pairs, rows]() mutable {
            if (!oc.has_grad()) return;
            auto g = oc.grad();
            auto xv = xc.values();
            auto gx = xc.grad_mut();
            auto gt = tc.grad_mut();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = xv.data() + r * d;
                const double* gr = g.data() + r * d;
                double* gxr = gx.data() + r * d;
                for (int i = 0; i < pairs; ++i) {
                    const double c = cs[static_cast<std::size_t>(i)];
                    const double s = sn[static_cast<std::size_t>(i)];
                    const double a = xr[2 * i], b = xr[2 * i + 1];
                    const double ga = gr[2 * i], gb = gr[2 * i + 1];
                    gxr[2 * i] += c * ga + s * gb;
                    gxr[2 * i + 1] += -s * ga + c * gb;
                    gt[static_cast<std::size_t>(i)] +=
                        ga * (-s * a - c * b) + gb * (c * a - s * b);
                }
            }
        });
    }
    return out;
}

Tensor apply_modulation(const Tensor& x, const ModulationParams& p) {
    Tensor out = apply_scale_shift(x, p);
    if (p.angles.defined()) out = rotate_pairs(out, p.angles);
    return out;
}

int ModulationHead::branch_output_dim(int width, ModulationFlags flags) {
    if (!flags.any()) return 0;
    int dim = width; // gate
    if (flags.scale) dim += width;
    if (flags.shift) dim += width;
    if (flags.rotate) dim += width / 2;
    return dim;
}

ModulationHead::ModulationHead(int width, int cond_dim, ModulationFlags flags, bool mp, Rng& rng)
    : width_(width), flags_(flags), mp_(mp) {
    if (flags.rotate && width % 2 != 0) {
        throw std::invalid_argument("modulation: rotation needs even width, got " +
                                    std::to_string(width));
    }
    if (!flags.any()) return;
    const int out_dim = 2 * branch_output_dim(width, flags);
    linear = MPLinear(out_dim, cond_dim, mp, rng, 1.0);
    out_gain = Tensor::scalar_value(0.0);
}

std::pair<ModulationParams, ModulationParams> ModulationHead::forward(const Tensor& cond) const {
    if (!flags_.any()) {
        return {ModulationParams{}, ModulationParams{}};
    }
    Tensor h = mp_ ? mp_silu(cond) : silu_raw(cond);
    Tensor raw = mul(linear.forward(h), out_gain);
    const int branch = branch_output_dim(width_, flags_);
    auto unpack = [&](int base) {
        ModulationParams p;
        int off = base;
        if (flags_.scale) {
            // predicted as an offset from 1 so a zero gain yields the identity
            p.scale = add_scalar(slice_last(raw, off, width_), 1.0);
            off += width_;
        }
        if (flags_.shift) {
            p.shift = slice_last(raw, off, width_);
            off += width_;
        }
        if (flags_.rotate) {
            p.angles = slice_last(raw, off, width_ / 2);
            off += width_ / 2;
        }
        p.gate = slice_last(raw, off, width_);
        return p;
    };
    return {unpack(0), unpack(branch)};
}

} // namespace mpdit
