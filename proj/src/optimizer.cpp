// SPDX-License-Identifier: Apache-2.0

#include "mpdit/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace mpdit {

double learning_rate(std::int64_t t, const OptimizerConfig& cfg) {
    if (t < 0) {
        throw std::invalid_argument("learning_rate: negative step");
    }
    if (t < cfg.warmup_steps) {
        return cfg.lr_base * static_cast<double>(t) / static_cast<double>(cfg.warmup_steps);
    }
    if (t <= cfg.decay_start_step) {
        return cfg.lr_base;
    }
    return cfg.lr_base / std::sqrt(static_cast<double>(t) / static_cast<double>(cfg.decay_start_step));
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
}

AdamOptimizer::StepResult AdamOptimizer::step() {
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        if (!params_[pi].has_grad()) continue;
        for (double g : params_[pi].grad()) {
            if (!std::isfinite(g)) {
                return {false, 0.0,
                        "adam: non-finite gradient in parameter " + std::to_string(pi) +
                            ", step rejected"};
            }
        }
    }
    ++t_;
    const double lr = learning_rate(t_, cfg_);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto val = p.values_mut();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            val[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    return {true, lr, ""};
}

void forced_weight_normalize(MPLinear& layer) {
    auto w = layer.weight.values_mut();
    const int cols = layer.in_features();
    const int rows = layer.out_features();
    for (int r = 0; r < rows; ++r) {
        double sq = 0.0;
        for (int c = 0; c < cols; ++c) {
            const double x = w[static_cast<std::size_t>(r) * cols + c];
            sq += x * x;
        }
        if (sq == 0.0) {
            throw std::invalid_argument("forced_weight_normalize: zero row " + std::to_string(r));
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (int c = 0; c < cols; ++c) {
            w[static_cast<std::size_t>(r) * cols + c] *= inv;
        }
    }
}

} // namespace mpdit
