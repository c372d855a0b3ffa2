// SPDX-License-Identifier: Apache-2.0
//
// Adam with a warm-up/constant/inverse-sqrt learning-rate schedule and the
// post-step projection of MP weight rows back onto the unit hypersphere.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpdit/mp_ops.hpp"
#include "mpdit/tensor.hpp"

namespace mpdit {

struct OptimizerConfig {
    double lr_base = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t warmup_steps = 2666;
    std::int64_t decay_start_step = 40000;
};

// Linear ramp to lr_base over the warm-up, constant until the decay start,
// then lr_base / sqrt(t / decay_start). Continuous at both boundaries.
double learning_rate(std::int64_t t, const OptimizerConfig& cfg);

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, OptimizerConfig cfg);

    struct StepResult {
        bool applied = false;
        double lr = 0.0;
        std::string message;
    };

    // Applies one update from the gradients currently on the parameters.
    // A non-finite gradient rejects the whole step and reports the offender.
    StepResult step();

    std::int64_t step_count() const { return t_; }
    const OptimizerConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    OptimizerConfig cfg_;
    std::int64_t t_ = 0;
};

// Projects every weight row to unit Euclidean norm in place. Idempotent;
// rejects zero rows.
void forced_weight_normalize(MPLinear& layer);

} // namespace mpdit
