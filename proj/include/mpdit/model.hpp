// SPDX-License-Identifier: Apache-2.0
//
// The configurable transformer denoiser: patch embedding, modulated blocks,
// DDPM schedule and sampling, synthetic training data, and checkpoints.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mpdit/attention.hpp"
#include "mpdit/config.hpp"
#include "mpdit/ema.hpp"
#include "mpdit/modulation.hpp"
#include "mpdit/mp_ops.hpp"
#include "mpdit/optimizer.hpp"
#include "mpdit/rng.hpp"
#include "mpdit/tensor.hpp"

namespace mpdit {

// ---- patch <-> token reshaping ----------------------------------------------

// [C,H,W] -> [T, C*p*p] with T = (H/p)*(W/p); exact inverse below.
Tensor patchify(const Tensor& image, int patch);
Tensor unpatchify(const Tensor& tokens, int patch, int channels, int height, int width);

// ---- diffusion schedule -------------------------------------------------------

// Linear cumulative signal fraction: alpha_bar(0) = 1, strictly decreasing,
// alpha_bar(T) = 1/(T+1) > 0.
class DiffusionSchedule {
public:
    explicit DiffusionSchedule(int steps);
    int steps() const { return steps_; }
    double alpha_bar(int t) const;

private:
    int steps_ = 0;
};

// sqrt(ab)*x0 + sqrt(1-ab)*eps; the square-root mixing form, so unit input
// and noise magnitudes give a unit-magnitude x_t.
Tensor ddpm_noising_alpha(const Tensor& x0, double alpha_bar, const Tensor& eps);
Tensor ddpm_noising(const Tensor& x0, int t, const DiffusionSchedule& schedule, const Tensor& eps);

// ---- the model -----------------------------------------------------------------

struct BlockTaps {
    Tensor attn_in;  // modulated attention input
    Tensor attn_out; // stream after the attention residual
    Tensor mlp_in;   // modulated MLP input
    Tensor mlp_out;  // stream after the MLP residual
};

struct DiTBlock {
    MPLinear proj_q, proj_k, proj_v, proj_o;
    MPLinear mlp_fc1, mlp_fc2;
    ModulationHead mod;
};

class DiTModel {
public:
    DiTModel(DiTConfig cfg, std::uint64_t seed);

    // x_t is [C,H,W]; t in [1, diffusion_steps]; no label = unconditional.
    Tensor forward(const Tensor& x_t, int t, std::optional<int> label,
                   std::vector<BlockTaps>* taps = nullptr) const;

    const DiTConfig& config() const { return cfg_; }

    const std::vector<std::pair<std::string, Tensor>>& named_parameters() const {
        return params_;
    }
    std::vector<Tensor> parameters() const;
    std::int64_t parameter_count() const;
    void zero_grads();

    // Layers whose rows the post-step projection keeps on the hypersphere.
    std::vector<MPLinear*> mp_layers();
    std::vector<const MPLinear*> mp_layers() const;

    std::vector<double> flat_parameters() const;
    void set_flat_parameters(std::span<const double> flat);

private:
    Tensor condition_embedding(int t, std::optional<int> label) const;
    Tensor block_forward(const DiTBlock& block, const Tensor& x, const Tensor& cond,
                         BlockTaps* taps) const;

    DiTConfig cfg_;
    AttentionConfig attn_cfg_;
    MPLinear token_embed_;
    MPLinear label_table_; // num_classes + 1 rows; last row is the null label
    MPLinear time_fc1_, time_fc2_;
    std::vector<DiTBlock> blocks_;
    MPLinear out_proj_;
    Tensor out_gain_; // scalar, zero at init so the prediction starts at 0
    Tensor pos_table_plain_;
    Tensor pos_table_unit_;
    std::vector<std::pair<std::string, Tensor>> params_;
};

// ---- synthetic data --------------------------------------------------------------

// Class-conditional oriented wave patterns, one stream per seed, every image
// normalized to unit expected magnitude.
class SyntheticDataset {
public:
    SyntheticDataset(int num_classes, int image_size, int channels, std::uint64_t seed);

    struct Item {
        Tensor image; // [C,H,W]
        int label = 0;
    };
    Item next();

private:
    int num_classes_;
    int image_size_;
    int channels_;
    Rng rng_;
};

// ---- checkpoints -------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const DiTModel& model);
DiTModel load_checkpoint(const std::filesystem::path& path);

// ---- training ------------------------------------------------------------------------

struct TrainStepInfo {
    std::int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

class Trainer {
public:
    Trainer(DiTModel& model, TrainConfig tcfg, std::uint64_t seed,
            std::filesystem::path snapshot_dir = {});

    TrainStepInfo step();

    std::int64_t steps_done() const { return step_; }
    const std::vector<EmaState>& ema_states() const { return ema_; }
    const SnapshotStore& snapshots() const { return snapshots_; }

private:
    DiTModel& model_;
    TrainConfig tcfg_;
    DiffusionSchedule schedule_;
    SyntheticDataset data_;
    Rng noise_rng_;
    Rng drop_rng_;
    AdamOptimizer opt_;
    std::vector<EmaState> ema_;
    SnapshotStore snapshots_;
    std::int64_t step_ = 0;
};

// ---- sampling ---------------------------------------------------------------------------

// Ancestral DDPM sampling with classifier-free guidance; deterministic per seed.
Tensor sample_cfg(const DiTModel& model, int label, double guidance_scale, std::uint64_t seed);

} // namespace mpdit
