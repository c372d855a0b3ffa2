// SPDX-License-Identifier: Apache-2.0
//
// Model/training configuration and the plain-text `section.key = value`
// config file format.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mpdit/modulation.hpp"

namespace mpdit {

// The cumulative attribute ladder: A is the plain baseline, each level adds
// one group of techniques, E additionally drops layer normalization.
struct DiTAttributes {
    bool cosine_attention = false;
    bool weight_norm = false; // forward-pass row normalization of weights
    bool mp_embedding = false;
    bool mp_pos_enc = false;
    bool mp_residual = false;
    bool mp_silu = false;
    bool forced_weight_norm = false;
    bool no_layer_norm = false;

    bool operator==(const DiTAttributes&) const = default;
};

struct DiTConfig {
    int width = 64;
    int depth = 4;
    int heads = 2;
    int patch_size = 2;
    int image_size = 16;
    int image_channels = 1;
    int num_classes = 4;
    DiTAttributes attrs{};
    ModulationFlags mod{true, true, false};
    double residual_alpha = 0.3;
    double attention_beta = 0.0; // 0 = per-mode default
    double label_drop = 0.1;
    int diffusion_steps = 256;

    void validate() const;
    void apply_ladder(char level); // 'A'..'E'
    static DiTConfig preset(char level);

    int tokens_per_image() const;
    int patch_dim() const { return image_channels * patch_size * patch_size; }
    double resolved_beta() const;

    bool operator==(const DiTConfig&) const = default;
};

// Names of the attributes each ladder level enables, for structural checks.
std::vector<std::string> ladder_additions(char level);

struct TrainConfig {
    double lr = 1e-2;
    std::int64_t warmup_steps = 2666;
    std::int64_t decay_start_step = 40000;
    int batch_size = 8;
    std::int64_t snapshot_interval = 1600;
    std::vector<double> ema_sigma_rels{0.05, 0.1};

    bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
    DiTConfig model;
    TrainConfig train;

    bool operator==(const RunConfig&) const = default;
};

std::string serialize_config(const RunConfig& cfg);
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::filesystem::path& path);
void save_config_file(const std::filesystem::path& path, const RunConfig& cfg);

} // namespace mpdit
