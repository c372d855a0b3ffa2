// SPDX-License-Identifier: Apache-2.0
//
// Per-block activation magnitude statistics, pooled over tokens, labels and
// timesteps, with the fixed 13-column CSV layout the magnitude plots read.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "mpdit/model.hpp"

namespace mpdit {

struct MagnitudeRecord {
    int block = 0; // 1-based
    double msa_avg = 0, msa_up = 0, msa_low = 0;
    double out_avg = 0, out_up = 0, out_low = 0;
    double mlp_in_avg = 0, mlp_in_up = 0, mlp_in_low = 0;
    double mlp_out_avg = 0, mlp_out_up = 0, mlp_out_low = 0;
};

// Feeds Gaussian images at random timesteps and labels through the model and
// pools per-token magnitudes at the four block tap points. Bands are the
// mean +- 3 standard deviations, the lower one clamped at zero.
std::vector<MagnitudeRecord> probe_magnitudes(const DiTModel& model, int num_samples,
                                              std::uint64_t seed);

// Pooled standard error of each tap's mean, for consistency checks.
struct ProbeMoments {
    std::vector<MagnitudeRecord> records;
    std::vector<std::array<double, 4>> standard_errors; // per block, per tap
};
ProbeMoments probe_magnitudes_with_errors(const DiTModel& model, int num_samples,
                                          std::uint64_t seed);

void write_probe_csv(const std::vector<MagnitudeRecord>& records, std::ostream& out);
void write_probe_csv(const std::vector<MagnitudeRecord>& records,
                     const std::filesystem::path& path);
std::vector<MagnitudeRecord> read_probe_csv(const std::filesystem::path& path);

} // namespace mpdit
