// SPDX-License-Identifier: Apache-2.0
//
// Power-function parameter averaging: closed-form decay (1-1/t)^(gamma+1),
// the sigma_rel parametrization of gamma, 16-bit snapshot persistence, and
// least-squares reconstruction of arbitrary profiles after training.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace mpdit {

// sigma_rel = (g+1)^(1/2) (g+2)^(-1) (g+3)^(-1/2); rejects gamma <= -1.
double sigma_rel_from_gamma(double gamma);

// Inverse on the gamma >= 0 branch via bisection; result round-trips to 1e-9.
double gamma_from_sigma_rel(double sigma_rel);

// Decay factor of the closed-form update at step t >= 1.
double power_ema_beta(double gamma, std::int64_t t);

struct EmaState {
    double gamma = 6.94;
    std::int64_t t = 0;
    std::vector<double> params;
};

// theta_hat <- beta_t * theta_hat + (1 - beta_t) * theta with t = state.t + 1.
// Rejects non-monotone step numbers.
void ema_update(EmaState& state, std::span<const double> params, std::int64_t t);

// ---- 16-bit payload codec --------------------------------------------------

std::uint16_t f32_to_f16(float f);
float f16_to_f32(std::uint16_t h);
std::vector<std::uint16_t> quantize_f16(std::span<const double> v);
std::vector<double> dequantize_f16(std::span<const std::uint16_t> v);

// ---- snapshots ---------------------------------------------------------------

struct Snapshot {
    std::int64_t step = 0;
    double gamma = 0.0;
    std::vector<std::uint16_t> payload;
};

// Ordered snapshot records, optionally mirrored to one file per (step,gamma).
class SnapshotStore {
public:
    SnapshotStore() = default;
    explicit SnapshotStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

    // Quantizes to 16 bits, appends, and persists when a directory is set.
    // Failed writes are rolled back before the error is surfaced.
    void append(std::int64_t step, double gamma, std::span<const double> params);

    const std::vector<Snapshot>& records() const { return records_; }
    std::vector<double> dequantized(std::size_t index) const;

    static SnapshotStore load(const std::filesystem::path& dir);

private:
    std::filesystem::path dir_;
    std::vector<Snapshot> records_;
};

bool snapshot_due(std::int64_t t, std::int64_t interval);

void write_snapshot_file(const std::filesystem::path& path, const Snapshot& snap);
Snapshot read_snapshot_file(const std::filesystem::path& path);

// ---- post-hoc reconstruction ---------------------------------------------------

// Inner product of normalized profiles tau^g1 on [0,t1] and tau^g2 on [0,t2],
// evaluated in log space to stay finite at large steps.
double profile_inner_product(double g1, std::int64_t t1, double g2, std::int64_t t2);

// Least-squares weights reproducing the target profile (target_gamma, t_final)
// from the stored snapshot profiles; normal equations with 1e-10 diagonal
// regularization. A system singular beyond the regularization is reported.
std::vector<double> posthoc_fit(const SnapshotStore& store, double target_gamma,
                                std::int64_t t_final);

// Weighted combination of the dequantized payloads.
std::vector<double> posthoc_reconstruct(const SnapshotStore& store,
                                        std::span<const double> weights);

} // namespace mpdit
