// SPDX-License-Identifier: Apache-2.0
//
// Explicit-state PCG32 generator with deterministic stream assignment.

#pragma once

#include <cstdint>
#include <vector>

namespace mpdit {

// Counter-free but fully explicit-state PRNG: two Rng objects built from the
// same (seed, stream) pair produce identical sequences on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) noexcept
        : state_(0), inc_((stream << 1u) | 1u) {
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() noexcept {
        const std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        const std::uint32_t xorshifted =
            static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        const std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    // Uniform in (0,1); never returns 0 so it is safe under log().
    double uniform() noexcept {
        return (static_cast<double>(next_u32()) + 0.5) * 0x1p-32;
    }

    // Inclusive range draw via rejection-free scaling (range is small here).
    int uniform_int(int lo, int hi) noexcept {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1u;
        return lo + static_cast<int>((static_cast<std::uint64_t>(next_u32()) * span) >> 32u);
    }

    // Box-Muller with a cached spare.
    double normal() noexcept;

    std::vector<double> normal_vec(std::size_t n, double sigma = 1.0);

private:
    std::uint64_t state_;
    std::uint64_t inc_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace mpdit
