// SPDX-License-Identifier: Apache-2.0

#include "mpdit/rng.hpp"

#include <cmath>

namespace mpdit {

double Rng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u = uniform();
    const double v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double a = 6.283185307179586476925286766559 * v;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

std::vector<double> Rng::normal_vec(std::size_t n, double sigma) {
    std::vector<double> out(n);
    for (auto& x : out) x = normal() * sigma;
    return out;
}

} // namespace mpdit
