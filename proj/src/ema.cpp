// SPDX-License-Identifier: Apache-2.0

#include "mpdit/ema.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace mpdit {

double sigma_rel_from_gamma(double gamma) {
    if (!(gamma > -1.0)) {
        throw std::invalid_argument("ema: gamma must exceed -1, got " + std::to_string(gamma));
    }
    return std::sqrt(gamma + 1.0) / ((gamma + 2.0) * std::sqrt(gamma + 3.0));
}

double gamma_from_sigma_rel(double sigma_rel) {
    const double upper = sigma_rel_from_gamma(0.0); // largest value on the gamma >= 0 branch
    if (!(sigma_rel > 0.0) || !(sigma_rel < upper)) {
        throw std::invalid_argument("ema: sigma_rel must lie in (0, " + std::to_string(upper) +
                                    "), got " + std::to_string(sigma_rel));
    }
    double lo = 0.0, hi = 1.0;
    while (sigma_rel_from_gamma(hi) > sigma_rel) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (sigma_rel_from_gamma(mid) > sigma_rel) {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo < 1e-13 * (1.0 + hi)) break;
    }
    return 0.5 * (lo + hi);
}

double power_ema_beta(double gamma, std::int64_t t) {
    if (t < 1) {
        throw std::invalid_argument("ema: step must be >= 1");
    }
    return std::pow(1.0 - 1.0 / static_cast<double>(t), gamma + 1.0);
}

void ema_update(EmaState& state, std::span<const double> params, std::int64_t t) {
    if (t != state.t + 1) {
        throw std::invalid_argument("ema: non-monotone update, state at " +
                                    std::to_string(state.t) + " got step " + std::to_string(t));
    }
    if (state.params.empty()) {
        state.params.assign(params.size(), 0.0); // t=1 has beta=0, overwriting this anyway
    }
    if (state.params.size() != params.size()) {
        throw std::invalid_argument("ema: parameter count changed");
    }
    const double beta = power_ema_beta(state.gamma, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.params[i] = beta * state.params[i] + (1.0 - beta) * params[i];
    }
    state.t = t;
}

// ---- 16-bit codec ------------------------------------------------------------

std::uint16_t f32_to_f16(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint16_t sign = static_cast<std::uint16_t>((x >> 16) & 0x8000u);
    const std::uint32_t mag = x & 0x7fffffffu;
    if (mag >= 0x7f800000u) { // inf or nan
        return static_cast<std::uint16_t>(sign | 0x7c00u | (mag > 0x7f800000u ? 0x200u : 0u));
    }
    if (mag >= 0x477ff000u) { // rounds past half max -> inf
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (mag < 0x38800000u) { // half subnormal range
        if (mag < 0x33000000u) {
            return sign; // underflow to signed zero
        }
        const int shift = 113 - static_cast<int>(mag >> 23); // distance below the normal range
        const std::uint32_t mant = (mag & 0x7fffffu) | 0x800000u;
        const std::uint32_t rshift = static_cast<std::uint32_t>(shift + 13);
        std::uint32_t half = mant >> rshift;
        const std::uint32_t rem = mant & ((1u << rshift) - 1u);
        const std::uint32_t halfway = 1u << (rshift - 1u);
        if (rem > halfway || (rem == halfway && (half & 1u))) ++half;
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (((mag >> 23) - 112u) << 10) | ((mag >> 13) & 0x3ffu);
    const std::uint32_t rem = mag & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
}

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t out;
    if (exp == 0u) {
        if (mant == 0u) {
            out = sign;
        } else {
            int e = 0;
            while (!(mant & 0x400u)) {
                mant <<= 1;
                ++e;
            }
            out = sign | (static_cast<std::uint32_t>(113 - e) << 23) | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 31u) {
        out = sign | 0x7f800000u | (mant << 13);
    } else {
        out = sign | ((exp + 112u) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(out);
}

std::vector<std::uint16_t> quantize_f16(std::span<const double> v) {
    std::vector<std::uint16_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = f32_to_f16(static_cast<float>(v[i]));
    }
    return out;
}

std::vector<double> dequantize_f16(std::span<const std::uint16_t> v) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = static_cast<double>(f16_to_f32(v[i]));
    }
    return out;
}

// ---- snapshot persistence -------------------------------------------------------

namespace {

constexpr std::uint32_t kSnapshotMagic = 0x4145504du; // "MPEA"
constexpr std::uint32_t kSnapshotVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

std::string snapshot_filename(std::int64_t step, double gamma) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "step%08lld_g%.6f.emasnap", static_cast<long long>(step),
                  gamma);
    return buf;
}

} // namespace

void write_snapshot_file(const std::filesystem::path& path, const Snapshot& snap) {
    std::string buf;
    buf.reserve(32 + snap.payload.size() * 2);
    put_u32(buf, kSnapshotMagic);
    put_u32(buf, kSnapshotVersion);
    put_u64(buf, static_cast<std::uint64_t>(snap.step));
    put_u64(buf, std::bit_cast<std::uint64_t>(snap.gamma));
    put_u64(buf, static_cast<std::uint64_t>(snap.payload.size()));
    for (std::uint16_t h : snap.payload) {
        buf.push_back(static_cast<char>(h & 0xffu));
        buf.push_back(static_cast<char>((h >> 8) & 0xffu));
    }
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) {
            out.close();
            std::error_code ec;
            std::filesystem::remove(tmp, ec);
            throw std::runtime_error("ema: failed to write snapshot " + path.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw std::runtime_error("ema: failed to finalize snapshot " + path.string());
    }
}

Snapshot read_snapshot_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("ema: cannot open snapshot " + path.string());
    }
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 32) {
        throw std::runtime_error("ema: truncated snapshot " + path.string());
    }
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (get_u32(p) != kSnapshotMagic || get_u32(p + 4) != kSnapshotVersion) {
        throw std::runtime_error("ema: bad snapshot header in " + path.string());
    }
    Snapshot snap;
    snap.step = static_cast<std::int64_t>(get_u64(p + 8));
    snap.gamma = std::bit_cast<double>(get_u64(p + 16));
    const std::uint64_t count = get_u64(p + 24);
    if (buf.size() != 32 + count * 2) {
        throw std::runtime_error("ema: payload size mismatch in " + path.string());
    }
    snap.payload.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        snap.payload[i] = static_cast<std::uint16_t>(
            static_cast<std::uint16_t>(p[32 + 2 * i]) |
            (static_cast<std::uint16_t>(p[32 + 2 * i + 1]) << 8));
    }
    return snap;
}

void SnapshotStore::append(std::int64_t step, double gamma, std::span<const double> params) {
    Snapshot snap{step, gamma, quantize_f16(params)};
    if (!dir_.empty()) {
        std::filesystem::create_directories(dir_);
        write_snapshot_file(dir_ / snapshot_filename(step, gamma), snap);
    }
    // keep the (step, gamma) ordering invariant on the in-memory record too
    auto pos = std::upper_bound(records_.begin(), records_.end(), snap,
                                [](const Snapshot& a, const Snapshot& b) {
                                    return a.step != b.step ? a.step < b.step : a.gamma < b.gamma;
                                });
    records_.insert(pos, std::move(snap));
}

std::vector<double> SnapshotStore::dequantized(std::size_t index) const {
    return dequantize_f16(records_.at(index).payload);
}

SnapshotStore SnapshotStore::load(const std::filesystem::path& dir) {
    SnapshotStore store(dir);
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".emasnap") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        store.records_.push_back(read_snapshot_file(f));
    }
    std::sort(store.records_.begin(), store.records_.end(),
              [](const Snapshot& a, const Snapshot& b) {
                  return a.step != b.step ? a.step < b.step : a.gamma < b.gamma;
              });
    return store;
}

bool snapshot_due(std::int64_t t, std::int64_t interval) {
    return interval > 0 && t > 0 && t % interval == 0;
}

// ---- post-hoc fit ---------------------------------------------------------------

double profile_inner_product(double g1, std::int64_t t1, double g2, std::int64_t t2) {
    if (t1 < 1 || t2 < 1) {
        throw std::invalid_argument("ema: profile steps must be >= 1");
    }
    const double tm = static_cast<double>(std::min(t1, t2));
    const double log_ip = std::log(g1 + 1.0) + std::log(g2 + 1.0) - std::log(g1 + g2 + 1.0) +
                          (g1 + g2 + 1.0) * std::log(tm) -
                          (g1 + 1.0) * std::log(static_cast<double>(t1)) -
                          (g2 + 1.0) * std::log(static_cast<double>(t2));
    return std::exp(log_ip);
}

namespace {

// Gaussian elimination with partial pivoting on the (regularized) normal
// equations; small dense systems only.
std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
        }
        if (std::fabs(a[pivot * n + col]) < 1e-300) {
            throw std::runtime_error("ema: least-squares system singular beyond regularization");
        }
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a[pivot * n + c], a[col * n + c]);
            std::swap(b[pivot], b[col]);
        }
        const double inv = 1.0 / a[col * n + col];
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r * n + col] * inv;
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t ri = n; ri-- > 0;) {
        double acc = b[ri];
        for (std::size_t c = ri + 1; c < n; ++c) acc -= a[ri * n + c] * x[c];
        x[ri] = acc / a[ri * n + ri];
    }
    return x;
}

} // namespace

std::vector<double> posthoc_fit(const SnapshotStore& store, double target_gamma,
                                std::int64_t t_final) {
    const auto& recs = store.records();
    if (recs.empty()) {
        throw std::invalid_argument("ema: snapshot store is empty");
    }
    if (!(target_gamma > -1.0)) {
        throw std::invalid_argument("ema: target gamma must exceed -1");
    }
    const std::size_t n = recs.size();
    std::vector<double> gram(n * n);
    std::vector<double> rhs(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            const double ip =
                profile_inner_product(recs[i].gamma, recs[i].step, recs[j].gamma, recs[j].step);
            gram[i * n + j] = ip;
            gram[j * n + i] = ip;
        }
        gram[i * n + i] += 1e-10;
        rhs[i] = profile_inner_product(recs[i].gamma, recs[i].step, target_gamma, t_final);
    }
    return solve_dense(std::move(gram), std::move(rhs));
}

std::vector<double> posthoc_reconstruct(const SnapshotStore& store,
                                        std::span<const double> weights) {
    const auto& recs = store.records();
    if (weights.size() != recs.size()) {
        throw std::invalid_argument("ema: weight count " + std::to_string(weights.size()) +
                                    " does not match " + std::to_string(recs.size()) +
                                    " snapshots");
    }
    const std::size_t count = recs.front().payload.size();
    std::vector<double> out(count, 0.0);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        if (recs[i].payload.size() != count) {
            throw std::invalid_argument("ema: snapshot " + std::to_string(i) +
                                        " parameter count mismatch");
        }
        const auto payload = dequantize_f16(recs[i].payload);
        for (std::size_t k = 0; k < count; ++k) {
            out[k] += weights[i] * payload[k];
        }
    }
    return out;
}

} // namespace mpdit
