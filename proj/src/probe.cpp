// SPDX-License-Identifier: Apache-2.0

#include "mpdit/probe.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace mpdit {

namespace {

struct Accumulator {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::int64_t n = 0;

    void add(double v) {
        sum += v;
        sum_sq += v * v;
        ++n;
    }
    double mean() const { return sum / static_cast<double>(n); }
    double stddev() const {
        const double m = mean();
        const double var = sum_sq / static_cast<double>(n) - m * m;
        return var > 0.0 ? std::sqrt(var) : 0.0;
    }
    double standard_error() const { return stddev() / std::sqrt(static_cast<double>(n)); }
};

} // namespace

ProbeMoments probe_magnitudes_with_errors(const DiTModel& model, int num_samples,
                                          std::uint64_t seed) {
    if (num_samples <= 0) {
        throw std::invalid_argument("probe: sample count must be positive");
    }
    const auto& cfg = model.config();
    Rng rng(seed, 5);
    std::vector<std::array<Accumulator, 4>> acc(static_cast<std::size_t>(cfg.depth));
    std::vector<BlockTaps> taps;
    const Shape img_shape{cfg.image_channels, cfg.image_size, cfg.image_size};
    for (int s = 0; s < num_samples; ++s) {
        Tensor x = Tensor::from_values(
            img_shape, rng.normal_vec(static_cast<std::size_t>(shape_numel(img_shape))));
        const int t = rng.uniform_int(1, cfg.diffusion_steps);
        const int label = rng.uniform_int(0, cfg.num_classes - 1);
        model.forward(x, t, label, &taps);
        for (int b = 0; b < cfg.depth; ++b) {
            const std::array<const Tensor*, 4> sig{&taps[static_cast<std::size_t>(b)].attn_in,
                                                   &taps[static_cast<std::size_t>(b)].attn_out,
                                                   &taps[static_cast<std::size_t>(b)].mlp_in,
                                                   &taps[static_cast<std::size_t>(b)].mlp_out};
            for (int k = 0; k < 4; ++k) {
                for (double m : row_magnitudes(*sig[static_cast<std::size_t>(k)])) {
                    acc[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)].add(m);
                }
            }
        }
    }
    ProbeMoments out;
    out.records.resize(static_cast<std::size_t>(cfg.depth));
    out.standard_errors.resize(static_cast<std::size_t>(cfg.depth));
    for (int b = 0; b < cfg.depth; ++b) {
        auto band = [](const Accumulator& a, double& avg, double& up, double& low) {
            avg = a.mean();
            const double s3 = 3.0 * a.stddev();
            up = avg + s3;
            low = std::max(0.0, avg - s3);
        };
        MagnitudeRecord& r = out.records[static_cast<std::size_t>(b)];
        r.block = b + 1;
        const auto& ab = acc[static_cast<std::size_t>(b)];
        band(ab[0], r.msa_avg, r.msa_up, r.msa_low);
        band(ab[1], r.out_avg, r.out_up, r.out_low);
        band(ab[2], r.mlp_in_avg, r.mlp_in_up, r.mlp_in_low);
        band(ab[3], r.mlp_out_avg, r.mlp_out_up, r.mlp_out_low);
        for (int k = 0; k < 4; ++k) {
            out.standard_errors[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)] =
                ab[static_cast<std::size_t>(k)].standard_error();
        }
    }
    return out;
}

std::vector<MagnitudeRecord> probe_magnitudes(const DiTModel& model, int num_samples,
                                              std::uint64_t seed) {
    return probe_magnitudes_with_errors(model, num_samples, seed).records;
}

void write_probe_csv(const std::vector<MagnitudeRecord>& records, std::ostream& out) {
    if (records.empty()) {
        throw std::invalid_argument("probe: no records to write");
    }
    out << "Block,MSAavg,MSAup,MSAlow,OUTavg,OUTup,OUTlow,"
           "MLPinavg,MLPinup,MLPinlow,MLPoutavg,MLPoutup,MLPoutlow\n";
    char buf[64];
    auto put = [&](double v) {
        std::snprintf(buf, sizeof(buf), ",%.6f", v);
        out << buf;
    };
    for (const auto& r : records) {
        out << r.block;
        put(r.msa_avg);
        put(r.msa_up);
        put(r.msa_low);
        put(r.out_avg);
        put(r.out_up);
        put(r.out_low);
        put(r.mlp_in_avg);
        put(r.mlp_in_up);
        put(r.mlp_in_low);
        put(r.mlp_out_avg);
        put(r.mlp_out_up);
        put(r.mlp_out_low);
        out << "\n";
    }
}

void write_probe_csv(const std::vector<MagnitudeRecord>& records,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("probe: cannot open " + path.string() + " for writing");
    }
    write_probe_csv(records, out);
    if (!out) {
        throw std::runtime_error("probe: write to " + path.string() + " failed");
    }
}

std::vector<MagnitudeRecord> read_probe_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("probe: cannot open " + path.string());
    }
    std::string line;
    if (!std::getline(in, line) ||
        line != "Block,MSAavg,MSAup,MSAlow,OUTavg,OUTup,OUTlow,"
                "MLPinavg,MLPinup,MLPinlow,MLPoutavg,MLPoutup,MLPoutlow") {
        throw std::runtime_error("probe: unexpected header in " + path.string());
    }
    std::vector<MagnitudeRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> vals;
        while (std::getline(ss, cell, ',')) {
            vals.push_back(std::stod(cell));
        }
        if (vals.size() != 13) {
            throw std::runtime_error("probe: malformed row in " + path.string());
        }
        MagnitudeRecord r;
        r.block = static_cast<int>(vals[0]);
        r.msa_avg = vals[1];
        r.msa_up = vals[2];
        r.msa_low = vals[3];
        r.out_avg = vals[4];
        r.out_up = vals[5];
        r.out_low = vals[6];
        r.mlp_in_avg = vals[7];
        r.mlp_in_up = vals[8];
        r.mlp_in_low = vals[9];
        r.mlp_out_avg = vals[10];
        r.mlp_out_up = vals[11];
        r.mlp_out_low = vals[12];
        records.push_back(r);
    }
    return records;
}

} // namespace mpdit
