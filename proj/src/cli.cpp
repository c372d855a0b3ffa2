// SPDX-License-Identifier: Apache-2.0

#include "mpdit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mpdit/config.hpp"
#include "mpdit/ema.hpp"
#include "mpdit/model.hpp"
#include "mpdit/probe.hpp"

namespace mpdit {

namespace {

// Maps values in [-2.5, 2.5] to [0,255]; the synthetic data lives well inside.
unsigned char to_byte(double v) {
    const double scaled = (std::clamp(v, -2.5, 2.5) + 2.5) / 5.0 * 255.0;
    return static_cast<unsigned char>(std::lround(scaled));
}

void write_image_grid(const std::filesystem::path& path, const std::vector<Tensor>& images,
                      int grid) {
    if (images.empty() || static_cast<int>(images.size()) != grid * grid) {
        throw std::invalid_argument("sample: image count does not fill the grid");
    }
    const int C = images[0].dim(0);
    const int H = images[0].dim(1);
    const int W = images[0].dim(2);
    if (C != 1 && C != 3) {
        throw std::invalid_argument("sample: image output supports 1 (PGM) or 3 (PPM) channels");
    }
    const int gh = grid * H, gw = grid * W;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("sample: cannot open " + path.string() + " for writing");
    }
    out << (C == 1 ? "P5\n" : "P6\n") << gw << " " << gh << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(gw) * C);
    for (int y = 0; y < gh; ++y) {
        const int gy = y / H, iy = y % H;
        for (int x = 0; x < gw; ++x) {
            const int gx = x / W, ix = x % W;
            const auto& img = images[static_cast<std::size_t>(gy * grid + gx)];
            auto v = img.values();
            for (int c = 0; c < C; ++c) {
                row[static_cast<std::size_t>(x) * C + c] =
                    to_byte(v[(static_cast<std::size_t>(c) * H + iy) * W + ix]);
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) {
        throw std::runtime_error("sample: write to " + path.string() + " failed");
    }
}

int run_train(const std::string& config_path, long long steps, unsigned long long seed,
              const std::string& out_dir) {
    const RunConfig rc = load_config_file(config_path);
    std::filesystem::create_directories(out_dir);
    const std::filesystem::path out(out_dir);
    save_config_file(out / "config.cfg", rc);

    DiTModel model(rc.model, seed);
    const std::filesystem::path snap_dir = out / "snapshots";
    std::filesystem::create_directories(snap_dir);
    // Structure template for post-hoc reconstruction of full checkpoints.
    save_checkpoint(snap_dir / "template.ckpt", model);

    Trainer trainer(model, rc.train, seed, snap_dir);
    std::ofstream loss_log(out / "loss.csv", std::ios::trunc);
    loss_log << "step,loss,lr\n";
    char buf[96];
    for (long long s = 0; s < steps; ++s) {
        const TrainStepInfo info = trainer.step();
        std::snprintf(buf, sizeof(buf), "%lld,%.12g,%.12g\n",
                      static_cast<long long>(info.step), info.loss, info.lr);
        loss_log << buf;
        if (info.step % 100 == 0 || info.step == steps) {
            std::cout << "step " << info.step << " loss " << info.loss << " lr " << info.lr
                      << std::endl;
        }
    }
    if (!loss_log) {
        throw std::runtime_error("train: failed to write loss log");
    }
    save_checkpoint(out / "checkpoint.ckpt", model);
    std::cout << "wrote " << (out / "checkpoint.ckpt").string() << std::endl;
    return 0;
}

int run_sample(const std::string& ckpt_path, int label, double guidance,
               unsigned long long seed, const std::string& out_path, int grid) {
    DiTModel model = load_checkpoint(ckpt_path);
    std::vector<Tensor> images;
    images.reserve(static_cast<std::size_t>(grid) * grid);
    for (int i = 0; i < grid * grid; ++i) {
        images.push_back(sample_cfg(model, label, guidance, seed + static_cast<unsigned>(i)));
    }
    write_image_grid(out_path, images, grid);
    std::cout << "wrote " << out_path << std::endl;
    return 0;
}

int run_probe(const std::string& ckpt_path, int samples, unsigned long long seed,
              const std::string& out_path) {
    DiTModel model = load_checkpoint(ckpt_path);
    const auto records = probe_magnitudes(model, samples, seed);
    write_probe_csv(records, std::filesystem::path(out_path));
    std::cout << "wrote " << out_path << std::endl;
    return 0;
}

int run_ema_fit(const std::string& snap_dir, double sigma_rel, const std::string& out_path) {
    const SnapshotStore store = SnapshotStore::load(snap_dir);
    if (store.records().empty()) {
        throw std::runtime_error("ema-fit: no snapshots in " + snap_dir);
    }
    DiTModel model = load_checkpoint(std::filesystem::path(snap_dir) / "template.ckpt");
    const double gamma = gamma_from_sigma_rel(sigma_rel);
    std::int64_t t_final = 0;
    for (const auto& rec : store.records()) t_final = std::max(t_final, rec.step);
    const auto weights = posthoc_fit(store, gamma, t_final);
    const auto params = posthoc_reconstruct(store, weights);
    model.set_flat_parameters(params);
    save_checkpoint(out_path, model);
    std::cout << "wrote " << out_path << " (gamma " << gamma << ", " << store.records().size()
              << " snapshots)" << std::endl;
    return 0;
}

} // namespace

int cli_dispatch(int argc, const char* const* argv) {
    CLI::App app{"magnitude-preserving diffusion transformer toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_path, ckpt_path, snap_dir;
    long long steps = 1000;
    unsigned long long seed = 0;
    int label = 0, samples = 64, grid = 2;
    double guidance = 1.0, sigma_rel = 0.1;

    CLI::App* train = app.add_subcommand("train", "train on the synthetic dataset");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--steps", steps, "training steps")->required();
    train->add_option("--seed", seed, "rng seed");
    train->add_option("--out", out_path, "output directory")->required();

    CLI::App* sample = app.add_subcommand("sample", "draw guided samples into an image grid");
    sample->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    sample->add_option("--label", label, "class label")->required();
    sample->add_option("--guidance", guidance, "guidance scale");
    sample->add_option("--seed", seed, "rng seed");
    sample->add_option("--out", out_path, "output image (PGM/PPM)")->required();
    sample->add_option("--grid", grid, "grid side length")->check(CLI::PositiveNumber);

    CLI::App* probe = app.add_subcommand("probe", "per-block activation magnitude CSV");
    probe->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    probe->add_option("--samples", samples, "probe sample count")->check(CLI::PositiveNumber);
    probe->add_option("--seed", seed, "rng seed");
    probe->add_option("--out", out_path, "output CSV")->required();

    CLI::App* fit = app.add_subcommand("ema-fit", "post-hoc EMA reconstruction checkpoint");
    fit->add_option("--snapshots", snap_dir, "snapshot directory")->required();
    fit->add_option("--sigma-rel", sigma_rel, "target relative stddev")->required();
    fit->add_option("--out", out_path, "output checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (train->parsed()) return run_train(config_path, steps, seed, out_path);
        if (sample->parsed()) return run_sample(ckpt_path, label, guidance, seed, out_path, grid);
        if (probe->parsed()) return run_probe(ckpt_path, samples, seed, out_path);
        if (fit->parsed()) return run_ema_fit(snap_dir, sigma_rel, out_path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    std::cerr << "error: no subcommand" << std::endl;
    return 1;
}

} // namespace mpdit
