// SPDX-License-Identifier: Apache-2.0

#include "mpdit/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mpdit {

// ---- patchify -----------------------------------------------------------------

Tensor patchify(const Tensor& image, int patch) {
    if (image.rank() != 3) {
        throw std::invalid_argument("patchify: expected [C,H,W], got " + shape_str(image.shape()));
    }
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (patch <= 0 || H % patch != 0 || W % patch != 0) {
        throw std::invalid_argument("patchify: image " + shape_str(image.shape()) +
                                    " not divisible by patch " + std::to_string(patch));
    }
    const int gh = H / patch, gw = W / patch;
    const int T = gh * gw;
    const int F = C * patch * patch;
    Tensor out = Tensor::zeros({T, F});
    auto src = image.values();
    auto dst = out.values_mut();
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int tok = gy * gw + gx;
            for (int c = 0; c < C; ++c) {
                for (int iy = 0; iy < patch; ++iy) {
                    for (int ix = 0; ix < patch; ++ix) {
                        const int f = c * patch * patch + iy * patch + ix;
                        dst[static_cast<std::size_t>(tok) * F + f] =
                            src[(static_cast<std::size_t>(c) * H + gy * patch + iy) * W +
                                gx * patch + ix];
                    }
                }
            }
        }
    }
    if (Tape* tape = Tape::active()) {
        Tensor img = image, oc = out;
        tape->record([img, oc, patch, C, H, W, gh, gw, F]() mutable {
            if (!oc.has_grad()) return;
            auto g = oc.grad();
            auto gi = img.grad_mut();
            for (int gy = 0; gy < gh; ++gy) {
                for (int gx = 0; gx < gw; ++gx) {
                    const int tok = gy * gw + gx;
                    for (int c = 0; c < C; ++c) {
                        for (int iy = 0; iy < patch; ++iy) {
                            for (int ix = 0; ix < patch; ++ix) {
                                const int f = c * patch * patch + iy * patch + ix;
                                gi[(static_cast<std::size_t>(c) * H + gy * patch + iy) * W +
                                   gx * patch + ix] += g[static_cast<std::size_t>(tok) * F + f];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor unpatchify(const Tensor& tokens, int patch, int channels, int height, int width) {
    if (tokens.rank() != 2) {
        throw std::invalid_argument("unpatchify: expected [T,F], got " + shape_str(tokens.shape()));
    }
    const int gh = height / patch, gw = width / patch;
    const int T = gh * gw;
    const int F = channels * patch * patch;
    if (patch <= 0 || height % patch != 0 || width % patch != 0 || tokens.dim(0) != T ||
        tokens.dim(1) != F) {
        throw std::invalid_argument("unpatchify: tokens " + shape_str(tokens.shape()) +
                                    " do not tile [" + std::to_string(channels) + "," +
                                    std::to_string(height) + "," + std::to_string(width) +
                                    "] with patch " + std::to_string(patch));
    }
    Tensor out = Tensor::zeros({channels, height, width});
    auto src = tokens.values();
    auto dst = out.values_mut();
    for (int gy = 0; gy < gh; ++gy) {
        for (int gx = 0; gx < gw; ++gx) {
            const int tok = gy * gw + gx;
            for (int c = 0; c < channels; ++c) {
                for (int iy = 0; iy < patch; ++iy) {
                    for (int ix = 0; ix < patch; ++ix) {
                        const int f = c * patch * patch + iy * patch + ix;
                        dst[(static_cast<std::size_t>(c) * height + gy * patch + iy) * width +
                            gx * patch + ix] = src[static_cast<std::size_t>(tok) * F + f];
                    }
                }
            }
        }
    }
    if (Tape* tape = Tape::active()) {
        Tensor tk = tokens, oc = out;
        const int C = channels, H = height, W = width;
        tape->record([tk, oc, patch, C, H, W, gh, gw, F]() mutable {
            if (!oc.has_grad()) return;
            auto g = oc.grad();
            auto gt = tk.grad_mut();
            for (int gy = 0; gy < gh; ++gy) {
                for (int gx = 0; gx < gw; ++gx) {
                    const int tok = gy * gw + gx;
                    for (int c = 0; c < C; ++c) {
                        for (int iy = 0; iy < patch; ++iy) {
                            for (int ix = 0; ix < patch; ++ix) {
                                const int f = c * patch * patch + iy * patch + ix;
                                gt[static_cast<std::size_t>(tok) * F + f] +=
                                    g[(static_cast<std::size_t>(c) * H + gy * patch + iy) * W +
                                      gx * patch + ix];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- schedule ------------------------------------------------------------------

DiffusionSchedule::DiffusionSchedule(int steps) : steps_(steps) {
    if (steps <= 0) {
        throw std::invalid_argument("schedule: step count must be positive");
    }
}

double DiffusionSchedule::alpha_bar(int t) const {
    if (t < 0 || t > steps_) {
        throw std::invalid_argument("schedule: t = " + std::to_string(t) + " outside [0," +
                                    std::to_string(steps_) + "]");
    }
    return static_cast<double>(steps_ + 1 - t) / static_cast<double>(steps_ + 1);
}

Tensor ddpm_noising_alpha(const Tensor& x0, double alpha_bar, const Tensor& eps) {
    if (x0.shape() != eps.shape()) {
        throw std::invalid_argument("ddpm_noising: shape mismatch " + shape_str(x0.shape()) +
                                    " vs " + shape_str(eps.shape()));
    }
    if (alpha_bar < 0.0 || alpha_bar > 1.0) {
        throw std::invalid_argument("ddpm_noising: alpha_bar outside [0,1]");
    }
    return add(scale(x0, std::sqrt(alpha_bar)), scale(eps, std::sqrt(1.0 - alpha_bar)));
}

Tensor ddpm_noising(const Tensor& x0, int t, const DiffusionSchedule& schedule, const Tensor& eps) {
    return ddpm_noising_alpha(x0, schedule.alpha_bar(t), eps);
}

// ---- model ---------------------------------------------------------------------

DiTModel::DiTModel(DiTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int d = cfg_.width;
    const bool mp = cfg_.attrs.weight_norm;
    Rng rng(seed, 0);
    // Plain layers get the usual 1/sqrt(fan_in) draw; MP layers normalize
    // their rows every forward pass, so the init scale only sets direction.
    auto init_scale = [&](int fan_in) { return mp ? 1.0 : 1.0 / std::sqrt(static_cast<double>(fan_in)); };

    const int in_dim = cfg_.patch_dim() + 1; // ones channel appended
    token_embed_ = MPLinear(d, in_dim, mp, rng, init_scale(in_dim));
    // The table never runs a matmul forward; the mp flag marks its rows for
    // the post-step hypersphere projection alongside the true linear layers.
    label_table_ = MPLinear(cfg_.num_classes + 1, d, cfg_.attrs.mp_embedding, rng,
                            cfg_.attrs.mp_embedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(d)));
    time_fc1_ = MPLinear(d, d, mp, rng, init_scale(d));
    time_fc2_ = MPLinear(d, d, mp, rng, init_scale(d));
    blocks_.resize(static_cast<std::size_t>(cfg_.depth));
    const int hidden = 4 * d;
    for (auto& b : blocks_) {
        b.proj_q = MPLinear(d, d, mp, rng, init_scale(d));
        b.proj_k = MPLinear(d, d, mp, rng, init_scale(d));
        b.proj_v = MPLinear(d, d, mp, rng, init_scale(d));
        b.proj_o = MPLinear(d, d, mp, rng, init_scale(d));
        b.mlp_fc1 = MPLinear(hidden, d, mp, rng, init_scale(d));
        b.mlp_fc2 = MPLinear(d, hidden, mp, rng, init_scale(hidden));
        b.mod = ModulationHead(d, d, cfg_.mod, mp, rng);
    }
    out_proj_ = MPLinear(cfg_.patch_dim(), d, mp, rng, init_scale(d));
    out_gain_ = Tensor::scalar_value(0.0);

    attn_cfg_.heads = cfg_.heads;
    attn_cfg_.head_dim = d / cfg_.heads;
    attn_cfg_.cosine = cfg_.attrs.cosine_attention;
    attn_cfg_.beta = cfg_.resolved_beta();

    pos_table_plain_ = sinusoidal_table(cfg_.tokens_per_image(), d, /*unit_magnitude=*/false);
    pos_table_unit_ = sinusoidal_table(cfg_.tokens_per_image(), d, /*unit_magnitude=*/true);

    params_.emplace_back("token_embed.weight", token_embed_.weight);
    params_.emplace_back("label_table.weight", label_table_.weight);
    params_.emplace_back("time_fc1.weight", time_fc1_.weight);
    params_.emplace_back("time_fc2.weight", time_fc2_.weight);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        auto& b = blocks_[i];
        params_.emplace_back(p + "attn.q.weight", b.proj_q.weight);
        params_.emplace_back(p + "attn.k.weight", b.proj_k.weight);
        params_.emplace_back(p + "attn.v.weight", b.proj_v.weight);
        params_.emplace_back(p + "attn.o.weight", b.proj_o.weight);
        params_.emplace_back(p + "mlp.fc1.weight", b.mlp_fc1.weight);
        params_.emplace_back(p + "mlp.fc2.weight", b.mlp_fc2.weight);
        if (b.mod.has_parameters()) {
            params_.emplace_back(p + "mod.weight", b.mod.linear.weight);
            params_.emplace_back(p + "mod.gain", b.mod.out_gain);
        }
    }
    params_.emplace_back("out_proj.weight", out_proj_.weight);
    params_.emplace_back("out_gain", out_gain_);
}

std::vector<Tensor> DiTModel::parameters() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& [name, p] : params_) out.push_back(p);
    return out;
}

std::int64_t DiTModel::parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : params_) n += p.size();
    return n;
}

void DiTModel::zero_grads() {
    for (auto& [name, p] : params_) {
        Tensor t = p;
        t.zero_grad();
    }
}

std::vector<MPLinear*> DiTModel::mp_layers() {
    std::vector<MPLinear*> out;
    auto push = [&](MPLinear& l) {
        if (l.mp()) out.push_back(&l);
    };
    push(token_embed_);
    push(label_table_);
    push(time_fc1_);
    push(time_fc2_);
    for (auto& b : blocks_) {
        push(b.proj_q);
        push(b.proj_k);
        push(b.proj_v);
        push(b.proj_o);
        push(b.mlp_fc1);
        push(b.mlp_fc2);
        if (b.mod.has_parameters()) push(b.mod.linear);
    }
    push(out_proj_);
    return out;
}

std::vector<const MPLinear*> DiTModel::mp_layers() const {
    auto layers = const_cast<DiTModel*>(this)->mp_layers();
    return {layers.begin(), layers.end()};
}

Tensor DiTModel::condition_embedding(int t, std::optional<int> label) const {
    const int d = cfg_.width;
    Tensor tfeat = Tensor::from_values(
        {d}, sinusoidal_features(static_cast<double>(t), d, cfg_.attrs.mp_embedding));
    Tensor h = time_fc1_.forward(tfeat);
    h = cfg_.attrs.mp_silu ? mp_silu(h) : silu_raw(h);
    Tensor temb = time_fc2_.forward(h);

    int row = cfg_.num_classes; // dedicated unconditional embedding
    if (label.has_value()) {
        if (*label < 0 || *label >= cfg_.num_classes) {
            throw std::invalid_argument("model: label " + std::to_string(*label) +
                                        " outside [0," + std::to_string(cfg_.num_classes) + ")");
        }
        row = *label;
    }
    Tensor yemb = cfg_.attrs.mp_embedding ? mp_embedding_lookup(label_table_, row)
                                          : embedding_row(label_table_.weight, row);
    if (cfg_.attrs.mp_residual) {
        return mp_residual(temb, yemb, ResidualMix{0.5});
    }
    return add(temb, yemb);
}

Tensor DiTModel::block_forward(const DiTBlock& block, const Tensor& x, const Tensor& cond,
                               BlockTaps* taps) const {
    const bool ln = !cfg_.attrs.no_layer_norm;
    auto [p_attn, p_mlp] = block.mod.forward(cond);

    Tensor h = ln ? layer_norm(x) : x;
    h = apply_modulation(h, p_attn);
    if (taps) taps->attn_in = h;
    Tensor a = multi_head_attention(h, block.proj_q, block.proj_k, block.proj_v, block.proj_o,
                                    attn_cfg_);
    a = apply_gate(a, p_attn);
    Tensor x1 = cfg_.attrs.mp_residual ? mp_residual(x, a, ResidualMix{cfg_.residual_alpha})
                                       : add(x, a);
    if (taps) taps->attn_out = x1;

    Tensor h2 = ln ? layer_norm(x1) : x1;
    h2 = apply_modulation(h2, p_mlp);
    if (taps) taps->mlp_in = h2;
    Tensor m = block.mlp_fc1.forward(h2);
    m = cfg_.attrs.mp_silu ? mp_silu(m) : silu_raw(m);
    m = block.mlp_fc2.forward(m);
    m = apply_gate(m, p_mlp);
    Tensor x2 = cfg_.attrs.mp_residual ? mp_residual(x1, m, ResidualMix{cfg_.residual_alpha})
                                       : add(x1, m);
    if (taps) taps->mlp_out = x2;
    return x2;
}

Tensor DiTModel::forward(const Tensor& x_t, int t, std::optional<int> label,
                         std::vector<BlockTaps>* taps) const {
    if (x_t.rank() != 3 || x_t.dim(0) != cfg_.image_channels || x_t.dim(1) != cfg_.image_size ||
        x_t.dim(2) != cfg_.image_size) {
        throw std::invalid_argument("model: input " + shape_str(x_t.shape()) +
                                    " does not match configured image geometry");
    }
    if (t < 1 || t > cfg_.diffusion_steps) {
        throw std::invalid_argument("model: timestep " + std::to_string(t) + " outside [1," +
                                    std::to_string(cfg_.diffusion_steps) + "]");
    }
    if (taps) {
        taps->assign(static_cast<std::size_t>(cfg_.depth), BlockTaps{});
    }

    Tensor tokens = concat_bias_ones(patchify(x_t, cfg_.patch_size));
    Tensor x = token_embed_.forward(tokens);
    if (cfg_.attrs.mp_pos_enc) {
        x = mp_positional_encoding(x, pos_table_unit_, ResidualMix{cfg_.residual_alpha});
    } else {
        x = add(x, pos_table_plain_);
    }

    Tensor cond = condition_embedding(t, label);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = block_forward(blocks_[i], x, cond, taps ? &(*taps)[i] : nullptr);
    }

    Tensor h = cfg_.attrs.no_layer_norm ? x : layer_norm(x);
    Tensor out = mul(out_proj_.forward(h), out_gain_);
    return unpatchify(out, cfg_.patch_size, cfg_.image_channels, cfg_.image_size, cfg_.image_size);
}

std::vector<double> DiTModel::flat_parameters() const {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(parameter_count()));
    for (const auto& [name, p] : params_) {
        auto v = p.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

void DiTModel::set_flat_parameters(std::span<const double> flat) {
    if (static_cast<std::int64_t>(flat.size()) != parameter_count()) {
        throw std::invalid_argument("model: flat parameter count " + std::to_string(flat.size()) +
                                    " does not match " + std::to_string(parameter_count()));
    }
    std::size_t off = 0;
    for (auto& [name, p] : params_) {
        Tensor t = p;
        auto v = t.values_mut();
        std::copy_n(flat.data() + off, v.size(), v.data());
        off += v.size();
    }
}

// ---- synthetic data ----------------------------------------------------------------

SyntheticDataset::SyntheticDataset(int num_classes, int image_size, int channels,
                                   std::uint64_t seed)
    : num_classes_(num_classes), image_size_(image_size), channels_(channels), rng_(seed, 1) {
    if (num_classes <= 0 || image_size <= 0 || channels <= 0) {
        throw std::invalid_argument("dataset: non-positive geometry");
    }
}

SyntheticDataset::Item SyntheticDataset::next() {
    const int k = rng_.uniform_int(0, num_classes_ - 1);
    const double angle = 3.14159265358979323846 * k / num_classes_;
    const double freq = 2.0 * 3.14159265358979323846 * (2.0 + k % 3) / image_size_;
    const double phase = rng_.uniform() * 2.0 * 3.14159265358979323846;
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::vector<double> img(static_cast<std::size_t>(channels_) * image_size_ * image_size_);
    for (int c = 0; c < channels_; ++c) {
        const double cshift = c * 1.5707963267948966;
        for (int y = 0; y < image_size_; ++y) {
            for (int x = 0; x < image_size_; ++x) {
                const double wave = std::sin(freq * (ca * x + sa * y) + phase + cshift);
                img[(static_cast<std::size_t>(c) * image_size_ + y) * image_size_ + x] =
                    wave + 0.05 * rng_.normal();
            }
        }
    }
    const double mag = expected_magnitude(std::span<const double>(img));
    for (double& v : img) v /= mag;
    return {Tensor::from_values({channels_, image_size_, image_size_}, std::move(img)), k};
}

// ---- checkpoints ----------------------------------------------------------------------

namespace {

constexpr std::uint32_t kCheckpointMagic = 0x4b435044u; // "DPCK"
constexpr std::uint32_t kCheckpointVersion = 1;

void w_u32(std::ofstream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out.write(b, 4);
}

void w_u64(std::ofstream& out, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    out.write(b, 8);
}

std::uint32_t r_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t r_u64(std::ifstream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const DiTModel& model) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    }
    w_u32(out, kCheckpointMagic);
    w_u32(out, kCheckpointVersion);
    RunConfig rc;
    rc.model = model.config();
    const std::string cfg_text = serialize_config(rc);
    w_u64(out, cfg_text.size());
    out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
    const auto& params = model.named_parameters();
    w_u64(out, params.size());
    for (const auto& [name, p] : params) {
        w_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        w_u32(out, static_cast<std::uint32_t>(p.rank()));
        for (int i = 0; i < p.rank(); ++i) w_u32(out, static_cast<std::uint32_t>(p.dim(i)));
        for (double v : p.values()) w_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) {
        throw std::runtime_error("checkpoint: write to " + path.string() + " failed");
    }
}

DiTModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("checkpoint: cannot open " + path.string());
    }
    if (r_u32(in) != kCheckpointMagic || r_u32(in) != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: bad header in " + path.string());
    }
    const std::uint64_t cfg_len = r_u64(in);
    std::string cfg_text(cfg_len, '\0');
    in.read(cfg_text.data(), static_cast<std::streamsize>(cfg_len));
    const RunConfig rc = parse_config(cfg_text);
    DiTModel model(rc.model, /*seed=*/0);
    const std::uint64_t n_params = r_u64(in);
    if (n_params != model.named_parameters().size()) {
        throw std::runtime_error("checkpoint: parameter list mismatch in " + path.string());
    }
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(model.parameter_count()));
    for (std::uint64_t pi = 0; pi < n_params; ++pi) {
        const std::uint32_t name_len = r_u32(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto& expect = model.named_parameters()[pi];
        if (name != expect.first) {
            throw std::runtime_error("checkpoint: parameter '" + name + "' where '" +
                                     expect.first + "' expected");
        }
        const std::uint32_t rank = r_u32(in);
        std::int64_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) count *= r_u32(in);
        if (count != expect.second.size()) {
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        }
        for (std::int64_t i = 0; i < count; ++i) {
            flat.push_back(std::bit_cast<double>(r_u64(in)));
        }
    }
    if (!in) {
        throw std::runtime_error("checkpoint: truncated file " + path.string());
    }
    model.set_flat_parameters(flat);
    return model;
}

// ---- trainer ------------------------------------------------------------------------

Trainer::Trainer(DiTModel& model, TrainConfig tcfg, std::uint64_t seed,
                 std::filesystem::path snapshot_dir)
    : model_(model),
      tcfg_(std::move(tcfg)),
      schedule_(model.config().diffusion_steps),
      data_(model.config().num_classes, model.config().image_size, model.config().image_channels,
            seed),
      noise_rng_(seed, 2),
      drop_rng_(seed, 3),
      opt_(model.parameters(),
           OptimizerConfig{tcfg_.lr, 0.9, 0.999, 1e-8, tcfg_.warmup_steps, tcfg_.decay_start_step}),
      snapshots_(std::move(snapshot_dir)) {
    if (tcfg_.batch_size <= 0) {
        throw std::invalid_argument("trainer: batch size must be positive");
    }
    for (double sr : tcfg_.ema_sigma_rels) {
        ema_.push_back(EmaState{gamma_from_sigma_rel(sr), 0, {}});
    }
}

TrainStepInfo Trainer::step() {
    const auto& cfg = model_.config();
    Tape tape;
    Tensor loss;
    {
        Tape::Scope scope(tape);
        for (int b = 0; b < tcfg_.batch_size; ++b) {
            auto item = data_.next();
            const int t = noise_rng_.uniform_int(1, cfg.diffusion_steps);
            Tensor eps = Tensor::from_values(
                item.image.shape(),
                noise_rng_.normal_vec(static_cast<std::size_t>(item.image.size())));
            Tensor x_t = ddpm_noising(item.image, t, schedule_, eps);
            std::optional<int> label = item.label;
            if (drop_rng_.uniform() < cfg.label_drop) label.reset();
            Tensor eps_hat = model_.forward(x_t, t, label);
            Tensor diff = sub(eps_hat, eps);
            Tensor l = mean(mul(diff, diff));
            loss = loss.defined() ? add(loss, l) : l;
        }
        loss = scale(loss, 1.0 / tcfg_.batch_size);
    }
    const double loss_value = loss.scalar();
    if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "trainer: non-finite loss at step " << (step_ + 1) << "; layer magnitudes:";
        for (const auto& [name, p] : model_.named_parameters()) {
            os << " " << name << "=" << expected_magnitude(p);
        }
        throw std::runtime_error(os.str());
    }
    tape.backward(loss);
    const auto res = opt_.step();
    if (!res.applied) {
        throw std::runtime_error("trainer: " + res.message);
    }
    if (cfg.attrs.forced_weight_norm) {
        for (MPLinear* layer : model_.mp_layers()) {
            forced_weight_normalize(*layer);
        }
    }
    model_.zero_grads();
    ++step_;
    const auto flat = model_.flat_parameters();
    for (auto& state : ema_) {
        ema_update(state, flat, step_);
    }
    if (snapshot_due(step_, tcfg_.snapshot_interval)) {
        for (const auto& state : ema_) {
            snapshots_.append(step_, state.gamma, state.params);
        }
    }
    return {step_, loss_value, res.lr};
}

// ---- sampling -------------------------------------------------------------------------

Tensor sample_cfg(const DiTModel& model, int label, double guidance_scale, std::uint64_t seed) {
    const auto& cfg = model.config();
    if (label < 0 || label >= cfg.num_classes) {
        throw std::invalid_argument("sample: label " + std::to_string(label) + " outside [0," +
                                    std::to_string(cfg.num_classes) + ")");
    }
    const DiffusionSchedule schedule(cfg.diffusion_steps);
    Rng rng(seed, 4);
    const Shape img_shape{cfg.image_channels, cfg.image_size, cfg.image_size};
    Tensor x = Tensor::from_values(
        img_shape, rng.normal_vec(static_cast<std::size_t>(shape_numel(img_shape))));
    for (int t = cfg.diffusion_steps; t >= 1; --t) {
        Tensor eps_hat;
        if (guidance_scale == 0.0) {
            eps_hat = model.forward(x, t, std::nullopt);
        } else if (guidance_scale == 1.0) {
            eps_hat = model.forward(x, t, label);
        } else {
            Tensor cond = model.forward(x, t, label);
            Tensor uncond = model.forward(x, t, std::nullopt);
            eps_hat = add(uncond, scale(sub(cond, uncond), guidance_scale));
        }
        const double ab_t = schedule.alpha_bar(t);
        const double ab_prev = schedule.alpha_bar(t - 1);
        const double alpha_t = ab_t / ab_prev;
        const double beta_t = 1.0 - alpha_t;
        auto xv = x.values();
        auto ev = eps_hat.values();
        std::vector<double> next(xv.size());
        const double coef = beta_t / std::sqrt(1.0 - ab_t);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha_t);
        const double sigma =
            t > 1 ? std::sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t)) : 0.0;
        for (std::size_t i = 0; i < next.size(); ++i) {
            next[i] = inv_sqrt_alpha * (xv[i] - coef * ev[i]);
            if (t > 1) next[i] += sigma * rng.normal();
        }
        x = Tensor::from_values(img_shape, std::move(next));
    }
    return x;
}

} // namespace mpdit
