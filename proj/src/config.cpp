// SPDX-License-Identifier: Apache-2.0

#include "mpdit/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mpdit {

void DiTConfig::validate() const {
    if (width <= 0 || depth <= 0 || heads <= 0 || patch_size <= 0 || image_size <= 0 ||
        image_channels <= 0 || num_classes <= 0 || diffusion_steps <= 0) {
        throw std::invalid_argument("config: geometry fields must be positive");
    }
    if (width % heads != 0) {
        throw std::invalid_argument("config: width " + std::to_string(width) +
                                    " not divisible by heads " + std::to_string(heads));
    }
    if (mod.rotate && width % 2 != 0) {
        throw std::invalid_argument("config: rotation modulation needs even width");
    }
    if (image_size % patch_size != 0) {
        throw std::invalid_argument("config: image size " + std::to_string(image_size) +
                                    " not divisible by patch size " + std::to_string(patch_size));
    }
    if (width % 2 != 0) {
        throw std::invalid_argument("config: width must be even for sinusoidal features");
    }
    if (residual_alpha < 0.0 || residual_alpha > 1.0) {
        throw std::invalid_argument("config: residual alpha must lie in [0,1]");
    }
    if (attention_beta < 0.0) {
        throw std::invalid_argument("config: attention beta must be positive (or 0 for default)");
    }
    if (label_drop < 0.0 || label_drop > 1.0) {
        throw std::invalid_argument("config: label drop probability must lie in [0,1]");
    }
}

void DiTConfig::apply_ladder(char level) {
    attrs = DiTAttributes{};
    switch (level) {
        case 'E':
            attrs.no_layer_norm = true;
            [[fallthrough]];
        case 'D':
            attrs.forced_weight_norm = true;
            [[fallthrough]];
        case 'C':
            attrs.weight_norm = true;
            attrs.mp_embedding = true;
            attrs.mp_pos_enc = true;
            attrs.mp_residual = true;
            attrs.mp_silu = true;
            [[fallthrough]];
        case 'B':
            attrs.cosine_attention = true;
            [[fallthrough]];
        case 'A':
            break;
        default:
            throw std::invalid_argument(std::string("config: unknown ladder level '") + level +
                                        "'");
    }
}

DiTConfig DiTConfig::preset(char level) {
    DiTConfig cfg;
    cfg.apply_ladder(level);
    return cfg;
}

std::vector<std::string> ladder_additions(char level) {
    switch (level) {
        case 'A': return {};
        case 'B': return {"cosine_attention"};
        case 'C': return {"weight_norm", "mp_embedding", "mp_pos_enc", "mp_residual", "mp_silu"};
        case 'D': return {"forced_weight_norm"};
        case 'E': return {"no_layer_norm"};
        default:
            throw std::invalid_argument(std::string("config: unknown ladder level '") + level +
                                        "'");
    }
}

int DiTConfig::tokens_per_image() const {
    const int g = image_size / patch_size;
    return g * g;
}

double DiTConfig::resolved_beta() const {
    if (attention_beta > 0.0) return attention_beta;
    const double root = std::sqrt(static_cast<double>(width / heads));
    return attrs.cosine_attention ? 1.0 / root : root;
}

// ---- plain-text config files ---------------------------------------------------

namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad integer '" + v + "' for " + key);
    }
}

std::int64_t parse_i64(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long long out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad integer '" + v + "' for " + key);
    }
}

double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return out;
    } catch (...) {
        throw std::invalid_argument("config: bad number '" + v + "' for " + key);
    }
}

std::vector<double> parse_double_list(const std::string& v, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_double(item, key));
    }
    if (out.empty()) {
        throw std::invalid_argument("config: empty list for " + key);
    }
    return out;
}

} // namespace

std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    const DiTConfig& m = cfg.model;
    os << "model.width = " << m.width << "\n";
    os << "model.depth = " << m.depth << "\n";
    os << "model.heads = " << m.heads << "\n";
    os << "model.patch_size = " << m.patch_size << "\n";
    os << "model.image_size = " << m.image_size << "\n";
    os << "model.image_channels = " << m.image_channels << "\n";
    os << "model.num_classes = " << m.num_classes << "\n";
    os << "model.residual_alpha = " << fmt_double(m.residual_alpha) << "\n";
    os << "model.attention_beta = " << fmt_double(m.attention_beta) << "\n";
    os << "model.label_drop = " << fmt_double(m.label_drop) << "\n";
    os << "model.diffusion_steps = " << m.diffusion_steps << "\n";
    os << "attr.cosine_attention = " << (m.attrs.cosine_attention ? "true" : "false") << "\n";
    os << "attr.weight_norm = " << (m.attrs.weight_norm ? "true" : "false") << "\n";
    os << "attr.mp_embedding = " << (m.attrs.mp_embedding ? "true" : "false") << "\n";
    os << "attr.mp_pos_enc = " << (m.attrs.mp_pos_enc ? "true" : "false") << "\n";
    os << "attr.mp_residual = " << (m.attrs.mp_residual ? "true" : "false") << "\n";
    os << "attr.mp_silu = " << (m.attrs.mp_silu ? "true" : "false") << "\n";
    os << "attr.forced_weight_norm = " << (m.attrs.forced_weight_norm ? "true" : "false") << "\n";
    os << "attr.no_layer_norm = " << (m.attrs.no_layer_norm ? "true" : "false") << "\n";
    os << "mod.scale = " << (m.mod.scale ? "true" : "false") << "\n";
    os << "mod.shift = " << (m.mod.shift ? "true" : "false") << "\n";
    os << "mod.rotate = " << (m.mod.rotate ? "true" : "false") << "\n";
    const TrainConfig& t = cfg.train;
    os << "train.lr = " << fmt_double(t.lr) << "\n";
    os << "train.warmup_steps = " << t.warmup_steps << "\n";
    os << "train.decay_start_step = " << t.decay_start_step << "\n";
    os << "train.batch_size = " << t.batch_size << "\n";
    os << "train.snapshot_interval = " << t.snapshot_interval << "\n";
    os << "train.ema_sigma_rels = ";
    for (std::size_t i = 0; i < t.ema_sigma_rels.size(); ++i) {
        if (i) os << ",";
        os << fmt_double(t.ema_sigma_rels[i]);
    }
    os << "\n";
    return os.str();
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " is not 'section.key = value'");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        DiTConfig& m = cfg.model;
        TrainConfig& t = cfg.train;
        if (key == "model.width") m.width = parse_int(value, key);
        else if (key == "model.depth") m.depth = parse_int(value, key);
        else if (key == "model.heads") m.heads = parse_int(value, key);
        else if (key == "model.patch_size") m.patch_size = parse_int(value, key);
        else if (key == "model.image_size") m.image_size = parse_int(value, key);
        else if (key == "model.image_channels") m.image_channels = parse_int(value, key);
        else if (key == "model.num_classes") m.num_classes = parse_int(value, key);
        else if (key == "model.residual_alpha") m.residual_alpha = parse_double(value, key);
        else if (key == "model.attention_beta") m.attention_beta = parse_double(value, key);
        else if (key == "model.label_drop") m.label_drop = parse_double(value, key);
        else if (key == "model.diffusion_steps") m.diffusion_steps = parse_int(value, key);
        else if (key == "model.config") m.apply_ladder(value.size() == 1 ? value[0] : '?');
        else if (key == "attr.cosine_attention") m.attrs.cosine_attention = parse_bool(value, key);
        else if (key == "attr.weight_norm") m.attrs.weight_norm = parse_bool(value, key);
        else if (key == "attr.mp_embedding") m.attrs.mp_embedding = parse_bool(value, key);
        else if (key == "attr.mp_pos_enc") m.attrs.mp_pos_enc = parse_bool(value, key);
        else if (key == "attr.mp_residual") m.attrs.mp_residual = parse_bool(value, key);
        else if (key == "attr.mp_silu") m.attrs.mp_silu = parse_bool(value, key);
        else if (key == "attr.forced_weight_norm") m.attrs.forced_weight_norm = parse_bool(value, key);
        else if (key == "attr.no_layer_norm") m.attrs.no_layer_norm = parse_bool(value, key);
        else if (key == "mod.scale") m.mod.scale = parse_bool(value, key);
        else if (key == "mod.shift") m.mod.shift = parse_bool(value, key);
        else if (key == "mod.rotate") m.mod.rotate = parse_bool(value, key);
        else if (key == "train.lr") t.lr = parse_double(value, key);
        else if (key == "train.warmup_steps") t.warmup_steps = parse_i64(value, key);
        else if (key == "train.decay_start_step") t.decay_start_step = parse_i64(value, key);
        else if (key == "train.batch_size") t.batch_size = parse_int(value, key);
        else if (key == "train.snapshot_interval") t.snapshot_interval = parse_i64(value, key);
        else if (key == "train.ema_sigma_rels") t.ema_sigma_rels = parse_double_list(value, key);
        else {
            throw std::invalid_argument("config: unknown key '" + key + "' on line " +
                                        std::to_string(lineno));
        }
    }
    cfg.model.validate();
    return cfg;
}

RunConfig load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("config: cannot open " + path.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

void save_config_file(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::trunc);
    out << serialize_config(cfg);
    if (!out) {
        throw std::runtime_error("config: cannot write " + path.string());
    }
}

} // namespace mpdit
