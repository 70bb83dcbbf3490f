#pragma once

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "ajepa/common.hpp"
#include "ajepa/io.hpp"
#include "ajepa/mask.hpp"
#include "ajepa/mel.hpp"
#include "ajepa/model.hpp"
#include "ajepa/rng.hpp"
#include "ajepa/synth.hpp"
#include "ajepa/tensor.hpp"
#include "ajepa/wav.hpp"

#include "json.hpp"

namespace ajepa {

struct OptimConfig {
    double lr = 3e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double warmup_frac = 0.05;
    double grad_clip = 0.0;  // 0 disables clipping

    void validate() const {
        if (lr <= 0.0) throw std::invalid_argument("optim: lr must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw std::invalid_argument("optim: betas must lie in [0, 1)");
        if (eps <= 0.0) throw std::invalid_argument("optim: eps must be positive");
        if (weight_decay < 0.0) throw std::invalid_argument("optim: weight_decay must be >= 0");
        if (!(warmup_frac >= 0.0 && warmup_frac < 1.0))
            throw std::invalid_argument("optim: warmup_frac must lie in [0, 1)");
        if (grad_clip < 0.0) throw std::invalid_argument("optim: grad_clip must be >= 0");
    }
};

struct EmaConfig {
    double tau_base = 0.996;
    double tau_final = 1.0;

    void validate() const {
        if (!(tau_base >= 0.0 && tau_base <= 1.0 && tau_final >= 0.0 && tau_final <= 1.0))
            throw std::invalid_argument("ema: taus must lie in [0, 1]");
    }
};

struct MaskConfig {
    MaskStrategy strategy = MaskStrategy::unstructured;
    double target_ratio = 0.7;  // unstructured and time strategies
    bool time_contiguous = false;
    MultiBlockParams multiblock;

    void validate() const {
        if (strategy != MaskStrategy::multiblock && !(target_ratio > 0.0 && target_ratio < 1.0))
            throw std::invalid_argument("mask: target_ratio must lie in (0, 1)");
        if (strategy == MaskStrategy::multiblock) multiblock.validate();
    }
};

struct TrainConfig {
    std::uint64_t seed = 1234;
    std::string manifest = "data/manifest.jsonl";
    std::string out_dir = "runs/pretrain";
    FrontendConfig frontend;
    ModelConfig model;
    MaskConfig mask;
    OptimConfig optim;
    EmaConfig ema;
    std::size_t batch_size = 16;
    std::size_t total_steps = 2000;
    std::size_t checkpoint_every = 500;
    std::size_t log_every = 50;

    /// Derives the patch grid from the frontend and checks everything.
    void finalize() {
        frontend.validate();
        if (frontend.n_mels % static_cast<int>(model.patch_side) != 0)
            throw std::invalid_argument("config: n_mels " + std::to_string(frontend.n_mels) +
                                        " not divisible by patch_side " +
                                        std::to_string(model.patch_side));
        if (frontend.target_frames % static_cast<int>(model.patch_side) != 0)
            throw std::invalid_argument("config: target_frames " +
                                        std::to_string(frontend.target_frames) +
                                        " not divisible by patch_side " +
                                        std::to_string(model.patch_side));
        model.grid_rows = static_cast<std::size_t>(frontend.n_mels) / model.patch_side;
        model.grid_cols = static_cast<std::size_t>(frontend.target_frames) / model.patch_side;
        model.validate();
        mask.validate();
        optim.validate();
        ema.validate();
        if (batch_size == 0 || total_steps == 0)
            throw std::invalid_argument("config: batch_size and total_steps must be positive");
        if (checkpoint_every == 0)
            throw std::invalid_argument("config: checkpoint_every must be positive");
        if (log_every == 0) throw std::invalid_argument("config: log_every must be positive");
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& ctx,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw std::invalid_argument("config: " + ctx + " must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (const char* k : allowed)
            if (key == k) {
                ok = true;
                break;
            }
        if (!ok)
            throw std::invalid_argument("config: unknown key \"" + key + "\" in " + ctx);
    }
}

inline double get_f64(const nlohmann::json& j, const char* key, double fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_number())
        throw std::invalid_argument(std::string("config: ") + key + " must be a number");
    return j[key].get<double>();
}

inline std::uint64_t get_u64(const nlohmann::json& j, const char* key, std::uint64_t fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j[key];
    const bool ok = v.is_number_unsigned() ||
                    (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    if (!ok)
        throw std::invalid_argument(std::string("config: ") + key +
                                    " must be a non-negative integer");
    return v.get<std::uint64_t>();
}

inline bool get_bool(const nlohmann::json& j, const char* key, bool fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_boolean())
        throw std::invalid_argument(std::string("config: ") + key + " must be a boolean");
    return j[key].get<bool>();
}

inline std::string get_str(const nlohmann::json& j, const char* key, const std::string& fallback) {
    if (!j.contains(key)) return fallback;
    if (!j[key].is_string())
        throw std::invalid_argument(std::string("config: ") + key + " must be a string");
    return j[key].get<std::string>();
}

}  // namespace detail

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["manifest"] = c.manifest;
    j["out_dir"] = c.out_dir;
    j["frontend"] = {{"sample_rate", c.frontend.sample_rate}, {"n_fft", c.frontend.n_fft},
                     {"hop", c.frontend.hop},                 {"n_mels", c.frontend.n_mels},
                     {"f_min", c.frontend.f_min},             {"f_max", c.frontend.f_max},
                     {"duration_s", c.frontend.duration_s},
                     {"target_frames", c.frontend.target_frames}};
    j["model"] = {{"patch_side", c.model.patch_side},
                  {"dim", c.model.dim},
                  {"enc_layers", c.model.enc_layers},
                  {"enc_heads", c.model.enc_heads},
                  {"pred_layers", c.model.pred_layers},
                  {"pred_heads", c.model.pred_heads},
                  {"mlp_ratio", c.model.mlp_ratio},
                  {"elementwise_distance", c.model.elementwise_distance},
                  {"latent_target_masking", c.model.latent_target_masking}};
    j["mask"] = {{"strategy", to_string(c.mask.strategy)},
                 {"target_ratio", c.mask.target_ratio},
                 {"time_contiguous", c.mask.time_contiguous},
                 {"num_target_blocks", c.mask.multiblock.num_target_blocks},
                 {"target_scale_min", c.mask.multiblock.target_scale_min},
                 {"target_scale_max", c.mask.multiblock.target_scale_max},
                 {"target_aspect_min", c.mask.multiblock.target_aspect_min},
                 {"target_aspect_max", c.mask.multiblock.target_aspect_max},
                 {"context_scale_min", c.mask.multiblock.context_scale_min},
                 {"context_scale_max", c.mask.multiblock.context_scale_max}};
    j["optim"] = {{"lr", c.optim.lr},
                  {"weight_decay", c.optim.weight_decay},
                  {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2},
                  {"eps", c.optim.eps},
                  {"warmup_frac", c.optim.warmup_frac},
                  {"grad_clip", c.optim.grad_clip}};
    j["ema"] = {{"tau_base", c.ema.tau_base}, {"tau_final", c.ema.tau_final}};
    j["train"] = {{"batch_size", c.batch_size},
                  {"total_steps", c.total_steps},
                  {"checkpoint_every", c.checkpoint_every},
                  {"log_every", c.log_every}};
    return j;
}

/// Parses a config object. Every key is optional and falls back to the desk
/// scale defaults; keys outside the schema are a hard error.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    using namespace detail;
    check_keys(j, "top level",
               {"seed", "manifest", "out_dir", "frontend", "model", "mask", "optim", "ema",
                "train"});
    TrainConfig c;
    // Desk scale defaults differ from the struct defaults for the frontend,
    // which is sized for the full recipe.
    c.frontend.n_mels = 40;
    c.frontend.target_frames = 64;
    c.frontend.duration_s = 0.7;
    c.model.patch_side = 8;

    c.seed = get_u64(j, "seed", c.seed);
    c.manifest = get_str(j, "manifest", c.manifest);
    c.out_dir = get_str(j, "out_dir", c.out_dir);
    if (j.contains("frontend")) {
        const auto& f = j["frontend"];
        check_keys(f, "frontend", {"sample_rate", "n_fft", "hop", "n_mels", "f_min", "f_max",
                                   "duration_s", "target_frames"});
        c.frontend.sample_rate = static_cast<int>(get_u64(f, "sample_rate", c.frontend.sample_rate));
        c.frontend.n_fft = static_cast<int>(get_u64(f, "n_fft", c.frontend.n_fft));
        c.frontend.hop = static_cast<int>(get_u64(f, "hop", c.frontend.hop));
        c.frontend.n_mels = static_cast<int>(get_u64(f, "n_mels", c.frontend.n_mels));
        c.frontend.f_min = get_f64(f, "f_min", c.frontend.f_min);
        c.frontend.f_max = get_f64(f, "f_max", c.frontend.f_max);
        c.frontend.duration_s = get_f64(f, "duration_s", c.frontend.duration_s);
        c.frontend.target_frames =
            static_cast<int>(get_u64(f, "target_frames", c.frontend.target_frames));
    }
    if (j.contains("model")) {
        const auto& m = j["model"];
        check_keys(m, "model",
                   {"patch_side", "dim", "enc_layers", "enc_heads", "pred_layers", "pred_heads",
                    "mlp_ratio", "elementwise_distance", "latent_target_masking"});
        c.model.patch_side = get_u64(m, "patch_side", c.model.patch_side);
        c.model.dim = get_u64(m, "dim", c.model.dim);
        c.model.enc_layers = get_u64(m, "enc_layers", c.model.enc_layers);
        c.model.enc_heads = get_u64(m, "enc_heads", c.model.enc_heads);
        c.model.pred_layers = get_u64(m, "pred_layers", c.model.pred_layers);
        c.model.pred_heads = get_u64(m, "pred_heads", c.model.pred_heads);
        c.model.mlp_ratio = get_f64(m, "mlp_ratio", c.model.mlp_ratio);
        c.model.elementwise_distance =
            get_bool(m, "elementwise_distance", c.model.elementwise_distance);
        c.model.latent_target_masking =
            get_bool(m, "latent_target_masking", c.model.latent_target_masking);
    }
    if (j.contains("mask")) {
        const auto& m = j["mask"];
        check_keys(m, "mask",
                   {"strategy", "target_ratio", "time_contiguous", "num_target_blocks",
                    "target_scale_min", "target_scale_max", "target_aspect_min",
                    "target_aspect_max", "context_scale_min", "context_scale_max"});
        c.mask.strategy = mask_strategy_from_string(get_str(m, "strategy", "unstructured"));
        c.mask.target_ratio = get_f64(m, "target_ratio", c.mask.target_ratio);
        c.mask.time_contiguous = get_bool(m, "time_contiguous", c.mask.time_contiguous);
        auto& mb = c.mask.multiblock;
        mb.num_target_blocks = get_u64(m, "num_target_blocks", mb.num_target_blocks);
        mb.target_scale_min = get_f64(m, "target_scale_min", mb.target_scale_min);
        mb.target_scale_max = get_f64(m, "target_scale_max", mb.target_scale_max);
        mb.target_aspect_min = get_f64(m, "target_aspect_min", mb.target_aspect_min);
        mb.target_aspect_max = get_f64(m, "target_aspect_max", mb.target_aspect_max);
        mb.context_scale_min = get_f64(m, "context_scale_min", mb.context_scale_min);
        mb.context_scale_max = get_f64(m, "context_scale_max", mb.context_scale_max);
    }
    if (j.contains("optim")) {
        const auto& o = j["optim"];
        check_keys(o, "optim", {"lr", "weight_decay", "beta1", "beta2", "eps", "warmup_frac",
                                "grad_clip"});
        c.optim.lr = get_f64(o, "lr", c.optim.lr);
        c.optim.weight_decay = get_f64(o, "weight_decay", c.optim.weight_decay);
        c.optim.beta1 = get_f64(o, "beta1", c.optim.beta1);
        c.optim.beta2 = get_f64(o, "beta2", c.optim.beta2);
        c.optim.eps = get_f64(o, "eps", c.optim.eps);
        c.optim.warmup_frac = get_f64(o, "warmup_frac", c.optim.warmup_frac);
        c.optim.grad_clip = get_f64(o, "grad_clip", c.optim.grad_clip);
    }
    if (j.contains("ema")) {
        const auto& e = j["ema"];
        check_keys(e, "ema", {"tau_base", "tau_final"});
        c.ema.tau_base = get_f64(e, "tau_base", c.ema.tau_base);
        c.ema.tau_final = get_f64(e, "tau_final", c.ema.tau_final);
    }
    if (j.contains("train")) {
        const auto& t = j["train"];
        check_keys(t, "train", {"batch_size", "total_steps", "checkpoint_every", "log_every"});
        c.batch_size = get_u64(t, "batch_size", c.batch_size);
        c.total_steps = get_u64(t, "total_steps", c.total_steps);
        c.checkpoint_every = get_u64(t, "checkpoint_every", c.checkpoint_every);
        c.log_every = get_u64(t, "log_every", c.log_every);
    }
    c.finalize();
    return c;
}

inline TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config " + path + ": " + e.what());
    }
    return train_config_from_json(j);
}

/// Linear warmup from zero over round(warmup_frac * total) steps, then cosine
/// decay to zero at total_steps.
inline double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                          double warmup_frac) {
    if (total_steps == 0) throw std::invalid_argument("lr_schedule: total_steps must be > 0");
    const auto warmup = static_cast<std::size_t>(
        std::llround(warmup_frac * static_cast<double>(total_steps)));
    if (warmup > 0 && step < warmup)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
    const double t = std::min(1.0, static_cast<double>(step - warmup) / span);
    return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793238462643383279 * t));
}

struct AdamState {
    std::vector<float> m, v;
};

/// One decoupled weight decay Adam update. t is the 1-based update count for
/// bias correction; decay_this decides whether weight decay applies to this
/// tensor.
inline void adamw_update(std::vector<float>& param, const std::vector<float>& grad,
                         AdamState& state, std::size_t t, double lr, const OptimConfig& cfg,
                         bool decay_this) {
    if (param.size() != grad.size())
        throw std::invalid_argument("adamw_update: param/grad size mismatch");
    if (state.m.size() != param.size()) state.m.assign(param.size(), 0.0f);
    if (state.v.size() != param.size()) state.v.assign(param.size(), 0.0f);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    const double wd = decay_this ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double g = grad[i];
        const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = static_cast<float>(m);
        state.v[i] = static_cast<float>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        param[i] = static_cast<float>(param[i] -
                                      lr * (mhat / (std::sqrt(vhat) + cfg.eps) + wd * param[i]));
    }
}

/// Weight decay applies to weight matrices only; biases, norm affines, and
/// the mask token are exempt.
inline bool decay_param(const std::string& name) {
    return name.size() >= 2 && name.rfind(".w") == name.size() - 2;
}

struct Checkpoint {
    std::size_t step = 0;
    std::string train_rng_state;
    TrainConfig cfg;
    double mel_mean = 0.0;
    double mel_std = 1.0;
    ModelParams<float> online;
    EncoderParams<float> target_encoder;
    std::map<std::string, AdamState> adam;  // keyed by online parameter name
};

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little endian floats");

inline constexpr char kCkptMagic[8] = {'A', 'J', 'E', 'P', 'A', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCkptVersion = 1;

template <typename F>
void visit_checkpoint_tensors(Checkpoint& ck, F&& f) {
    for_each_param(ck.online, [&](const std::string& name, const auto& shape, auto& data) {
        f(name, shape, data);
    });
    for_each_param(ck.target_encoder, "target.enc",
                   [&](const std::string& name, const auto& shape, auto& data) {
                       f(name, shape, data);
                   });
    for_each_param(ck.online, [&](const std::string& name, const auto& shape, auto&) {
        AdamState& st = ck.adam[name];
        f("adam.m." + name, shape, st.m);
        f("adam.v." + name, shape, st.v);
    });
}

}  // namespace detail

inline std::string encode_checkpoint(Checkpoint& ck) {
    // Adam slots may still be lazily unallocated for untouched tensors.
    for_each_param(ck.online, [&](const std::string& name, const auto&, auto& data) {
        AdamState& st = ck.adam[name];
        if (st.m.size() != data.size()) st.m.assign(data.size(), 0.0f);
        if (st.v.size() != data.size()) st.v.assign(data.size(), 0.0f);
    });

    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    detail::visit_checkpoint_tensors(ck, [&](const std::string& name, const auto& shape,
                                             const std::vector<float>& data) {
        nlohmann::json t;
        t["name"] = name;
        t["shape"] = shape;
        t["offset"] = offset;
        tensors.push_back(std::move(t));
        offset += data.size() * sizeof(float);
    });

    nlohmann::json header;
    header["step"] = ck.step;
    header["rng"] = {{"train", ck.train_rng_state}};
    header["config"] = to_json(ck.cfg);
    header["mel_mean"] = ck.mel_mean;
    header["mel_std"] = ck.mel_std;
    header["threads"] = 1;
    header["tensors"] = std::move(tensors);
    const std::string hdr = header.dump();

    std::string out;
    out.reserve(20 + hdr.size() + offset);
    out.append(detail::kCkptMagic, sizeof(detail::kCkptMagic));
    const std::uint32_t version = detail::kCkptVersion;
    out.append(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t hdr_len = hdr.size();
    out.append(reinterpret_cast<const char*>(&hdr_len), sizeof(hdr_len));
    out += hdr;
    detail::visit_checkpoint_tensors(ck, [&](const std::string&, const auto&,
                                             const std::vector<float>& data) {
        out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
    });
    return out;
}

inline void save_checkpoint(const std::string& path, Checkpoint& ck) {
    write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
    if (bytes.size() < 20) throw FormatError("checkpoint: truncated header");
    if (std::memcmp(bytes.data(), detail::kCkptMagic, sizeof(detail::kCkptMagic)) != 0)
        throw FormatError("checkpoint: bad magic");
    std::uint32_t version = 0;
    std::memcpy(&version, bytes.data() + 8, sizeof(version));
    if (version != detail::kCkptVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    std::uint64_t hdr_len = 0;
    std::memcpy(&hdr_len, bytes.data() + 12, sizeof(hdr_len));
    if (20 + hdr_len > bytes.size()) throw FormatError("checkpoint: header overruns file");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 20, bytes.begin() + 20 + hdr_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
    }

    Checkpoint ck;
    try {
        ck.step = header.at("step").get<std::size_t>();
        ck.train_rng_state = header.at("rng").at("train").get<std::string>();
        ck.cfg = train_config_from_json(header.at("config"));
        ck.mel_mean = header.at("mel_mean").get<double>();
        ck.mel_std = header.at("mel_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad header field: ") + e.what());
    }

    struct Entry {
        std::size_t offset = 0;
        std::vector<std::size_t> shape;
    };
    std::map<std::string, Entry> table;
    for (const auto& t : header.at("tensors")) {
        Entry e;
        e.offset = t.at("offset").get<std::size_t>();
        e.shape = t.at("shape").get<std::vector<std::size_t>>();
        table[t.at("name").get<std::string>()] = std::move(e);
    }

    const unsigned char* blob = bytes.data() + 20 + hdr_len;
    const std::size_t blob_size = bytes.size() - 20 - hdr_len;
    const auto fill = [&](const std::string& name, const std::vector<std::size_t>& shape,
                          std::vector<float>& data) {
        const auto it = table.find(name);
        if (it == table.end()) throw FormatError("checkpoint: missing tensor " + name);
        if (it->second.shape != shape)
            throw FormatError("checkpoint: tensor " + name + " has shape " +
                              shape_str(it->second.shape) + ", expected " + shape_str(shape));
        const std::size_t n = Graph<float>::numel_of(shape);
        if (it->second.offset + n * sizeof(float) > blob_size)
            throw FormatError("checkpoint: tensor " + name + " overruns file");
        data.resize(n);
        std::memcpy(data.data(), blob + it->second.offset, n * sizeof(float));
    };

    Rng init_rng(0);  // layout only; every value is overwritten below
    ck.online = init_params<float>(ck.cfg.model, init_rng);
    ck.target_encoder = init_params<float>(ck.cfg.model, init_rng).encoder;
    detail::visit_checkpoint_tensors(ck, fill);
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_binary_file(path);
    return decode_checkpoint(std::span<const unsigned char>(bytes.data(), bytes.size()));
}

/// Which manifest rows a dataset draws from: pretraining uses the unlabeled
/// part of the train split, the probe uses the labeled parts.
enum class DatasetSelect { pretrain, probe_train, probe_test };

inline std::string to_string(DatasetSelect s) {
    switch (s) {
        case DatasetSelect::pretrain: return "pretrain";
        case DatasetSelect::probe_train: return "probe_train";
        case DatasetSelect::probe_test: return "probe_test";
    }
    return "?";
}

inline bool selects(DatasetSelect sel, const ManifestEntry& e) {
    switch (sel) {
        case DatasetSelect::pretrain: return e.split == "train" && e.label < 0;
        case DatasetSelect::probe_train: return e.split == "train" && e.label >= 0;
        case DatasetSelect::probe_test: return e.split == "test";
    }
    return false;
}

/// Normalized full-length mel spectrograms for one slice of the manifest, in
/// manifest order. Clips that fail to decode are skipped with a warning, up
/// to 10 percent of the selection.
struct MelDataset {
    std::vector<MelSpectrogram> mels;
    std::vector<int> labels;
    std::vector<std::string> clip_ids;
    double mean = 0.0;
    double stddev = 1.0;
};

inline MelDataset load_mel_dataset(const std::string& manifest_path, DatasetSelect sel,
                                   const FrontendConfig& fe, const double* stats_mean = nullptr,
                                   const double* stats_std = nullptr) {
    const auto entries = read_manifest(manifest_path);
    MelDataset ds;
    std::size_t requested = 0, failed = 0;
    for (const ManifestEntry& e : entries) {
        if (!selects(sel, e)) continue;
        ++requested;
        try {
            const WaveForm w = read_wav_file(resolve_clip_path(manifest_path, e));
            ds.mels.push_back(log_mel(w, fe));
            ds.labels.push_back(e.label);
            ds.clip_ids.push_back(e.clip_id);
        } catch (const std::exception& ex) {
            ++failed;
            std::cerr << "warning: skipping clip " << e.clip_id << ": " << ex.what() << "\n";
        }
    }
    if (requested == 0)
        throw std::runtime_error("manifest " + manifest_path + " has no clips for " +
                                 to_string(sel));
    if (failed * 10 > requested)
        throw std::runtime_error("more than 10 percent of " + to_string(sel) +
                                 " failed to load (" + std::to_string(failed) + "/" +
                                 std::to_string(requested) + ")");

    if (stats_mean && stats_std) {
        ds.mean = *stats_mean;
        ds.stddev = *stats_std;
    } else {
        double acc = 0.0;
        std::size_t n = 0;
        for (const auto& m : ds.mels) {
            for (const float v : m.values) acc += v;
            n += m.values.size();
        }
        ds.mean = acc / static_cast<double>(n);
        double var = 0.0;
        for (const auto& m : ds.mels)
            for (const float v : m.values) var += (v - ds.mean) * (v - ds.mean);
        ds.stddev = std::sqrt(var / static_cast<double>(n));
        if (ds.stddev <= 0.0) ds.stddev = 1.0;
    }
    for (auto& m : ds.mels) m = normalize(m, ds.mean, ds.stddev);
    return ds;
}

inline MaskSpec draw_mask(const MaskConfig& mc, std::size_t rows, std::size_t cols, Rng& rng) {
    switch (mc.strategy) {
        case MaskStrategy::unstructured:
            return sample_unstructured(rows, cols, mc.target_ratio, rng);
        case MaskStrategy::multiblock:
            return sample_multiblock(rows, cols, mc.multiblock, rng);
        case MaskStrategy::time:
            return sample_time(rows, cols, mc.target_ratio, rng, mc.time_contiguous);
    }
    throw std::logic_error("draw_mask: unreachable");
}

struct PretrainOptions {
    std::string manifest_path;
    std::string out_dir;
    std::string resume_from;     // checkpoint path; empty starts fresh
    std::size_t stop_after = 0;  // optimizer steps this invocation; 0 = until total_steps
    bool quiet = false;
};

struct PretrainResult {
    std::size_t final_step = 0;
    double final_loss = 0.0;
    std::string last_checkpoint;
};

namespace detail {

/// Stateless per-epoch permutation so resume never depends on replaying
/// earlier epochs.
inline std::vector<std::size_t> epoch_permutation(std::size_t epoch, std::size_t n,
                                                  std::uint64_t seed) {
    Rng rng(fnv1a64("shuffle:" + std::to_string(epoch), seed));
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    return perm;
}

inline void append_metrics_row(std::ofstream& out, std::size_t step, double loss, double lr,
                               double tau, double grad_norm) {
    char buf[192];
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g\n", step, loss, lr, tau, grad_norm);
    out << buf;
    out.flush();
}

}  // namespace detail

inline PretrainResult run_pretraining(const TrainConfig& cfg_in, const PretrainOptions& opt) {
    namespace fs = std::filesystem;
    TrainConfig cfg = cfg_in;
    cfg.finalize();
    fs::create_directories(opt.out_dir);

    Checkpoint ck;
    if (!opt.resume_from.empty()) {
        ck = load_checkpoint(opt.resume_from);
        // Paths may legitimately move between invocations; everything else
        // must match or the run would silently change character.
        nlohmann::json a = to_json(ck.cfg), b = to_json(cfg);
        for (auto* j : {&a, &b}) {
            j->erase("manifest");
            j->erase("out_dir");
        }
        if (a != b)
            throw std::invalid_argument(
                "resume: config does not match the checkpoint; rerun with the stored config");
    } else {
        ck.cfg = cfg;
        Rng init_rng(fnv1a64("init", cfg.seed));
        ck.online = init_params<float>(cfg.model, init_rng);
        ck.target_encoder = ck.online.encoder;  // EMA starts as a copy
        ck.step = 0;
        Rng train_rng(fnv1a64("train", cfg.seed));
        ck.train_rng_state = train_rng.state();
    }

    const bool fresh_stats = opt.resume_from.empty();
    const MelDataset ds =
        fresh_stats
            ? load_mel_dataset(opt.manifest_path, DatasetSelect::pretrain, cfg.frontend)
            : load_mel_dataset(opt.manifest_path, DatasetSelect::pretrain, cfg.frontend,
                               &ck.mel_mean, &ck.mel_std);
    if (fresh_stats) {
        ck.mel_mean = ds.mean;
        ck.mel_std = ds.stddev;
    }
    const std::size_t n_clips = ds.mels.size();

    Rng train_rng(0);
    train_rng.set_state(ck.train_rng_state);

    const auto pos_table =
        sinusoidal_pos_embed<float>(cfg.model.grid_rows, cfg.model.grid_cols, cfg.model.dim);

    const std::string metrics_path = (fs::path(opt.out_dir) / "metrics.csv").string();
    const bool new_metrics = !fs::exists(metrics_path);
    std::ofstream metrics(metrics_path, std::ios::app);
    if (!metrics) throw std::runtime_error("cannot open metrics file: " + metrics_path);
    if (new_metrics) metrics << "step,loss,lr,tau,grad_norm\n";

    // Small cache of epoch permutations; a batch can straddle two epochs.
    std::map<std::size_t, std::vector<std::size_t>> perms;
    const auto perm_for = [&](std::size_t epoch) -> const std::vector<std::size_t>& {
        auto it = perms.find(epoch);
        if (it == perms.end()) {
            it = perms.emplace(epoch, detail::epoch_permutation(epoch, n_clips, cfg.seed)).first;
            if (perms.size() > 4) perms.erase(perms.begin());
        }
        return it->second;
    };

    PretrainResult result;
    result.final_step = ck.step;
    std::size_t done_here = 0;

    for (std::size_t s = ck.step; s < cfg.total_steps; ++s) {
        if (opt.stop_after != 0 && done_here >= opt.stop_after) break;
        const double lr = lr_schedule(s, cfg.total_steps, cfg.optim.lr, cfg.optim.warmup_frac);

        Graph<float> g;
        detail::FlatTensors<float> flat;
        const BoundEncoder<float> online_enc = bind_encoder(g, ck.online.encoder, true, &flat);
        const BoundPredictor<float> predictor = bind_predictor(g, ck.online.predictor, true, &flat);
        const BoundEncoder<float> target_enc = bind_encoder(g, ck.target_encoder, false);

        std::vector<Tensor<float>> losses;
        for (std::size_t e = 0; e < cfg.batch_size; ++e) {
            const std::size_t p = s * cfg.batch_size + e;
            const std::size_t epoch = p / n_clips;
            const std::size_t idx = perm_for(epoch)[p % n_clips];
            const MelSpectrogram cropped =
                pad_or_crop(ds.mels[idx], static_cast<std::size_t>(cfg.frontend.target_frames),
                            CropMode::random, &train_rng);
            const PatchGrid grid = patchify(cropped, cfg.model.patch_side);
            const MaskSpec mask =
                draw_mask(cfg.mask, cfg.model.grid_rows, cfg.model.grid_cols, train_rng);
            losses.push_back(jepa_loss(g, cfg.model, online_enc, predictor, target_enc, grid,
                                       mask, pos_table));
        }
        Tensor<float> loss = mean(concat(losses, 0));
        g.backward(loss);

        double sq_norm = 0.0;
        for (const auto& [name, tensor] : flat)
            for (const float v : tensor.grad()) sq_norm += static_cast<double>(v) * v;
        const double grad_norm = std::sqrt(sq_norm);
        double scale = 1.0;
        if (cfg.optim.grad_clip > 0.0 && grad_norm > cfg.optim.grad_clip)
            scale = cfg.optim.grad_clip / grad_norm;

        std::map<std::string, std::vector<float>*> param_of;
        for_each_param(ck.online, [&](const std::string& name, const auto&, auto& data) {
            param_of[name] = &data;
        });
        for (const auto& [name, tensor] : flat) {
            std::vector<float> grad = tensor.grad();
            if (scale != 1.0)
                for (float& v : grad) v = static_cast<float>(v * scale);
            adamw_update(*param_of.at(name), grad, ck.adam[name], s + 1, lr, cfg.optim,
                         decay_param(name));
        }

        const double tau = tau_schedule(s + 1, cfg.total_steps, cfg.ema.tau_base,
                                        cfg.ema.tau_final);
        ema_update(ck.target_encoder, ck.online.encoder, tau);

        ck.step = s + 1;
        ++done_here;
        result.final_step = ck.step;
        result.final_loss = loss.item();
        detail::append_metrics_row(metrics, ck.step, result.final_loss, lr, tau, grad_norm);
        if (!opt.quiet && (ck.step % cfg.log_every == 0 || ck.step == cfg.total_steps))
            std::cerr << "step " << ck.step << "/" << cfg.total_steps << " loss "
                      << result.final_loss << " lr " << lr << "\n";

        const bool stopping = (opt.stop_after != 0 && done_here >= opt.stop_after) ||
                              ck.step == cfg.total_steps;
        if (ck.step % cfg.checkpoint_every == 0 || stopping) {
            ck.train_rng_state = train_rng.state();
            const std::string blob = encode_checkpoint(ck);
            char namebuf[64];
            std::snprintf(namebuf, sizeof(namebuf), "checkpoint_%06zu.bin", ck.step);
            const std::string periodic = (fs::path(opt.out_dir) / namebuf).string();
            write_file_atomic(periodic, blob);
            write_file_atomic((fs::path(opt.out_dir) / "checkpoint_latest.bin").string(), blob);
            result.last_checkpoint = periodic;
        }
    }
    return result;
}

}  // namespace ajepa
