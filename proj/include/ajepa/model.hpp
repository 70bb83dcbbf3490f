#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ajepa/mask.hpp"
#include "ajepa/rng.hpp"
#include "ajepa/tensor.hpp"

namespace ajepa {

struct ModelConfig {
    std::size_t grid_rows = 5;  // frequency patches
    std::size_t grid_cols = 8;  // time patches
    std::size_t patch_side = 8;
    std::size_t dim = 64;
    std::size_t enc_layers = 2;
    std::size_t enc_heads = 2;
    std::size_t pred_layers = 1;
    std::size_t pred_heads = 2;
    double mlp_ratio = 4.0;
    // Regime switch of the latent distance per coordinate instead of per
    // vector.
    bool elementwise_distance = false;
    // Feed the whole grid to the target encoder and pick target rows from its
    // output. When false the target encoder sees only the target patches.
    bool latent_target_masking = true;

    std::size_t patch_count() const { return grid_rows * grid_cols; }
    std::size_t patch_dim() const { return patch_side * patch_side; }
    std::size_t mlp_hidden() const {
        return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(dim)));
    }
    /// Dimension of the frozen-encoder feature vector: time-averaged patch
    /// representations concatenated across frequency patches.
    std::size_t feature_dim() const { return grid_rows * dim; }

    void validate() const {
        if (grid_rows == 0 || grid_cols == 0 || patch_side == 0)
            throw std::invalid_argument("model config: empty patch grid");
        if (patch_count() < 2)
            throw std::invalid_argument("model config: need at least 2 patches to mask");
        if (dim == 0 || dim % 4 != 0)
            throw std::invalid_argument("model config: dim must be a positive multiple of 4");
        if (enc_heads == 0 || dim % enc_heads != 0)
            throw std::invalid_argument("model config: enc_heads must divide dim");
        if (pred_heads == 0 || dim % pred_heads != 0)
            throw std::invalid_argument("model config: pred_heads must divide dim");
        if (enc_layers == 0 || pred_layers == 0)
            throw std::invalid_argument("model config: need at least one layer per stack");
        if (mlp_hidden() == 0) throw std::invalid_argument("model config: mlp_ratio too small");
    }
};

template <typename T>
struct Linear {
    std::vector<T> w;  // [in, out] row-major
    std::vector<T> b;  // [out]
    std::size_t in = 0, out = 0;
};

template <typename T>
struct LayerNormParams {
    std::vector<T> gamma, beta;
    std::size_t dim = 0;
};

template <typename T>
struct BlockParams {
    LayerNormParams<T> ln1, ln2;
    Linear<T> q, k, v, proj;
    Linear<T> fc1, fc2;
};

template <typename T>
struct EncoderParams {
    Linear<T> patch_embed;
    std::vector<BlockParams<T>> blocks;
    LayerNormParams<T> ln_final;
};

template <typename T>
struct PredictorParams {
    Linear<T> in_proj;
    std::vector<BlockParams<T>> blocks;
    LayerNormParams<T> ln_final;
    Linear<T> out_proj;
    std::vector<T> mask_token;  // [dim]
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;
    EncoderParams<T> encoder;
    PredictorParams<T> predictor;
};

namespace detail {

template <typename LinearRef, typename F>
void visit_linear(LinearRef& lin, const std::string& prefix, F&& f) {
    f(prefix + ".w", std::vector<std::size_t>{lin.in, lin.out}, lin.w);
    f(prefix + ".b", std::vector<std::size_t>{lin.out}, lin.b);
}

template <typename LnRef, typename F>
void visit_ln(LnRef& ln, const std::string& prefix, F&& f) {
    f(prefix + ".gamma", std::vector<std::size_t>{ln.dim}, ln.gamma);
    f(prefix + ".beta", std::vector<std::size_t>{ln.dim}, ln.beta);
}

template <typename BlockRef, typename F>
void visit_block(BlockRef& blk, const std::string& prefix, F&& f) {
    visit_ln(blk.ln1, prefix + ".ln1", f);
    visit_linear(blk.q, prefix + ".q", f);
    visit_linear(blk.k, prefix + ".k", f);
    visit_linear(blk.v, prefix + ".v", f);
    visit_linear(blk.proj, prefix + ".proj", f);
    visit_ln(blk.ln2, prefix + ".ln2", f);
    visit_linear(blk.fc1, prefix + ".fc1", f);
    visit_linear(blk.fc2, prefix + ".fc2", f);
}

}  // namespace detail

/// Visits every encoder parameter in a fixed order as
/// f(name, shape, data_vector_ref).
template <typename EncRef, typename F>
void for_each_param(EncRef& enc, const std::string& prefix, F&& f) {
    detail::visit_linear(enc.patch_embed, prefix + ".patch_embed", f);
    for (std::size_t i = 0; i < enc.blocks.size(); ++i)
        detail::visit_block(enc.blocks[i], prefix + ".blocks." + std::to_string(i), f);
    detail::visit_ln(enc.ln_final, prefix + ".ln_final", f);
}

template <typename PredRef, typename F>
void for_each_predictor_param(PredRef& pred, const std::string& prefix, F&& f) {
    detail::visit_linear(pred.in_proj, prefix + ".in_proj", f);
    for (std::size_t i = 0; i < pred.blocks.size(); ++i)
        detail::visit_block(pred.blocks[i], prefix + ".blocks." + std::to_string(i), f);
    detail::visit_ln(pred.ln_final, prefix + ".ln_final", f);
    detail::visit_linear(pred.out_proj, prefix + ".out_proj", f);
    const std::size_t d = pred.mask_token.size();
    f(prefix + ".mask_token", std::vector<std::size_t>{d}, pred.mask_token);
}

template <typename ModelRef, typename F>
void for_each_param(ModelRef& model, F&& f) {
    for_each_param(model.encoder, "enc", f);
    for_each_predictor_param(model.predictor, "pred", f);
}

template <typename T>
std::size_t count_params(const ModelParams<T>& model) {
    std::size_t n = 0;
    for_each_param(model, [&](const std::string&, const auto&, const auto& data) {
        n += data.size();
    });
    return n;
}

namespace detail {

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out) {
    Linear<T> lin;
    lin.in = in;
    lin.out = out;
    lin.w.resize(in * out);
    lin.b.resize(out);
    return lin;
}

template <typename T>
LayerNormParams<T> make_ln(std::size_t dim) {
    LayerNormParams<T> ln;
    ln.dim = dim;
    ln.gamma.resize(dim);
    ln.beta.resize(dim);
    return ln;
}

template <typename T>
BlockParams<T> make_block(std::size_t dim, std::size_t hidden) {
    BlockParams<T> blk;
    blk.ln1 = make_ln<T>(dim);
    blk.q = make_linear<T>(dim, dim);
    blk.k = make_linear<T>(dim, dim);
    blk.v = make_linear<T>(dim, dim);
    blk.proj = make_linear<T>(dim, dim);
    blk.ln2 = make_ln<T>(dim);
    blk.fc1 = make_linear<T>(dim, hidden);
    blk.fc2 = make_linear<T>(hidden, dim);
    return blk;
}

}  // namespace detail

/// Fresh weights: truncated normal (std 0.02, clipped at two sigma) for every
/// weight matrix and the mask token, zeros for biases and beta, ones for
/// gamma. Draws happen in for_each_param order, so a given seed always yields
/// the same model.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelParams<T> model;
    model.cfg = cfg;
    model.encoder.patch_embed = detail::make_linear<T>(cfg.patch_dim(), cfg.dim);
    for (std::size_t i = 0; i < cfg.enc_layers; ++i)
        model.encoder.blocks.push_back(detail::make_block<T>(cfg.dim, cfg.mlp_hidden()));
    model.encoder.ln_final = detail::make_ln<T>(cfg.dim);
    model.predictor.in_proj = detail::make_linear<T>(cfg.dim, cfg.dim);
    for (std::size_t i = 0; i < cfg.pred_layers; ++i)
        model.predictor.blocks.push_back(detail::make_block<T>(cfg.dim, cfg.mlp_hidden()));
    model.predictor.ln_final = detail::make_ln<T>(cfg.dim);
    model.predictor.out_proj = detail::make_linear<T>(cfg.dim, cfg.dim);
    model.predictor.mask_token.resize(cfg.dim);

    for_each_param(model, [&](const std::string& name, const auto&, auto& data) {
        const bool is_gamma = name.size() >= 6 && name.rfind(".gamma") == name.size() - 6;
        const bool is_zero = (name.size() >= 2 && name.rfind(".b") == name.size() - 2) ||
                             (name.size() >= 5 && name.rfind(".beta") == name.size() - 5);
        for (auto& v : data) {
            if (is_gamma)
                v = T(1);
            else if (is_zero)
                v = T(0);
            else
                v = static_cast<T>(rng.trunc_normal(0.02));
        }
    });
    return model;
}

/// Linear interpolation of the target-encoder momentum from tau_base at step
/// 0 to tau_final at step total_steps.
inline double tau_schedule(std::size_t step, std::size_t total_steps, double tau_base,
                           double tau_final) {
    if (total_steps == 0) throw std::invalid_argument("tau_schedule: total_steps must be > 0");
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return tau_base + (tau_final - tau_base) * t;
}

/// target <- tau * target + (1 - tau) * online, parameter by parameter.
template <typename T>
void ema_update(EncoderParams<T>& target, const EncoderParams<T>& online, double tau) {
    std::vector<std::vector<T>*> dst;
    for_each_param(target, "enc", [&](const std::string&, const auto&, auto& data) {
        dst.push_back(&data);
    });
    std::size_t i = 0;
    for_each_param(online, "enc", [&](const std::string&, const auto&, const auto& data) {
        if (i >= dst.size() || dst[i]->size() != data.size())
            throw std::invalid_argument("ema_update: online and target encoders do not match");
        T* t = dst[i]->data();
        for (std::size_t k = 0; k < data.size(); ++k)
            t[k] = static_cast<T>(tau * static_cast<double>(t[k]) +
                                  (1.0 - tau) * static_cast<double>(data[k]));
        ++i;
    });
}

/// 2D sinusoidal position table, [rows*cols, dim] row-major over (row, col).
/// Quarters of each embedding hold sin/cos of the row index and sin/cos of
/// the column index at geometrically spaced frequencies.
template <typename T>
std::vector<T> sinusoidal_pos_embed(std::size_t rows, std::size_t cols, std::size_t dim) {
    if (dim == 0 || dim % 4 != 0)
        throw std::invalid_argument("sinusoidal_pos_embed: dim must be a positive multiple of 4");
    const std::size_t quarter = dim / 4;
    std::vector<T> table(rows * cols * dim);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            T* e = table.data() + (r * cols + c) * dim;
            for (std::size_t i = 0; i < quarter; ++i) {
                const double omega =
                    std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
                e[i] = static_cast<T>(std::sin(static_cast<double>(r) * omega));
                e[quarter + i] = static_cast<T>(std::cos(static_cast<double>(r) * omega));
                e[2 * quarter + i] = static_cast<T>(std::sin(static_cast<double>(c) * omega));
                e[3 * quarter + i] = static_cast<T>(std::cos(static_cast<double>(c) * omega));
            }
        }
    return table;
}

/// Scalar smoothed L1 of a residual vector: 0.5 * ||u||_2^2 when ||u||_1 < 1,
/// else ||u||_1 - 0.5. elementwise=true applies that rule per coordinate and
/// sums.
template <typename T>
T smoothed_l1(std::span<const T> u, bool elementwise = false) {
    if (elementwise) {
        T acc = T(0);
        for (const T x : u)
            acc += std::abs(x) < T(1) ? T(0.5) * x * x : std::abs(x) - T(0.5);
        return acc;
    }
    T l1 = T(0), sq = T(0);
    for (const T x : u) {
        l1 += std::abs(x);
        sq += x * x;
    }
    return l1 < T(1) ? T(0.5) * sq : l1 - T(0.5);
}

// Graph-bound views of the parameter structs.

template <typename T>
struct BoundLinear {
    Tensor<T> w, b;
};

template <typename T>
struct BoundLayerNorm {
    Tensor<T> gamma, beta;
};

template <typename T>
struct BoundBlock {
    BoundLayerNorm<T> ln1, ln2;
    BoundLinear<T> q, k, v, proj, fc1, fc2;
};

template <typename T>
struct BoundEncoder {
    BoundLinear<T> patch_embed;
    std::vector<BoundBlock<T>> blocks;
    BoundLayerNorm<T> ln_final;
};

template <typename T>
struct BoundPredictor {
    BoundLinear<T> in_proj;
    std::vector<BoundBlock<T>> blocks;
    BoundLayerNorm<T> ln_final;
    BoundLinear<T> out_proj;
    Tensor<T> mask_token;
};

namespace detail {

template <typename T>
using FlatTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Tensor<T> bind_one(Graph<T>& g, const std::string& name, std::vector<std::size_t> shape,
                   const std::vector<T>& data, bool req, FlatTensors<T>* flat) {
    Tensor<T> t = g.leaf(std::move(shape), data, req);
    if (flat) flat->emplace_back(name, t);
    return t;
}

template <typename T>
BoundLinear<T> bind_linear(Graph<T>& g, const Linear<T>& lin, const std::string& prefix, bool req,
                           FlatTensors<T>* flat) {
    BoundLinear<T> out;
    out.w = bind_one(g, prefix + ".w", {lin.in, lin.out}, lin.w, req, flat);
    out.b = bind_one(g, prefix + ".b", {lin.out}, lin.b, req, flat);
    return out;
}

template <typename T>
BoundLayerNorm<T> bind_ln(Graph<T>& g, const LayerNormParams<T>& ln, const std::string& prefix,
                          bool req, FlatTensors<T>* flat) {
    BoundLayerNorm<T> out;
    out.gamma = bind_one(g, prefix + ".gamma", {ln.dim}, ln.gamma, req, flat);
    out.beta = bind_one(g, prefix + ".beta", {ln.dim}, ln.beta, req, flat);
    return out;
}

template <typename T>
BoundBlock<T> bind_block(Graph<T>& g, const BlockParams<T>& blk, const std::string& prefix,
                         bool req, FlatTensors<T>* flat) {
    BoundBlock<T> out;
    out.ln1 = bind_ln(g, blk.ln1, prefix + ".ln1", req, flat);
    out.q = bind_linear(g, blk.q, prefix + ".q", req, flat);
    out.k = bind_linear(g, blk.k, prefix + ".k", req, flat);
    out.v = bind_linear(g, blk.v, prefix + ".v", req, flat);
    out.proj = bind_linear(g, blk.proj, prefix + ".proj", req, flat);
    out.ln2 = bind_ln(g, blk.ln2, prefix + ".ln2", req, flat);
    out.fc1 = bind_linear(g, blk.fc1, prefix + ".fc1", req, flat);
    out.fc2 = bind_linear(g, blk.fc2, prefix + ".fc2", req, flat);
    return out;
}

}  // namespace detail

/// Copies encoder parameters into graph leaves. flat, when given, collects
/// (name, tensor) pairs for gradient readback.
template <typename T>
BoundEncoder<T> bind_encoder(Graph<T>& g, const EncoderParams<T>& enc, bool requires_grad,
                             detail::FlatTensors<T>* flat = nullptr, const std::string& prefix = "enc") {
    BoundEncoder<T> out;
    out.patch_embed = detail::bind_linear(g, enc.patch_embed, prefix + ".patch_embed",
                                          requires_grad, flat);
    for (std::size_t i = 0; i < enc.blocks.size(); ++i)
        out.blocks.push_back(detail::bind_block(g, enc.blocks[i],
                                                prefix + ".blocks." + std::to_string(i),
                                                requires_grad, flat));
    out.ln_final = detail::bind_ln(g, enc.ln_final, prefix + ".ln_final", requires_grad, flat);
    return out;
}

template <typename T>
BoundPredictor<T> bind_predictor(Graph<T>& g, const PredictorParams<T>& pred, bool requires_grad,
                                 detail::FlatTensors<T>* flat = nullptr,
                                 const std::string& prefix = "pred") {
    BoundPredictor<T> out;
    out.in_proj = detail::bind_linear(g, pred.in_proj, prefix + ".in_proj", requires_grad, flat);
    for (std::size_t i = 0; i < pred.blocks.size(); ++i)
        out.blocks.push_back(detail::bind_block(g, pred.blocks[i],
                                                prefix + ".blocks." + std::to_string(i),
                                                requires_grad, flat));
    out.ln_final = detail::bind_ln(g, pred.ln_final, prefix + ".ln_final", requires_grad, flat);
    out.out_proj = detail::bind_linear(g, pred.out_proj, prefix + ".out_proj", requires_grad, flat);
    const std::size_t d = pred.mask_token.size();
    out.mask_token = g.leaf({d}, pred.mask_token, requires_grad);
    if (flat) flat->emplace_back(prefix + ".mask_token", out.mask_token);
    return out;
}

template <typename T>
Tensor<T> linear_forward(const BoundLinear<T>& lin, const Tensor<T>& x) {
    return add(matmul(x, lin.w), lin.b);
}

/// Multi-head self attention over a [n, dim] sequence, heads as column
/// slices so everything stays a 2D matmul.
template <typename T>
Tensor<T> attention_forward(const BoundBlock<T>& blk, const Tensor<T>& x, std::size_t heads) {
    const std::size_t dim = x.cols();
    const std::size_t dh = dim / heads;
    Tensor<T> q = linear_forward(blk.q, x);
    Tensor<T> k = linear_forward(blk.k, x);
    Tensor<T> v = linear_forward(blk.v, x);
    const T scale = T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = slice(q, 1, h * dh, dh);
        Tensor<T> kh = slice(k, 1, h * dh, dh);
        Tensor<T> vh = slice(v, 1, h * dh, dh);
        Tensor<T> attn = softmax(scalar_mul(matmul(qh, transpose(kh)), scale));
        head_out.push_back(matmul(attn, vh));
    }
    return linear_forward(blk.proj, concat(head_out, 1));
}

/// Pre-norm transformer block.
template <typename T>
Tensor<T> block_forward(const BoundBlock<T>& blk, Tensor<T> x, std::size_t heads) {
    Tensor<T> h = layer_norm(x, blk.ln1.gamma, blk.ln1.beta);
    x = add(x, attention_forward(blk, h, heads));
    Tensor<T> m = layer_norm(x, blk.ln2.gamma, blk.ln2.beta);
    m = linear_forward(blk.fc2, gelu(linear_forward(blk.fc1, m)));
    return add(x, m);
}

/// patches [n, patch_dim] -> representations [n, dim]. pos must already be
/// gathered for the same n patches.
template <typename T>
Tensor<T> encoder_forward(const BoundEncoder<T>& enc, const Tensor<T>& patches,
                          const Tensor<T>& pos, std::size_t heads) {
    Tensor<T> x = add(linear_forward(enc.patch_embed, patches), pos);
    for (const auto& blk : enc.blocks) x = block_forward(blk, x, heads);
    return layer_norm(x, enc.ln_final.gamma, enc.ln_final.beta);
}

/// Predicts target representations from context representations. Target slots
/// enter as the shared mask token plus their position code; the output keeps
/// only the trailing target rows.
template <typename T>
Tensor<T> predictor_forward(const BoundPredictor<T>& pred, const Tensor<T>& ctx_repr,
                            const Tensor<T>& ctx_pos, const Tensor<T>& tgt_pos,
                            std::size_t heads) {
    Tensor<T> ctx_tok = add(linear_forward(pred.in_proj, ctx_repr), ctx_pos);
    Tensor<T> tgt_tok = add(tgt_pos, pred.mask_token);
    Tensor<T> x = concat(std::vector<Tensor<T>>{ctx_tok, tgt_tok}, 0);
    for (const auto& blk : pred.blocks) x = block_forward(blk, x, heads);
    x = layer_norm(x, pred.ln_final.gamma, pred.ln_final.beta);
    x = linear_forward(pred.out_proj, x);
    const std::size_t n_tgt = tgt_pos.rows();
    return slice(x, 0, ctx_repr.rows(), n_tgt);
}

namespace detail {

/// Rows of a patch grid gathered into a dense [indices.size(), patch_dim]
/// buffer.
template <typename T>
std::vector<T> gather_patches(const PatchGrid& grid, std::span<const std::size_t> indices) {
    const std::size_t pd = grid.patch_dim();
    std::vector<T> out(indices.size() * pd);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const float* src = grid.patch(indices[i]);
        for (std::size_t k = 0; k < pd; ++k) out[i * pd + k] = static_cast<T>(src[k]);
    }
    return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

}  // namespace detail

/// One sample's training loss: encode context, predict target slots, compare
/// against target-encoder representations. The target branch is built from
/// leaves that never require grad, so no gradient reaches the target encoder.
template <typename T>
Tensor<T> jepa_loss(Graph<T>& g, const ModelConfig& cfg, const BoundEncoder<T>& online_enc,
                    const BoundPredictor<T>& predictor, const BoundEncoder<T>& target_enc,
                    const PatchGrid& grid, const MaskSpec& mask,
                    const std::vector<T>& pos_table) {
    if (grid.count() != cfg.patch_count())
        throw std::invalid_argument("jepa_loss: grid has " + std::to_string(grid.count()) +
                                    " patches, config expects " +
                                    std::to_string(cfg.patch_count()));
    if (mask.context.empty() || mask.target.empty())
        throw std::invalid_argument("jepa_loss: empty context or target set");

    Tensor<T> pos = g.constant({cfg.patch_count(), cfg.dim}, pos_table);
    Tensor<T> ctx_pos = index_select(pos, mask.context);
    Tensor<T> tgt_pos = index_select(pos, mask.target);

    Tensor<T> ctx_patches = g.constant({mask.context.size(), cfg.patch_dim()},
                                       detail::gather_patches<T>(grid, mask.context));
    Tensor<T> ctx_repr = encoder_forward(online_enc, ctx_patches, ctx_pos, cfg.enc_heads);
    Tensor<T> pred = predictor_forward(predictor, ctx_repr, ctx_pos, tgt_pos, cfg.pred_heads);

    Tensor<T> tgt_repr;
    if (cfg.latent_target_masking) {
        const auto all = detail::all_indices(grid.count());
        Tensor<T> all_patches = g.constant({grid.count(), cfg.patch_dim()},
                                           detail::gather_patches<T>(grid, all));
        Tensor<T> full = encoder_forward(target_enc, all_patches, pos, cfg.enc_heads);
        tgt_repr = index_select(full, mask.target);
    } else {
        Tensor<T> tgt_patches = g.constant({mask.target.size(), cfg.patch_dim()},
                                           detail::gather_patches<T>(grid, mask.target));
        tgt_repr = encoder_forward(target_enc, tgt_patches, tgt_pos, cfg.enc_heads);
    }
    return smoothed_l1_rows(pred, tgt_repr, cfg.elementwise_distance);
}

}  // namespace ajepa
