#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ajepa/mask.hpp"
#include "ajepa/mel.hpp"
#include "ajepa/model.hpp"
#include "ajepa/rng.hpp"
#include "ajepa/tensor.hpp"

namespace ajepa {

struct NamedGradCheck {
    std::string name;
    GradCheckReport report;
};

namespace detail {

using DInputs = std::vector<std::pair<std::vector<std::size_t>, std::vector<double>>>;

inline std::vector<double> rand_vec(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

/// Weighted full reduction so the incoming gradient is non-uniform.
inline Tensor<double> weighted_sum(Graph<double>& g, const Tensor<double>& x, Rng& rng) {
    auto w = rand_vec(x.numel(), rng, 0.5, 1.5);
    return sum(mul(x, g.constant(x.shape(), std::move(w))));
}

}  // namespace detail

/// Central-difference checks for every autodiff op, all coordinates, double
/// precision. `only` filters by exact name when non-empty.
inline std::vector<NamedGradCheck> run_op_grad_checks(std::uint64_t seed,
                                                      const std::vector<std::string>& only = {}) {
    using detail::DInputs;
    using detail::rand_vec;
    using detail::weighted_sum;
    const double eps = 1e-5;
    std::vector<NamedGradCheck> results;

    const auto wants = [&](const std::string& name) {
        if (only.empty()) return true;
        for (const auto& o : only)
            if (o == name) return true;
        return false;
    };
    const auto check = [&](const std::string& name,
                           std::function<Tensor<double>(Graph<double>&,
                                                        const std::vector<Tensor<double>>&, Rng&)>
                               build,
                           DInputs inputs) {
        if (!wants(name)) return;
        // A fixed weight stream per check keeps the objective identical
        // across the central-difference evaluations.
        const std::uint64_t wseed = fnv1a64("weights:" + name, seed);
        const auto wrapped = [&](Graph<double>& g, const std::vector<Tensor<double>>& leaves) {
            Rng wrng(wseed);
            return build(g, leaves, wrng);
        };
        results.push_back({name, grad_check<double>(wrapped, std::move(inputs), eps)});
    };

    Rng rng(fnv1a64("inputs", seed));

    check("matmul",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, matmul(in[0], in[1]), w);
          },
          {{{3, 4}, rand_vec(12, rng)}, {{4, 5}, rand_vec(20, rng)}});
    check("add_broadcast",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, add(in[0], in[1]), w);
          },
          {{{3, 4}, rand_vec(12, rng)}, {{4}, rand_vec(4, rng)}});
    check("sub",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, sub(in[0], in[1]), w);
          },
          {{{3, 4}, rand_vec(12, rng)}, {{3, 4}, rand_vec(12, rng)}});
    check("mul",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, mul(in[0], in[1]), w);
          },
          {{{3, 4}, rand_vec(12, rng)}, {{3, 4}, rand_vec(12, rng)}});
    check("scalar_mul",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, scalar_mul(in[0], 1.7), w);
          },
          {{{3, 4}, rand_vec(12, rng)}});
    check("transpose",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, transpose(in[0]), w);
          },
          {{{3, 4}, rand_vec(12, rng)}});
    check("softmax",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, softmax(in[0]), w);
          },
          {{{3, 5}, rand_vec(15, rng, -2.0, 2.0)}});
    check("layer_norm",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, layer_norm(in[0], in[1], in[2]), w);
          },
          {{{3, 6}, rand_vec(18, rng)},
           {{6}, rand_vec(6, rng, 0.5, 1.5)},
           {{6}, rand_vec(6, rng)}});
    check("gelu",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, gelu(in[0]), w);
          },
          {{{3, 4}, rand_vec(12, rng, -2.0, 2.0)}});
    check("index_select",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, index_select(in[0], {0, 2, 2, 4}), w);
          },
          {{{5, 3}, rand_vec(15, rng)}});
    check("concat_axis0",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, concat(std::vector<Tensor<double>>{in[0], in[1]}, 0), w);
          },
          {{{2, 3}, rand_vec(6, rng)}, {{3, 3}, rand_vec(9, rng)}});
    check("concat_axis1",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, concat(std::vector<Tensor<double>>{in[0], in[1]}, 1), w);
          },
          {{{3, 2}, rand_vec(6, rng)}, {{3, 4}, rand_vec(12, rng)}});
    check("slice_axis0",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, slice(in[0], 0, 1, 3), w);
          },
          {{{5, 3}, rand_vec(15, rng)}});
    check("slice_axis1",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, slice(in[0], 1, 2, 3), w);
          },
          {{{3, 6}, rand_vec(18, rng)}});
    check("reshape",
          [](Graph<double>& g, const auto& in, Rng& w) {
              return weighted_sum(g, reshape(in[0], {2, 6}), w);
          },
          {{{3, 4}, rand_vec(12, rng)}});
    check("sum",
          [](Graph<double>&, const auto& in, Rng&) { return sum(in[0]); },
          {{{3, 4}, rand_vec(12, rng)}});
    check("mean",
          [](Graph<double>&, const auto& in, Rng&) { return mean(in[0]); },
          {{{3, 4}, rand_vec(12, rng)}});

    // Residuals are built away from the regime boundary and from zero so the
    // finite difference never straddles a kink.
    {
        const std::size_t rows = 2, d = 4;
        auto base = rand_vec(rows * d, rng);
        const auto make_pair = [&](double mag) {
            DInputs io;
            std::vector<double> a = base;
            for (std::size_t i = 0; i < a.size(); ++i)
                a[i] += (rng.uniform() < 0.5 ? -mag : mag);
            io.push_back({{rows, d}, a});
            io.push_back({{rows, d}, base});
            return io;
        };
        check("smoothed_l1_quadratic",
              [](Graph<double>&, const auto& in, Rng&) {
                  return smoothed_l1_rows(in[0], in[1], false);
              },
              make_pair(0.05));  // row L1 0.2, well inside the quadratic regime
        check("smoothed_l1_linear",
              [](Graph<double>&, const auto& in, Rng&) {
                  return smoothed_l1_rows(in[0], in[1], false);
              },
              make_pair(0.7));  // row L1 2.8, well inside the linear regime
        check("smoothed_l1_elementwise",
              [&](Graph<double>&, const auto& in, Rng&) {
                  return smoothed_l1_rows(in[0], in[1], true);
              },
              [&] {
                  DInputs io;
                  std::vector<double> a = base;
                  for (std::size_t i = 0; i < a.size(); ++i)
                      a[i] += (i % 2 == 0 ? 0.3 : 1.8) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
                  io.push_back({{rows, d}, a});
                  io.push_back({{rows, d}, base});
                  return io;
              }());
    }
    return results;
}

/// End-to-end check: the training loss differentiated with respect to every
/// online encoder and predictor parameter on the desk configuration, a few
/// sampled coordinates per tensor. Target-encoder parameters are held out on
/// purpose; the stop gradient makes their analytic gradient zero by design.
inline GradCheckReport run_e2e_grad_check(std::uint64_t seed, std::size_t coords_per_tensor = 4) {
    ModelConfig cfg;  // desk defaults: 5x8 grid, dim 64, 2 encoder layers
    cfg.validate();

    Rng rng(fnv1a64("e2e", seed));
    ModelParams<double> params = init_params<double>(cfg, rng);
    ModelParams<double> target = init_params<double>(cfg, rng);

    MelSpectrogram mel;
    mel.rows = cfg.grid_rows * cfg.patch_side;
    mel.cols = cfg.grid_cols * cfg.patch_side;
    mel.values.resize(mel.rows * mel.cols);
    for (float& v : mel.values) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    const PatchGrid grid = patchify(mel, cfg.patch_side);
    const MaskSpec mask = sample_unstructured(cfg.grid_rows, cfg.grid_cols, 0.7, rng);
    const auto pos_table = sinusoidal_pos_embed<double>(cfg.grid_rows, cfg.grid_cols, cfg.dim);

    const auto eval = [&](std::map<std::string, std::vector<double>>* grads) {
        Graph<double> g;
        detail::FlatTensors<double> flat;
        const BoundEncoder<double> online = bind_encoder(g, params.encoder, true, &flat);
        const BoundPredictor<double> predictor = bind_predictor(g, params.predictor, true, &flat);
        const BoundEncoder<double> target_enc = bind_encoder(g, target.encoder, false);
        Tensor<double> loss =
            jepa_loss(g, cfg, online, predictor, target_enc, grid, mask, pos_table);
        const double y = loss.item();
        if (grads) {
            g.backward(loss);
            for (const auto& [name, tensor] : flat) (*grads)[name] = tensor.grad();
        }
        return y;
    };

    std::map<std::string, std::vector<double>> analytic;
    eval(&analytic);

    std::map<std::string, std::vector<double>*> param_of;
    for_each_param(params, [&](const std::string& name, const auto&, auto& data) {
        param_of[name] = &data;
    });

    GradCheckReport report;
    const double eps = 1e-5;
    Rng coord_rng(fnv1a64("coords", seed));
    for (auto& [name, data_ptr] : param_of) {
        std::vector<double>& data = *data_ptr;
        for (std::size_t k = 0; k < std::min(coords_per_tensor, data.size()); ++k) {
            const auto c = static_cast<std::size_t>(coord_rng.uniform_below(data.size()));
            const double saved = data[c];
            data[c] = saved + eps;
            const double fp = eval(nullptr);
            data[c] = saved - eps;
            const double fm = eval(nullptr);
            data[c] = saved;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double exact = analytic.at(name).at(c);
            const double abs_err = std::abs(exact - numeric);
            const double rel = abs_err / std::max(1.0, std::abs(exact) + std::abs(numeric));
            report.checked += 1;
            if (abs_err > report.max_abs) report.max_abs = abs_err;
            if (rel > report.max_rel) {
                report.max_rel = rel;
                report.worst = name + "[" + std::to_string(c) + "]: analytic " +
                               std::to_string(exact) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return report;
}

}  // namespace ajepa
