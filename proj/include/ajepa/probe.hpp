#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ajepa/mask.hpp"
#include "ajepa/mel.hpp"
#include "ajepa/model.hpp"
#include "ajepa/tensor.hpp"
#include "ajepa/train.hpp"

namespace ajepa {

struct FeatureMatrix {
    std::size_t n = 0, dim = 0;
    std::vector<float> values;  // [n, dim] row-major
    std::vector<int> labels;

    const float* row(std::size_t i) const { return values.data() + i * dim; }
};

/// Frozen-encoder features: encode the full patch grid, average
/// representations over time patches, concatenate across frequency patches.
/// Clips are center cropped, so extraction is deterministic.
inline FeatureMatrix extract_features(const EncoderParams<float>& enc, const ModelConfig& cfg,
                                      const MelDataset& ds, int target_frames) {
    cfg.validate();
    const auto pos_table = sinusoidal_pos_embed<float>(cfg.grid_rows, cfg.grid_cols, cfg.dim);
    FeatureMatrix out;
    out.n = ds.mels.size();
    out.dim = cfg.feature_dim();
    out.values.assign(out.n * out.dim, 0.0f);
    out.labels = ds.labels;

    for (std::size_t i = 0; i < ds.mels.size(); ++i) {
        const MelSpectrogram cropped =
            pad_or_crop(ds.mels[i], static_cast<std::size_t>(target_frames), CropMode::center);
        const PatchGrid grid = patchify(cropped, cfg.patch_side);
        if (grid.count() != cfg.patch_count())
            throw std::invalid_argument("extract_features: clip grid " +
                                        std::to_string(grid.count()) +
                                        " does not match config grid " +
                                        std::to_string(cfg.patch_count()));
        Graph<float> g;
        const BoundEncoder<float> bound = bind_encoder(g, enc, false);
        Tensor<float> patches = g.constant({grid.count(), cfg.patch_dim()},
                                           detail::gather_patches<float>(grid, detail::all_indices(grid.count())));
        Tensor<float> pos = g.constant({cfg.patch_count(), cfg.dim}, pos_table);
        Tensor<float> repr = encoder_forward(bound, patches, pos, cfg.enc_heads);

        float* feat = out.values.data() + i * out.dim;
        const std::vector<float>& rv = repr.value();
        for (std::size_t r = 0; r < cfg.grid_rows; ++r)
            for (std::size_t c = 0; c < cfg.grid_cols; ++c)
                for (std::size_t d = 0; d < cfg.dim; ++d)
                    feat[r * cfg.dim + d] +=
                        rv[(r * cfg.grid_cols + c) * cfg.dim + d] / static_cast<float>(cfg.grid_cols);
    }
    return out;
}

struct ProbeModel {
    std::size_t dim = 0, classes = 0;
    std::vector<double> w;  // [classes, dim + 1], bias in the last column
    std::vector<double> feat_mean, feat_std;
};

struct ProbeTrainOptions {
    double l2 = 1e-4;
    std::size_t max_iters = 2000;
    double tol = 1e-9;
};

namespace detail {

inline void probe_logits(const ProbeModel& m, const double* z, double* logits) {
    for (std::size_t c = 0; c < m.classes; ++c) {
        const double* wc = m.w.data() + c * (m.dim + 1);
        double acc = wc[m.dim];
        for (std::size_t d = 0; d < m.dim; ++d) acc += wc[d] * z[d];
        logits[c] = acc;
    }
}

inline void standardize_row(const ProbeModel& m, const float* x, double* z) {
    for (std::size_t d = 0; d < m.dim; ++d)
        z[d] = (static_cast<double>(x[d]) - m.feat_mean[d]) / m.feat_std[d];
}

/// Cross-entropy objective and gradient over standardized features, with L2
/// on everything except the bias column.
inline double probe_objective(const ProbeModel& m, const std::vector<double>& z,
                              const std::vector<int>& labels, double l2,
                              std::vector<double>* grad) {
    const std::size_t n = labels.size(), k = m.classes, dp1 = m.dim + 1;
    if (grad) grad->assign(m.w.size(), 0.0);
    double loss = 0.0;
    std::vector<double> logits(k), p(k);
    for (std::size_t i = 0; i < n; ++i) {
        const double* zi = z.data() + i * m.dim;
        probe_logits(m, zi, logits.data());
        const double mx = *std::max_element(logits.begin(), logits.end());
        double zsum = 0.0;
        for (std::size_t c = 0; c < k; ++c) zsum += (p[c] = std::exp(logits[c] - mx));
        for (std::size_t c = 0; c < k; ++c) p[c] /= zsum;
        loss -= std::log(std::max(p[static_cast<std::size_t>(labels[i])], 1e-300));
        if (grad) {
            for (std::size_t c = 0; c < k; ++c) {
                const double err =
                    (p[c] - (c == static_cast<std::size_t>(labels[i]) ? 1.0 : 0.0)) /
                    static_cast<double>(n);
                double* gc = grad->data() + c * dp1;
                for (std::size_t d = 0; d < m.dim; ++d) gc[d] += err * zi[d];
                gc[m.dim] += err;
            }
        }
    }
    loss /= static_cast<double>(n);
    for (std::size_t c = 0; c < k; ++c) {
        const double* wc = m.w.data() + c * dp1;
        for (std::size_t d = 0; d < m.dim; ++d) {
            loss += 0.5 * l2 * wc[d] * wc[d];
            if (grad) (*grad)[c * dp1 + d] += l2 * wc[d];
        }
    }
    return loss;
}

}  // namespace detail

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent with a backtracking line search. Deterministic: zero
/// init, no sampling. loss_trace, when given, records the objective at init
/// and after every accepted step.
inline ProbeModel train_probe(const FeatureMatrix& train, std::size_t classes,
                              const ProbeTrainOptions& opt = {},
                              std::vector<double>* loss_trace = nullptr) {
    if (train.n == 0 || train.dim == 0)
        throw std::invalid_argument("train_probe: empty feature matrix");
    for (const int y : train.labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw std::invalid_argument("train_probe: label " + std::to_string(y) +
                                        " outside " + std::to_string(classes) + " classes");
    ProbeModel m;
    m.dim = train.dim;
    m.classes = classes;
    m.w.assign(classes * (train.dim + 1), 0.0);
    m.feat_mean.assign(train.dim, 0.0);
    m.feat_std.assign(train.dim, 1.0);
    for (std::size_t i = 0; i < train.n; ++i)
        for (std::size_t d = 0; d < train.dim; ++d)
            m.feat_mean[d] += train.row(i)[d] / static_cast<double>(train.n);
    for (std::size_t d = 0; d < train.dim; ++d) {
        double var = 0.0;
        for (std::size_t i = 0; i < train.n; ++i) {
            const double dv = train.row(i)[d] - m.feat_mean[d];
            var += dv * dv;
        }
        m.feat_std[d] = std::max(std::sqrt(var / static_cast<double>(train.n)), 1e-6);
    }

    std::vector<double> z(train.n * train.dim);
    for (std::size_t i = 0; i < train.n; ++i)
        detail::standardize_row(m, train.row(i), z.data() + i * train.dim);

    std::vector<double> grad;
    double obj = detail::probe_objective(m, z, train.labels, opt.l2, &grad);
    if (loss_trace) loss_trace->assign(1, obj);
    double step = 1.0;
    for (std::size_t iter = 0; iter < opt.max_iters; ++iter) {
        double gsq = 0.0, ginf = 0.0;
        for (const double v : grad) {
            gsq += v * v;
            ginf = std::max(ginf, std::abs(v));
        }
        if (ginf < 1e-7) break;

        const std::vector<double> w_prev = m.w;
        double new_obj = obj;
        bool accepted = false;
        for (int bt = 0; bt < 40; ++bt) {
            for (std::size_t i = 0; i < m.w.size(); ++i) m.w[i] = w_prev[i] - step * grad[i];
            new_obj = detail::probe_objective(m, z, train.labels, opt.l2, nullptr);
            if (new_obj <= obj - 1e-4 * step * gsq) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            m.w = w_prev;
            break;
        }
        const double improvement = obj - new_obj;
        obj = new_obj;
        if (loss_trace) loss_trace->push_back(obj);
        detail::probe_objective(m, z, train.labels, opt.l2, &grad);
        step *= 1.3;
        if (improvement < opt.tol * std::max(1.0, std::abs(obj))) break;
    }
    return m;
}

inline int predict_probe(const ProbeModel& m, const float* features) {
    std::vector<double> z(m.dim), logits(m.classes);
    detail::standardize_row(m, features, z.data());
    detail::probe_logits(m, z.data(), logits.data());
    int best = 0;
    for (std::size_t c = 1; c < m.classes; ++c)
        if (logits[c] > logits[best]) best = static_cast<int>(c);
    return best;
}

/// Fraction of correctly classified rows.
inline double evaluate_probe(const ProbeModel& m, const FeatureMatrix& test) {
    if (test.n == 0) throw std::invalid_argument("evaluate_probe: empty feature matrix");
    if (test.dim != m.dim)
        throw std::invalid_argument("evaluate_probe: feature dim " + std::to_string(test.dim) +
                                    " does not match probe dim " + std::to_string(m.dim));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.n; ++i)
        if (predict_probe(m, test.row(i)) == test.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(test.n);
}

namespace detail {

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations. a is n x n
/// row-major and is destroyed.
inline std::vector<double> jacobi_eigenvalues(std::vector<double> a, std::size_t n) {
    if (a.size() != n * n) throw std::invalid_argument("jacobi: matrix size mismatch");
    const auto at = [&](std::size_t r, std::size_t c) -> double& { return a[r * n + c]; };
    double norm = 0.0;
    for (const double v : a) norm += v * v;
    norm = std::sqrt(norm);
    const double stop = std::max(1e-300, 1e-14 * norm);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * at(p, q) * at(p, q);
        if (std::sqrt(off) <= stop) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = at(p, q);
                if (std::abs(apq) <= 1e-300) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = at(i, p), aiq = at(i, q);
                    at(i, p) = c * aip - s * aiq;
                    at(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = at(p, i), aqi = at(q, i);
                    at(p, i) = c * api - s * aqi;
                    at(q, i) = s * api + c * aqi;
                }
            }
    }
    std::vector<double> eig(n);
    for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
    return eig;
}

}  // namespace detail

struct CollapseMetrics {
    double mean_std = 0.0;        // per-dimension standard deviation, averaged
    double effective_rank = 0.0;  // exp of the entropy of normalized eigenvalues
};

/// Representation collapse diagnostics over a feature matrix. The effective
/// rank comes from the spectrum of the centered Gram (or covariance,
/// whichever is smaller), so it is scale invariant.
inline CollapseMetrics collapse_metrics(const FeatureMatrix& f) {
    if (f.n < 2 || f.dim == 0)
        throw std::invalid_argument("collapse_metrics: need at least two rows");
    CollapseMetrics out;

    std::vector<double> mean(f.dim, 0.0);
    for (std::size_t i = 0; i < f.n; ++i)
        for (std::size_t d = 0; d < f.dim; ++d)
            mean[d] += f.row(i)[d] / static_cast<double>(f.n);
    double std_acc = 0.0;
    for (std::size_t d = 0; d < f.dim; ++d) {
        double var = 0.0;
        for (std::size_t i = 0; i < f.n; ++i) {
            const double dv = f.row(i)[d] - mean[d];
            var += dv * dv;
        }
        std_acc += std::sqrt(var / static_cast<double>(f.n));
    }
    out.mean_std = std_acc / static_cast<double>(f.dim);

    // Centered rows, then the smaller of X Xt (n x n) and Xt X (d x d).
    std::vector<double> xc(f.n * f.dim);
    for (std::size_t i = 0; i < f.n; ++i)
        for (std::size_t d = 0; d < f.dim; ++d)
            xc[i * f.dim + d] = f.row(i)[d] - mean[d];
    const bool use_gram = f.n <= f.dim;
    const std::size_t m = use_gram ? f.n : f.dim;
    std::vector<double> sym(m * m, 0.0);
    if (use_gram) {
        for (std::size_t i = 0; i < f.n; ++i)
            for (std::size_t j = i; j < f.n; ++j) {
                double acc = 0.0;
                for (std::size_t d = 0; d < f.dim; ++d)
                    acc += xc[i * f.dim + d] * xc[j * f.dim + d];
                sym[i * m + j] = sym[j * m + i] = acc;
            }
    } else {
        for (std::size_t i = 0; i < f.n; ++i)
            for (std::size_t d1 = 0; d1 < f.dim; ++d1) {
                const double v = xc[i * f.dim + d1];
                for (std::size_t d2 = d1; d2 < f.dim; ++d2)
                    sym[d1 * m + d2] += v * xc[i * f.dim + d2];
            }
        for (std::size_t d1 = 0; d1 < f.dim; ++d1)
            for (std::size_t d2 = d1 + 1; d2 < f.dim; ++d2) sym[d2 * m + d1] = sym[d1 * m + d2];
    }

    // Eigenvalues of the centered Gram/covariance are squared singular
    // values of the centered matrix; the entropy is over normalized
    // singular values, so take roots first.
    auto eig = detail::jacobi_eigenvalues(std::move(sym), m);
    double total = 0.0;
    for (double& v : eig) {
        v = v > 0.0 ? std::sqrt(v) : 0.0;
        total += v;
    }
    if (total <= 0.0) {
        out.effective_rank = 0.0;
        return out;
    }
    double entropy = 0.0;
    for (const double v : eig) {
        const double p = v / total;
        if (p > 0.0) entropy -= p * std::log(p);
    }
    out.effective_rank = std::exp(entropy);
    return out;
}

}  // namespace ajepa
