#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ajepa/common.hpp"
#include "ajepa/mel.hpp"
#include "ajepa/rng.hpp"

namespace ajepa {

/// Non-overlapping square patches of a mel-spectrogram, row-major over the
/// (frequency, time) grid: patch j sits at row j / cols, column j % cols.
struct PatchGrid {
    std::size_t rows = 0;        // frequency patches
    std::size_t cols = 0;        // time patches
    std::size_t patch_side = 0;
    std::vector<float> patches;  // [rows*cols x patch_side^2], each patch flattened row-major

    std::size_t count() const { return rows * cols; }
    std::size_t patch_dim() const { return patch_side * patch_side; }
    const float* patch(std::size_t j) const { return patches.data() + j * patch_dim(); }
};

inline PatchGrid patchify(const MelSpectrogram& mel, std::size_t patch_side) {
    if (patch_side == 0) throw std::invalid_argument("patchify: patch_side must be positive");
    if (mel.rows % patch_side != 0 || mel.cols % patch_side != 0)
        throw std::invalid_argument("patchify: mel dims " + std::to_string(mel.rows) + "x" +
                                    std::to_string(mel.cols) + " not divisible by patch side " +
                                    std::to_string(patch_side));
    PatchGrid g;
    g.rows = mel.rows / patch_side;
    g.cols = mel.cols / patch_side;
    g.patch_side = patch_side;
    g.patches.resize(g.count() * g.patch_dim());

    const std::size_t p = patch_side;
    for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
            float* dst = g.patches.data() + (r * g.cols + c) * g.patch_dim();
            for (std::size_t pr = 0; pr < p; ++pr)
                for (std::size_t pc = 0; pc < p; ++pc)
                    dst[pr * p + pc] = mel.at(r * p + pr, c * p + pc);
        }
    return g;
}

/// Inverse of patchify.
inline MelSpectrogram unpatchify(const PatchGrid& g) {
    MelSpectrogram mel;
    const std::size_t p = g.patch_side;
    mel.rows = g.rows * p;
    mel.cols = g.cols * p;
    mel.values.resize(mel.rows * mel.cols);
    for (std::size_t r = 0; r < g.rows; ++r)
        for (std::size_t c = 0; c < g.cols; ++c) {
            const float* src = g.patch(r * g.cols + c);
            for (std::size_t pr = 0; pr < p; ++pr)
                for (std::size_t pc = 0; pc < p; ++pc)
                    mel.at(r * p + pr, c * p + pc) = src[pr * p + pc];
        }
    return mel;
}

enum class MaskStrategy { unstructured, multiblock, time };

inline std::string to_string(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::unstructured: return "unstructured";
        case MaskStrategy::multiblock: return "multiblock";
        case MaskStrategy::time: return "time";
    }
    return "?";
}

inline MaskStrategy mask_strategy_from_string(const std::string& s) {
    if (s == "unstructured") return MaskStrategy::unstructured;
    if (s == "multiblock") return MaskStrategy::multiblock;
    if (s == "time") return MaskStrategy::time;
    throw std::invalid_argument("unknown masking strategy: " + s);
}

/// Disjoint context/target index sets over a patch grid, both sorted ascending.
struct MaskSpec {
    std::vector<std::size_t> context;
    std::vector<std::size_t> target;
    MaskStrategy strategy = MaskStrategy::unstructured;
};

struct MultiBlockParams {
    std::size_t num_target_blocks = 4;
    double target_scale_min = 0.15, target_scale_max = 0.2;
    double target_aspect_min = 0.75, target_aspect_max = 1.5;
    double context_scale_min = 0.85, context_scale_max = 1.0;

    void validate() const {
        if (num_target_blocks == 0)
            throw std::invalid_argument("multiblock: need at least one target block");
        const auto ok = [](double lo, double hi) { return 0.0 < lo && lo <= hi && hi <= 1.0; };
        if (!ok(target_scale_min, target_scale_max) || !ok(context_scale_min, context_scale_max))
            throw std::invalid_argument("multiblock: scale ranges must satisfy 0 < min <= max <= 1");
        if (!(0.0 < target_aspect_min && target_aspect_min <= target_aspect_max))
            throw std::invalid_argument("multiblock: bad aspect range");
    }
};

namespace detail {

inline std::vector<std::size_t> complement_of(const std::vector<bool>& member, bool value) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < member.size(); ++i)
        if (member[i] == value) out.push_back(i);
    return out;
}

/// k distinct values from {0..n-1}, sorted.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Rng& rng) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(k);
    std::sort(pool.begin(), pool.end());
    return pool;
}

struct Rect {
    std::size_t r0, c0, h, w;
};

inline Rect sample_rect(std::size_t rows, std::size_t cols, double scale_min, double scale_max,
                        double aspect_min, double aspect_max, Rng& rng) {
    const double n_cells = static_cast<double>(rows * cols);
    const double scale = rng.uniform(scale_min, scale_max);
    const double aspect = rng.uniform(aspect_min, aspect_max);
    const double area = scale * n_cells;
    std::size_t h = static_cast<std::size_t>(std::llround(std::sqrt(area * aspect)));
    h = std::clamp<std::size_t>(h, 1, rows);
    std::size_t w = static_cast<std::size_t>(std::llround(area / static_cast<double>(h)));
    w = std::clamp<std::size_t>(w, 1, cols);
    const std::size_t r0 = static_cast<std::size_t>(rng.uniform_below(rows - h + 1));
    const std::size_t c0 = static_cast<std::size_t>(rng.uniform_below(cols - w + 1));
    return {r0, c0, h, w};
}

}  // namespace detail

/// Target = uniform random subset of round(target_ratio * N) patches,
/// context = everything else.
inline MaskSpec sample_unstructured(std::size_t rows, std::size_t cols, double target_ratio,
                                    Rng& rng) {
    const std::size_t n = rows * cols;
    const auto k = static_cast<std::size_t>(std::llround(target_ratio * static_cast<double>(n)));
    if (!(target_ratio > 0.0 && target_ratio < 1.0) || k < 1 || k > n - 1)
        throw std::invalid_argument("sample_unstructured: degenerate target ratio " +
                                    std::to_string(target_ratio) + " for " + std::to_string(n) +
                                    " patches");
    MaskSpec spec;
    spec.strategy = MaskStrategy::unstructured;
    spec.target = detail::sample_without_replacement(n, k, rng);
    std::vector<bool> in_target(n, false);
    for (const std::size_t j : spec.target) in_target[j] = true;
    spec.context = detail::complement_of(in_target, false);
    return spec;
}

/// Targets = union of num_target_blocks random rectangles, context = one big
/// rectangle minus the target cells. Draws are retried (up to 100 attempts)
/// whenever the context ends up empty.
inline MaskSpec sample_multiblock(std::size_t rows, std::size_t cols,
                                  const MultiBlockParams& params, Rng& rng) {
    params.validate();
    const std::size_t n = rows * cols;
    for (int attempt = 0; attempt < 100; ++attempt) {
        std::vector<bool> in_target(n, false);
        for (std::size_t b = 0; b < params.num_target_blocks; ++b) {
            const auto rect = detail::sample_rect(rows, cols, params.target_scale_min,
                                                  params.target_scale_max, params.target_aspect_min,
                                                  params.target_aspect_max, rng);
            for (std::size_t r = rect.r0; r < rect.r0 + rect.h; ++r)
                for (std::size_t c = rect.c0; c < rect.c0 + rect.w; ++c)
                    in_target[r * cols + c] = true;
        }
        const auto ctx_rect = detail::sample_rect(rows, cols, params.context_scale_min,
                                                  params.context_scale_max, 1.0, 1.0, rng);
        MaskSpec spec;
        spec.strategy = MaskStrategy::multiblock;
        for (std::size_t r = ctx_rect.r0; r < ctx_rect.r0 + ctx_rect.h; ++r)
            for (std::size_t c = ctx_rect.c0; c < ctx_rect.c0 + ctx_rect.w; ++c) {
                const std::size_t j = r * cols + c;
                if (!in_target[j]) spec.context.push_back(j);
            }
        if (spec.context.empty()) continue;
        std::sort(spec.context.begin(), spec.context.end());
        spec.target = detail::complement_of(in_target, true);
        return spec;
    }
    throw std::runtime_error("sample_multiblock: no non-empty context in 100 attempts on a " +
                             std::to_string(rows) + "x" + std::to_string(cols) +
                             " grid (target_scale_max=" + std::to_string(params.target_scale_max) +
                             ", blocks=" + std::to_string(params.num_target_blocks) + ")");
}

/// Target = all patches of round(target_ratio * cols) time columns, so each
/// chosen time span covers the whole spectrum. Columns are drawn independently
/// by default; contiguous=true picks one contiguous span instead.
inline MaskSpec sample_time(std::size_t rows, std::size_t cols, double target_ratio, Rng& rng,
                            bool contiguous = false) {
    const auto k = static_cast<std::size_t>(std::llround(target_ratio * static_cast<double>(cols)));
    if (!(target_ratio > 0.0 && target_ratio < 1.0) || k < 1 || k > cols - 1)
        throw std::invalid_argument("sample_time: degenerate target ratio " +
                                    std::to_string(target_ratio) + " for " + std::to_string(cols) +
                                    " columns");
    std::vector<std::size_t> chosen;
    if (contiguous) {
        const auto start = static_cast<std::size_t>(rng.uniform_below(cols - k + 1));
        for (std::size_t c = start; c < start + k; ++c) chosen.push_back(c);
    } else {
        chosen = detail::sample_without_replacement(cols, k, rng);
    }
    std::vector<bool> col_in_target(cols, false);
    for (const std::size_t c : chosen) col_in_target[c] = true;

    MaskSpec spec;
    spec.strategy = MaskStrategy::time;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            (col_in_target[c] ? spec.target : spec.context).push_back(r * cols + c);
    return spec;
}

/// Aggregate statistics over a batch of draws, keyed by strategy.
/// contiguity: mean over target cells of the fraction of their in-grid
/// 4-neighbors that are also targets.
struct MaskStats {
    std::size_t draws = 0;
    double mean_context = 0.0;
    double mean_target = 0.0;
    double column_coverage = 0.0;  // mean fraction of time columns holding >= 1 target
    double contiguity = 0.0;
};

inline std::map<MaskStrategy, MaskStats> mask_stats(std::span<const MaskSpec> specs,
                                                    std::size_t rows, std::size_t cols) {
    if (specs.empty()) throw std::invalid_argument("mask_stats: empty input");
    std::map<MaskStrategy, MaskStats> out;
    for (const MaskSpec& spec : specs) {
        MaskStats& st = out[spec.strategy];
        st.draws += 1;
        st.mean_context += static_cast<double>(spec.context.size());
        st.mean_target += static_cast<double>(spec.target.size());

        std::vector<bool> in_target(rows * cols, false);
        std::vector<bool> col_hit(cols, false);
        for (const std::size_t j : spec.target) {
            in_target[j] = true;
            col_hit[j % cols] = true;
        }
        st.column_coverage +=
            static_cast<double>(std::count(col_hit.begin(), col_hit.end(), true)) / cols;

        double cell_acc = 0.0;
        for (const std::size_t j : spec.target) {
            const std::size_t r = j / cols, c = j % cols;
            int neighbors = 0, hits = 0;
            const auto probe = [&](std::size_t rr, std::size_t cc) {
                ++neighbors;
                if (in_target[rr * cols + cc]) ++hits;
            };
            if (r > 0) probe(r - 1, c);
            if (r + 1 < rows) probe(r + 1, c);
            if (c > 0) probe(r, c - 1);
            if (c + 1 < cols) probe(r, c + 1);
            cell_acc += neighbors > 0 ? static_cast<double>(hits) / neighbors : 0.0;
        }
        st.contiguity += spec.target.empty() ? 0.0 : cell_acc / spec.target.size();
    }
    for (auto& [strategy, st] : out) {
        st.mean_context /= st.draws;
        st.mean_target /= st.draws;
        st.column_coverage /= st.draws;
        st.contiguity /= st.draws;
    }
    return out;
}

/// Plain-text PGM picture of one mask draw: 0 context, 255 target, 128
/// neither. Width is the number of time columns, height the number of mel
/// rows.
inline std::string encode_mask_pgm(const MaskSpec& spec, std::size_t rows, std::size_t cols) {
    std::vector<int> pix(rows * cols, 128);
    for (const std::size_t j : spec.context) {
        if (j >= pix.size()) throw std::invalid_argument("encode_mask_pgm: index out of grid");
        pix[j] = 0;
    }
    for (const std::size_t j : spec.target) {
        if (j >= pix.size()) throw std::invalid_argument("encode_mask_pgm: index out of grid");
        pix[j] = 255;
    }
    std::string out = "P2\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out += std::to_string(pix[r * cols + c]);
            out += (c + 1 == cols) ? '\n' : ' ';
        }
    }
    return out;
}

}  // namespace ajepa
