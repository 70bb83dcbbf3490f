#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "ajepa/probe.hpp"
#include "ajepa/rng.hpp"

using ajepa::CollapseMetrics;
using ajepa::FeatureMatrix;
using ajepa::Rng;
using Catch::Matchers::ContainsSubstring;

namespace {

FeatureMatrix identity_rows(std::size_t n) {
    FeatureMatrix f;
    f.n = n;
    f.dim = n;
    f.values.assign(n * n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) f.values[i * n + i] = 1.0f;
    f.labels.assign(n, 0);
    return f;
}

/// One-hot class direction scaled well above the noise floor.
FeatureMatrix separable_features(std::size_t per_class, std::size_t classes, std::uint64_t seed) {
    FeatureMatrix f;
    f.n = per_class * classes;
    f.dim = classes;
    Rng rng(seed);
    for (std::size_t c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t d = 0; d < classes; ++d) {
                const double base = (d == c) ? 3.0 : 0.0;
                f.values.push_back(static_cast<float>(base + 0.1 * rng.normal()));
            }
            f.labels.push_back(static_cast<int>(c));
        }
    return f;
}

}  // namespace

TEST_CASE("jacobi eigenvalues match the closed form for a 2x2") {
    auto eig = ajepa::detail::jacobi_eigenvalues({2.0, 1.0, 1.0, 2.0}, 2);
    std::sort(eig.begin(), eig.end());
    CHECK(eig[0] == Catch::Approx(1.0).margin(1e-12));
    CHECK(eig[1] == Catch::Approx(3.0).margin(1e-12));
    CHECK_THROWS_WITH(ajepa::detail::jacobi_eigenvalues({1.0, 2.0}, 2),
                      ContainsSubstring("mismatch"));
}

TEST_CASE("collapse metrics match hand oracles") {
    SECTION("identity rows have effective rank n minus one") {
        const std::size_t n = 6;
        const CollapseMetrics m = ajepa::collapse_metrics(identity_rows(n));
        // Centering the identity leaves a projection with n-1 unit eigenvalues.
        CHECK(m.effective_rank == Catch::Approx(5.0).margin(1e-6));
        CHECK(m.mean_std == Catch::Approx(std::sqrt(5.0) / 6.0).margin(1e-9));
    }
    SECTION("identical rows collapse to rank zero") {
        FeatureMatrix f;
        f.n = 4;
        f.dim = 3;
        for (std::size_t i = 0; i < f.n; ++i) f.values.insert(f.values.end(), {1.f, 2.f, 3.f});
        f.labels.assign(f.n, 0);
        const CollapseMetrics m = ajepa::collapse_metrics(f);
        CHECK(m.mean_std == 0.0);
        CHECK(m.effective_rank == 0.0);
    }
    SECTION("isotropic noise fills all dimensions") {
        FeatureMatrix f;
        f.n = 500;
        f.dim = 5;
        Rng rng(3);
        f.values.resize(f.n * f.dim);
        for (float& v : f.values) v = static_cast<float>(rng.normal());
        f.labels.assign(f.n, 0);
        const CollapseMetrics m = ajepa::collapse_metrics(f);
        CHECK(m.effective_rank > 4.5);
        CHECK(m.effective_rank <= 5.0 + 1e-9);
        CHECK(m.mean_std == Catch::Approx(1.0).epsilon(0.1));
    }
    SECTION("entropy runs over singular values, not their squares") {
        // Rows chosen so the matrix is already centered and XtX = diag(36, 4):
        // singular values (6, 2), weights (0.75, 0.25).
        FeatureMatrix f;
        f.n = 4;
        f.dim = 2;
        f.values = {3.0f, 1.0f, -3.0f, -1.0f, 3.0f, -1.0f, -3.0f, 1.0f};
        f.labels.assign(f.n, 0);
        const double entropy = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
        CHECK(ajepa::collapse_metrics(f).effective_rank ==
              Catch::Approx(std::exp(entropy)).epsilon(1e-9));
    }
    SECTION("effective rank is scale invariant") {
        FeatureMatrix f;
        f.n = 8;
        f.dim = 20;
        Rng rng(4);
        f.values.resize(f.n * f.dim);
        for (float& v : f.values) v = static_cast<float>(rng.normal());
        f.labels.assign(f.n, 0);
        FeatureMatrix scaled = f;
        for (float& v : scaled.values) v *= 40.0f;
        CHECK(ajepa::collapse_metrics(f).effective_rank ==
              Catch::Approx(ajepa::collapse_metrics(scaled).effective_rank).margin(1e-9));
    }
    SECTION("degenerate matrices are rejected") {
        CHECK_THROWS_WITH(ajepa::collapse_metrics(identity_rows(1)),
                          ContainsSubstring("two rows"));
    }
    SECTION("metrics are invariant to a constant shift of every row") {
        FeatureMatrix f;
        f.n = 8;
        f.dim = 20;
        Rng rng(6);
        f.values.resize(f.n * f.dim);
        for (float& v : f.values) v = static_cast<float>(rng.normal());
        f.labels.assign(f.n, 0);
        FeatureMatrix shifted = f;
        for (std::size_t i = 0; i < f.n; ++i)
            for (std::size_t d = 0; d < f.dim; ++d)
                shifted.values[i * f.dim + d] += 2.0f + 0.25f * static_cast<float>(d);
        const CollapseMetrics a = ajepa::collapse_metrics(f);
        const CollapseMetrics b = ajepa::collapse_metrics(shifted);
        CHECK(a.mean_std == Catch::Approx(b.mean_std).epsilon(1e-5));
        CHECK(a.effective_rank == Catch::Approx(b.effective_rank).epsilon(1e-5));
    }
}

TEST_CASE("probe training separates a linearly separable problem") {
    const FeatureMatrix train = separable_features(10, 4, 21);
    const FeatureMatrix test = separable_features(10, 4, 22);
    const ajepa::ProbeModel m = ajepa::train_probe(train, 4);
    CHECK(ajepa::evaluate_probe(m, train) == 1.0);
    CHECK(ajepa::evaluate_probe(m, test) >= 0.95);

    SECTION("training is deterministic") {
        const ajepa::ProbeModel m2 = ajepa::train_probe(train, 4);
        CHECK(m2.w == m.w);
    }
    SECTION("bad labels and shapes are rejected") {
        CHECK_THROWS_WITH(ajepa::train_probe(train, 3), ContainsSubstring("outside"));
        CHECK_THROWS_WITH(ajepa::train_probe(FeatureMatrix{}, 2), ContainsSubstring("empty"));
        FeatureMatrix narrow = separable_features(4, 2, 5);
        CHECK_THROWS_WITH(ajepa::evaluate_probe(m, narrow), ContainsSubstring("dim"));
    }
    SECTION("prediction picks the matching class direction") {
        std::vector<float> x = {0.0f, 0.0f, 3.0f, 0.0f};
        CHECK(ajepa::predict_probe(m, x.data()) == 2);
    }
}

TEST_CASE("label-shuffled probe scores chance") {
    // Shuffle control: destroying the feature-label pairing should leave
    // test accuracy within 5 points of chance on 600 test items.
    FeatureMatrix train = separable_features(150, 4, 31);
    const FeatureMatrix test = separable_features(150, 4, 32);
    Rng rng(77);
    rng.shuffle(train.labels.begin(), train.labels.end());
    const ajepa::ProbeModel m = ajepa::train_probe(train, 4);
    const double acc = ajepa::evaluate_probe(m, test);
    CHECK(acc > 0.20);
    CHECK(acc < 0.30);
}

TEST_CASE("probe loss decreases monotonically") {
    const FeatureMatrix train = separable_features(25, 4, 41);
    std::vector<double> trace;
    ajepa::train_probe(train, 4, {}, &trace);
    REQUIRE(trace.size() >= 2);
    for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] < trace[i - 1]);
    CHECK(trace.front() == Catch::Approx(std::log(4.0)).epsilon(1e-12));  // zero init
}

TEST_CASE("feature extraction is deterministic and center cropped") {
    ajepa::ModelConfig cfg;
    cfg.patch_side = 2;
    cfg.dim = 8;
    cfg.enc_layers = 1;
    cfg.enc_heads = 2;
    cfg.pred_layers = 1;
    cfg.pred_heads = 2;
    cfg.grid_rows = 2;
    cfg.grid_cols = 2;
    cfg.validate();
    const int target_frames = 4;  // grid_cols * patch_side

    Rng rng(9);
    const auto enc = ajepa::init_params<float>(cfg, rng).encoder;

    const auto make_mel = [&](std::size_t cols, std::uint64_t seed) {
        ajepa::MelSpectrogram m;
        m.rows = 4;
        m.cols = cols;
        m.values.resize(m.rows * cols);
        Rng r(seed);
        for (float& v : m.values) v = static_cast<float>(r.uniform(-1.0, 1.0));
        return m;
    };

    ajepa::MelDataset ds;
    ds.mels = {make_mel(10, 1), make_mel(10, 2)};
    ds.labels = {3, 1};

    const FeatureMatrix f = ajepa::extract_features(enc, cfg, ds, target_frames);
    CHECK(f.n == 2);
    CHECK(f.dim == cfg.feature_dim());
    CHECK(f.dim == cfg.grid_rows * cfg.dim);
    CHECK(f.labels == std::vector<int>{3, 1});
    for (const float v : f.values) CHECK(std::isfinite(v));

    SECTION("repeat extraction is bitwise identical") {
        const FeatureMatrix f2 = ajepa::extract_features(enc, cfg, ds, target_frames);
        CHECK(f2.values == f.values);
    }
    SECTION("long clips reduce to their center window") {
        ajepa::MelDataset pre;
        pre.labels = ds.labels;
        for (const auto& m : ds.mels) {
            // center start for 10 -> 4 is column 3
            ajepa::MelSpectrogram c;
            c.rows = m.rows;
            c.cols = 4;
            c.values.resize(c.rows * c.cols);
            for (std::size_t r = 0; r < c.rows; ++r)
                for (std::size_t j = 0; j < c.cols; ++j)
                    c.values[r * c.cols + j] = m.values[r * m.cols + 3 + j];
            pre.mels.push_back(std::move(c));
        }
        const FeatureMatrix g = ajepa::extract_features(enc, cfg, pre, target_frames);
        CHECK(g.values == f.values);
    }
    SECTION("a clip grid that disagrees with the config is rejected") {
        ajepa::MelDataset bad;
        bad.mels = {make_mel(10, 3)};
        bad.mels[0].rows = 6;
        bad.mels[0].values.resize(6 * 10);
        bad.labels = {0};
        CHECK_THROWS_WITH(ajepa::extract_features(enc, cfg, bad, target_frames),
                          ContainsSubstring("does not match"));
    }
}

TEST_CASE("constant-column input collapses time averaging to one column") {
    // With the position table zeroed, identical patch columns produce
    // identical per-column representations, so the time average equals any
    // single column's slice. The sinusoidal position codes are exactly what
    // breaks this symmetry in the full pipeline.
    ajepa::ModelConfig cfg;
    cfg.patch_side = 2;
    cfg.dim = 8;
    cfg.enc_layers = 1;
    cfg.enc_heads = 2;
    cfg.pred_layers = 1;
    cfg.pred_heads = 2;
    cfg.grid_rows = 2;
    cfg.grid_cols = 3;
    cfg.validate();

    Rng rng(11);
    const auto enc = ajepa::init_params<float>(cfg, rng).encoder;

    ajepa::MelSpectrogram mel;
    mel.rows = 4;
    mel.cols = 6;
    mel.values.resize(mel.rows * mel.cols);
    Rng mr(12);
    for (std::size_t r = 0; r < mel.rows; ++r) {
        const auto t0 = static_cast<float>(mr.uniform(-1.0, 1.0));
        const auto t1 = static_cast<float>(mr.uniform(-1.0, 1.0));
        for (std::size_t c = 0; c < mel.cols; ++c) mel.values[r * mel.cols + c] = c % 2 ? t1 : t0;
    }

    const ajepa::PatchGrid grid = ajepa::patchify(mel, cfg.patch_side);
    ajepa::Graph<float> g;
    const auto bound = ajepa::bind_encoder(g, enc, false);
    auto patches = g.constant(
        {grid.count(), cfg.patch_dim()},
        ajepa::detail::gather_patches<float>(grid, ajepa::detail::all_indices(grid.count())));
    auto zero_pos = g.constant({cfg.patch_count(), cfg.dim},
                               std::vector<float>(cfg.patch_count() * cfg.dim, 0.0f));
    auto repr = ajepa::encoder_forward(bound, patches, zero_pos, cfg.enc_heads);
    const std::vector<float>& rv = repr.value();

    for (std::size_t r = 0; r < cfg.grid_rows; ++r)
        for (std::size_t d = 0; d < cfg.dim; ++d) {
            const float first = rv[(r * cfg.grid_cols) * cfg.dim + d];
            double avg = 0.0;
            for (std::size_t c = 0; c < cfg.grid_cols; ++c) {
                const float v = rv[(r * cfg.grid_cols + c) * cfg.dim + d];
                CHECK(v == Catch::Approx(first).margin(1e-5));
                avg += v / cfg.grid_cols;
            }
            CHECK(avg == Catch::Approx(first).margin(1e-5));
        }
}

TEST_CASE("trained features separate better than chance on a toy corpus") {
    // End to end probe sanity on raw mel features of synthetic tones: even
    // without any encoder the pitch classes should be separable, which pins
    // the probe plumbing independently of training quality.
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ajepa_probe_corpus";
    fs::remove_all(dir);
    fs::create_directories(dir);

    ajepa::CorpusConfig cc;
    cc.pretrain_clips = 0;
    cc.probe_train_clips = 24;
    cc.probe_test_clips = 16;
    cc.seed = 9;
    ajepa::generate_corpus(dir.string(), cc);
    const std::string manifest = (dir / "manifest.jsonl").string();

    ajepa::FrontendConfig fe;
    fe.n_mels = 16;
    fe.target_frames = 16;
    fe.duration_s = 0.7;
    const ajepa::MelDataset train =
        ajepa::load_mel_dataset(manifest, ajepa::DatasetSelect::probe_train, fe);
    const double mean = train.mean, stddev = train.stddev;
    const ajepa::MelDataset test = ajepa::load_mel_dataset(
        manifest, ajepa::DatasetSelect::probe_test, fe, &mean, &stddev);

    const auto to_features = [](const ajepa::MelDataset& ds) {
        FeatureMatrix f;
        f.n = ds.mels.size();
        f.dim = static_cast<std::size_t>(16);
        f.labels = ds.labels;
        for (const auto& m : ds.mels) {
            // average each mel row over time
            for (std::size_t r = 0; r < m.rows; ++r) {
                double acc = 0.0;
                for (std::size_t c = 0; c < m.cols; ++c) acc += m.values[r * m.cols + c];
                f.values.push_back(static_cast<float>(acc / static_cast<double>(m.cols)));
            }
        }
        return f;
    };
    const FeatureMatrix ftrain = to_features(train);
    const FeatureMatrix ftest = to_features(test);
    const ajepa::ProbeModel m = ajepa::train_probe(ftrain, 4);
    CHECK(ajepa::evaluate_probe(m, ftest) > 0.25);

    fs::remove_all(dir);
}
