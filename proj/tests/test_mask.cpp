#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <sstream>
#include <vector>

#include "ajepa/mask.hpp"
#include "ajepa/rng.hpp"

using ajepa::MaskSpec;
using ajepa::MelSpectrogram;
using ajepa::PatchGrid;
using ajepa::Rng;

namespace {

void check_well_formed(const MaskSpec& spec, std::size_t n) {
    REQUIRE(!spec.context.empty());
    REQUIRE(!spec.target.empty());
    REQUIRE(std::is_sorted(spec.context.begin(), spec.context.end()));
    REQUIRE(std::is_sorted(spec.target.begin(), spec.target.end()));
    std::set<std::size_t> ctx(spec.context.begin(), spec.context.end());
    std::set<std::size_t> tgt(spec.target.begin(), spec.target.end());
    REQUIRE(ctx.size() == spec.context.size());  // no duplicates
    REQUIRE(tgt.size() == spec.target.size());
    for (const std::size_t j : spec.context) REQUIRE(j < n);
    for (const std::size_t j : spec.target) REQUIRE(j < n);
    for (const std::size_t j : spec.target) REQUIRE(ctx.count(j) == 0);  // disjoint
}

MelSpectrogram ramp_mel(std::size_t rows, std::size_t cols) {
    MelSpectrogram mel;
    mel.rows = rows;
    mel.cols = cols;
    mel.values.resize(rows * cols);
    for (std::size_t i = 0; i < mel.values.size(); ++i)
        mel.values[i] = static_cast<float>(i);
    return mel;
}

}  // namespace

TEST_CASE("patchify tiles row-major and unpatchify inverts it") {
    const MelSpectrogram mel = ramp_mel(4, 6);
    const PatchGrid grid = ajepa::patchify(mel, 2);
    REQUIRE(grid.rows == 2);
    REQUIRE(grid.cols == 3);
    REQUIRE(grid.count() == 6);
    REQUIRE(grid.patch_dim() == 4);

    // Patch 0 is the top-left 2x2 block in row-major order.
    const float* p0 = grid.patch(0);
    CHECK(p0[0] == 0.0f);
    CHECK(p0[1] == 1.0f);
    CHECK(p0[2] == 6.0f);
    CHECK(p0[3] == 7.0f);
    // Patch 4 sits at grid row 1, col 1.
    const float* p4 = grid.patch(4);
    CHECK(p4[0] == 14.0f);

    const MelSpectrogram back = ajepa::unpatchify(grid);
    CHECK(back.values == mel.values);
    CHECK(back.rows == mel.rows);
    CHECK(back.cols == mel.cols);
}

TEST_CASE("patchify rejects non-divisible shapes") {
    CHECK_THROWS_WITH(ajepa::patchify(ramp_mel(5, 6), 2),
                      Catch::Matchers::ContainsSubstring("5"));
    CHECK_THROWS_WITH(ajepa::patchify(ramp_mel(4, 7), 2),
                      Catch::Matchers::ContainsSubstring("7"));
}

TEST_CASE("unstructured masks have the exact target count and full coverage") {
    Rng rng(3);
    const std::size_t rows = 5, cols = 13, n = rows * cols;
    for (int i = 0; i < 500; ++i) {
        const MaskSpec spec = ajepa::sample_unstructured(rows, cols, 0.7, rng);
        check_well_formed(spec, n);
        REQUIRE(spec.target.size() == 46);  // round(0.7 * 65)
        REQUIRE(spec.context.size() + spec.target.size() == n);
        REQUIRE(spec.strategy == ajepa::MaskStrategy::unstructured);
    }
}

TEST_CASE("unstructured rejects degenerate ratios") {
    Rng rng(4);
    CHECK_THROWS(ajepa::sample_unstructured(2, 2, 0.01, rng));  // empty target
    CHECK_THROWS(ajepa::sample_unstructured(2, 2, 0.99, rng));  // empty context
}

TEST_CASE("time masks pick whole columns") {
    Rng rng(5);
    const std::size_t rows = 5, cols = 13;
    for (int i = 0; i < 300; ++i) {
        const MaskSpec spec = ajepa::sample_time(rows, cols, 0.4, rng);
        check_well_formed(spec, rows * cols);
        REQUIRE(spec.target.size() % rows == 0);
        REQUIRE(spec.context.size() + spec.target.size() == rows * cols);

        // A column is either fully target or fully context.
        std::vector<int> col_count(cols, 0);
        for (const std::size_t j : spec.target) ++col_count[j % cols];
        for (const int c : col_count) REQUIRE((c == 0 || c == static_cast<int>(rows)));
        REQUIRE(spec.strategy == ajepa::MaskStrategy::time);
    }
}

TEST_CASE("contiguous time masks cover one span of columns") {
    Rng rng(6);
    const std::size_t rows = 4, cols = 10;
    for (int i = 0; i < 200; ++i) {
        const MaskSpec spec = ajepa::sample_time(rows, cols, 0.3, rng, true);
        std::set<std::size_t> target_cols;
        for (const std::size_t j : spec.target) target_cols.insert(j % cols);
        REQUIRE(target_cols.size() == 3);
        CHECK(*target_cols.rbegin() - *target_cols.begin() == 2);
    }
}

TEST_CASE("multiblock masks are blocky and keep context inside one rectangle") {
    Rng rng(7);
    const std::size_t rows = 8, cols = 16, n = rows * cols;
    for (int i = 0; i < 300; ++i) {
        const MaskSpec spec = ajepa::sample_multiblock(rows, cols, {}, rng);
        check_well_formed(spec, n);
        REQUIRE(spec.strategy == ajepa::MaskStrategy::multiblock);

        // Context cells form a subset of an axis-aligned rectangle: the
        // bounding box of the context plus the targets inside it accounts for
        // every cell of the box.
        std::size_t rmin = rows, rmax = 0, cmin = cols, cmax = 0;
        for (const std::size_t j : spec.context) {
            rmin = std::min(rmin, j / cols);
            rmax = std::max(rmax, j / cols);
            cmin = std::min(cmin, j % cols);
            cmax = std::max(cmax, j % cols);
        }
        std::set<std::size_t> tgt(spec.target.begin(), spec.target.end());
        std::size_t missing = 0;
        for (std::size_t r = rmin; r <= rmax; ++r)
            for (std::size_t c = cmin; c <= cmax; ++c) {
                const std::size_t j = r * cols + c;
                const bool in_ctx = std::binary_search(spec.context.begin(), spec.context.end(), j);
                if (!in_ctx && tgt.count(j) == 0) ++missing;
            }
        REQUIRE(missing == 0);
    }
}

TEST_CASE("multiblock targets are more contiguous than unstructured ones") {
    Rng rng(8);
    const std::size_t rows = 8, cols = 16;
    std::vector<MaskSpec> specs;
    for (int i = 0; i < 400; ++i) {
        specs.push_back(ajepa::sample_multiblock(rows, cols, {}, rng));
        specs.push_back(ajepa::sample_unstructured(rows, cols, 0.2, rng));
    }
    const auto stats = ajepa::mask_stats(specs, rows, cols);
    const double mb = stats.at(ajepa::MaskStrategy::multiblock).contiguity;
    const double un = stats.at(ajepa::MaskStrategy::unstructured).contiguity;
    CHECK(mb > un + 0.15);
}

TEST_CASE("mask draws are determined by the rng seed") {
    for (const auto strategy : {ajepa::MaskStrategy::unstructured, ajepa::MaskStrategy::multiblock,
                                ajepa::MaskStrategy::time}) {
        Rng a(99), b(99);
        const auto draw = [&](Rng& r) {
            switch (strategy) {
                case ajepa::MaskStrategy::unstructured:
                    return ajepa::sample_unstructured(5, 13, 0.7, r);
                case ajepa::MaskStrategy::multiblock:
                    return ajepa::sample_multiblock(5, 13, {}, r);
                default:
                    return ajepa::sample_time(5, 13, 0.4, r);
            }
        };
        const MaskSpec x = draw(a), y = draw(b);
        CHECK(x.context == y.context);
        CHECK(x.target == y.target);
    }
}

TEST_CASE("mask_stats matches a hand-computed example") {
    // 2x3 grid, targets {0, 1}: cell 0 has neighbors 1 (target) and 3; cell 1
    // has neighbors 0 (target), 2, and 4. Contiguity = (1/2 + 1/3) / 2.
    MaskSpec spec;
    spec.strategy = ajepa::MaskStrategy::unstructured;
    spec.target = {0, 1};
    spec.context = {2, 5};
    const auto stats = ajepa::mask_stats(std::span(&spec, 1), 2, 3);
    const auto& st = stats.at(ajepa::MaskStrategy::unstructured);
    CHECK(st.draws == 1);
    CHECK_THAT(st.mean_target, Catch::Matchers::WithinAbs(2.0, 1e-12));
    CHECK_THAT(st.mean_context, Catch::Matchers::WithinAbs(2.0, 1e-12));
    CHECK_THAT(st.column_coverage, Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-12));
    CHECK_THAT(st.contiguity, Catch::Matchers::WithinAbs((0.5 + 1.0 / 3.0) / 2.0, 1e-12));
}

TEST_CASE("strategy names round trip") {
    for (const auto s : {ajepa::MaskStrategy::unstructured, ajepa::MaskStrategy::multiblock,
                         ajepa::MaskStrategy::time})
        CHECK(ajepa::mask_strategy_from_string(ajepa::to_string(s)) == s);
    CHECK_THROWS(ajepa::mask_strategy_from_string("banana"));
}

TEST_CASE("encode_mask_pgm emits one value per cell") {
    MaskSpec spec;
    spec.target = {0, 4};
    spec.context = {1, 2};
    const std::string pgm = ajepa::encode_mask_pgm(spec, 2, 3);

    std::istringstream in(pgm);
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    REQUIRE(magic == "P2");
    REQUIRE(w == 3);
    REQUIRE(h == 2);
    REQUIRE(maxval == 255);
    std::vector<int> pix;
    int v = 0;
    while (in >> v) pix.push_back(v);
    REQUIRE(pix.size() == 6);
    CHECK(pix == std::vector<int>{255, 0, 0, 128, 255, 128});
}
