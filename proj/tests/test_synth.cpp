#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "ajepa/fft.hpp"
#include "ajepa/mel.hpp"
#include "ajepa/synth.hpp"

using ajepa::ClipKind;
using ajepa::ClipSpec;
using ajepa::CorpusConfig;
using ajepa::ManifestEntry;
using ajepa::WaveForm;

namespace {

std::vector<double> power_spectrum(const WaveForm& w) {
    std::vector<double> x(w.samples.begin(), w.samples.end());
    ajepa::RealFft fft(x.size());
    const auto spec = fft.forward(x);
    std::vector<double> p(spec.size());
    for (std::size_t i = 0; i < spec.size(); ++i) p[i] = std::norm(spec[i]);
    return p;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("a 440 Hz tone peaks within one FFT bin of 440") {
    ClipSpec spec;
    spec.kind = ClipKind::tone;
    spec.f0 = 440.0;
    spec.seed = 99;
    const WaveForm w = ajepa::generate_clip(spec);
    REQUIRE(w.samples.size() == static_cast<std::size_t>(0.7 * 16000));

    const auto p = power_spectrum(w);
    std::size_t peak = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
        if (p[i] > p[peak]) peak = i;
    const double bin_hz = 16000.0 / static_cast<double>(w.samples.size());
    CHECK(std::abs(peak * bin_hz - 440.0) <= bin_hz);
}

TEST_CASE("identical spec and seed synthesize bitwise identical clips") {
    ClipSpec spec;
    spec.kind = ClipKind::am_tone;
    spec.f0 = 880.0;
    spec.am_rate = 5.0;
    spec.seed = 4242;
    const WaveForm a = ajepa::generate_clip(spec);
    const WaveForm b = ajepa::generate_clip(spec);
    CHECK(a.samples == b.samples);

    spec.seed = 4243;
    const WaveForm c = ajepa::generate_clip(spec);
    CHECK(a.samples != c.samples);
}

TEST_CASE("noise band clips keep at least 90 percent of energy in band") {
    ClipSpec spec;
    spec.kind = ClipKind::noise_band;
    spec.band_lo = 1000.0;
    spec.band_hi = 2000.0;
    spec.seed = 7;
    const WaveForm w = ajepa::generate_clip(spec);
    const auto p = power_spectrum(w);
    const double bin_hz = 16000.0 / static_cast<double>(w.samples.size());
    double total = 0.0, in_band = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        total += p[i];
        const double hz = i * bin_hz;
        if (hz >= 1000.0 && hz <= 2000.0) in_band += p[i];
    }
    REQUIRE(total > 0.0);
    CHECK(in_band / total >= 0.9);
}

TEST_CASE("chirps keep their spectral mass between the endpoint frequencies") {
    ClipSpec spec;
    spec.kind = ClipKind::chirp;
    spec.f0 = 500.0;
    spec.sweep_rate = 1000.0;  // ends at 1200 Hz over 0.7 s
    spec.seed = 11;
    const WaveForm w = ajepa::generate_clip(spec);
    const auto p = power_spectrum(w);
    const double bin_hz = 16000.0 / static_cast<double>(w.samples.size());
    double total = 0.0, in_range = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        total += p[i];
        const double hz = i * bin_hz;
        if (hz >= 450.0 && hz <= 1300.0) in_range += p[i];
    }
    CHECK(in_range / total >= 0.9);
}

TEST_CASE("clips are peak normalized to one half") {
    for (const ClipKind kind : ajepa::kAllClipKinds) {
        ClipSpec spec;
        spec.kind = kind;
        spec.f0 = 440.0;
        spec.sweep_rate = kind == ClipKind::chirp ? 100.0 : 0.0;
        spec.band_lo = 400.0;
        spec.band_hi = 500.0;
        spec.am_rate = 4.0;
        spec.seed = 3;
        const WaveForm w = ajepa::generate_clip(spec);
        float mx = 0.0f;
        for (const float v : w.samples) mx = std::max(mx, std::abs(v));
        CHECK_THAT(mx, Catch::Matchers::WithinAbs(0.5, 1e-4));
    }
}

TEST_CASE("clip spec validation enforces the frequency range") {
    ClipSpec spec;
    SECTION("tone above the ceiling") {
        spec.f0 = 8000.0;
        CHECK_THROWS(spec.validate());
    }
    SECTION("non-positive duration") {
        spec.duration_s = 0.0;
        CHECK_THROWS(spec.validate());
    }
    SECTION("chirp sweeping out of range") {
        spec.kind = ClipKind::chirp;
        spec.f0 = 6000.0;
        spec.sweep_rate = 4000.0;
        CHECK_THROWS_WITH(spec.validate(), Catch::Matchers::ContainsSubstring("chirp"));
    }
    SECTION("inverted noise band") {
        spec.kind = ClipKind::noise_band;
        spec.band_lo = 2000.0;
        spec.band_hi = 1000.0;
        CHECK_THROWS(spec.validate());
    }
    SECTION("am tone needs a rate") {
        spec.kind = ClipKind::am_tone;
        spec.am_rate = 0.0;
        CHECK_THROWS(spec.validate());
    }
}

TEST_CASE("manifest writing and parsing round trip exactly") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ajepa_manifest_test";
    fs::create_directories(dir);
    const std::string path = (dir / "manifest.jsonl").string();

    std::vector<ManifestEntry> m;
    m.push_back({"clip_a", "wav/clip_a.wav", -1, "train"});
    m.push_back({"clip_b", "wav/clip_b.wav", 2, "train"});
    m.push_back({"clip_c", "wav/clip_c.wav", 0, "test"});
    ajepa::write_manifest(path, m);
    const auto back = ajepa::read_manifest(path);
    CHECK(back == m);

    CHECK(ajepa::resolve_clip_path(path, m[0]) == (dir / "wav/clip_a.wav").string());
    fs::remove_all(dir);
}

TEST_CASE("manifest parsing rejects malformed rows") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ajepa_manifest_bad";
    fs::create_directories(dir);
    const std::string path = (dir / "m.jsonl").string();

    const auto write_and_parse = [&](const std::string& text) {
        std::ofstream out(path, std::ios::binary);
        out << text;
        out.close();
        return ajepa::read_manifest(path);
    };
    CHECK_THROWS(write_and_parse("{not json\n"));
    CHECK_THROWS(write_and_parse(R"({"clip_id":"a","path":"p","label":0,"split":"dev"})" "\n"));
    CHECK_THROWS(write_and_parse(R"({"clip_id":"a","path":"p","label":0})" "\n"));
    CHECK_THROWS(write_and_parse(
        R"({"clip_id":"a","path":"p","label":0,"split":"train","extra":1})" "\n"));
    fs::remove_all(dir);
}

TEST_CASE("generated corpus is balanced, complete, and reproducible") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ajepa_corpus_test";
    fs::remove_all(dir);

    CorpusConfig cfg;
    cfg.pretrain_clips = 12;
    cfg.probe_train_clips = 8;
    cfg.probe_test_clips = 8;
    cfg.seed = 555;

    const auto entries = ajepa::generate_corpus((dir / "a").string(), cfg);
    REQUIRE(entries.size() == 28);

    std::set<std::string> ids;
    std::map<int, int> train_labels, test_labels;
    std::size_t unlabeled = 0;
    for (const ManifestEntry& e : entries) {
        ids.insert(e.clip_id);
        REQUIRE((e.split == "train" || e.split == "test"));
        REQUIRE(fs::exists(dir / "a" / e.path));
        if (e.label < 0) {
            ++unlabeled;
            REQUIRE(e.split == "train");
        } else if (e.split == "train") {
            ++train_labels[e.label];
        } else {
            ++test_labels[e.label];
        }
    }
    CHECK(ids.size() == entries.size());
    CHECK(unlabeled == 12);
    for (int c = 0; c < 4; ++c) {
        CHECK(train_labels[c] == 2);
        CHECK(test_labels[c] == 2);
    }

    // Same seed, second directory: identical manifest and identical bytes.
    const auto entries2 = ajepa::generate_corpus((dir / "b").string(), cfg);
    REQUIRE(entries2 == entries);
    for (const ManifestEntry& e : entries)
        CHECK(slurp((dir / "a" / e.path).string()) == slurp((dir / "b" / e.path).string()));

    // Different master seed: clip content moves.
    CorpusConfig other = cfg;
    other.seed = 556;
    const auto entries3 = ajepa::generate_corpus((dir / "c").string(), other);
    bool any_diff = false;
    for (std::size_t i = 0; i < entries.size(); ++i)
        any_diff = any_diff ||
                   slurp((dir / "a" / entries[i].path).string()) !=
                       slurp((dir / "c" / entries3[i].path).string());
    CHECK(any_diff);
    fs::remove_all(dir);
}

TEST_CASE("every corpus clip survives the frontend") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "ajepa_corpus_frontend";
    fs::remove_all(dir);

    CorpusConfig cfg;
    cfg.pretrain_clips = 8;
    cfg.probe_train_clips = 4;
    cfg.probe_test_clips = 4;
    cfg.seed = 77;
    const auto entries = ajepa::generate_corpus(dir.string(), cfg);

    ajepa::FrontendConfig fe;
    fe.n_mels = 40;
    fe.duration_s = 0.7;
    fe.target_frames = 64;
    for (const ManifestEntry& e : entries) {
        const WaveForm w = ajepa::read_wav_file((dir / e.path).string());
        const ajepa::MelSpectrogram mel = ajepa::log_mel(w, fe);
        float lo = mel.values[0], hi = mel.values[0];
        for (const float v : mel.values) {
            REQUIRE(std::isfinite(v));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        REQUIRE(hi - lo > 0.5f);  // not silent, not constant
    }
    fs::remove_all(dir);
}
