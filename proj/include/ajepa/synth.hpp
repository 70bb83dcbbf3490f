#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ajepa/common.hpp"
#include "ajepa/fft.hpp"
#include "ajepa/io.hpp"
#include "ajepa/rng.hpp"
#include "ajepa/wav.hpp"

#include "json.hpp"

namespace ajepa {

/// Pitch classes are octave spaced so a linear probe on frozen features has
/// something clean to separate.
inline constexpr std::array<double, 4> kPitchClassHz = {220.0, 440.0, 880.0, 1760.0};

enum class ClipKind { tone, chirp, noise_band, am_tone };

inline constexpr std::array<ClipKind, 4> kAllClipKinds = {ClipKind::tone, ClipKind::chirp,
                                                          ClipKind::noise_band, ClipKind::am_tone};

/// Kind cycle used by the corpus builder. Chirps and noise bands dominate
/// because their pitch class lives in the trajectory or band placement
/// rather than in a single steady row, which is what makes the probe task
/// informative; steady tones and AM tones keep an easy anchor in the mix.
inline constexpr std::array<ClipKind, 8> kCorpusKindCycle = {
    ClipKind::tone,       ClipKind::chirp, ClipKind::chirp, ClipKind::noise_band,
    ClipKind::am_tone,    ClipKind::chirp, ClipKind::noise_band, ClipKind::chirp};

inline std::string to_string(ClipKind k) {
    switch (k) {
        case ClipKind::tone: return "tone";
        case ClipKind::chirp: return "chirp";
        case ClipKind::noise_band: return "noise_band";
        case ClipKind::am_tone: return "am_tone";
    }
    return "?";
}

/// Full recipe for one clip. A spec plus its seed always synthesizes the
/// same samples.
struct ClipSpec {
    ClipKind kind = ClipKind::tone;
    double f0 = 440.0;        // fundamental (tone, chirp start, AM carrier)
    double sweep_rate = 0.0;  // chirp only, Hz per second
    double band_lo = 0.0;     // noise_band edges, Hz
    double band_hi = 0.0;
    double am_rate = 0.0;  // am_tone modulation rate, Hz
    double duration_s = 0.7;
    int sample_rate = 16000;
    std::uint64_t seed = 0;

    void validate() const {
        if (duration_s <= 0.0) throw std::invalid_argument("clip spec: duration must be positive");
        if (sample_rate <= 0) throw std::invalid_argument("clip spec: bad sample rate");
        const double nyquist = sample_rate / 2.0;
        const auto in_range = [&](double hz) { return hz > 0.0 && hz < std::min(8000.0, nyquist + 1.0); };
        switch (kind) {
            case ClipKind::tone:
            case ClipKind::am_tone:
                if (!in_range(f0))
                    throw std::invalid_argument("clip spec: frequency " + std::to_string(f0) +
                                                " out of range");
                if (kind == ClipKind::am_tone && am_rate <= 0.0)
                    throw std::invalid_argument("clip spec: am_rate must be positive");
                break;
            case ClipKind::chirp: {
                const double f_end = f0 + sweep_rate * duration_s;
                if (!in_range(f0) || !in_range(f_end))
                    throw std::invalid_argument("clip spec: chirp sweeps out of range (" +
                                                std::to_string(f0) + " to " +
                                                std::to_string(f_end) + " Hz)");
                break;
            }
            case ClipKind::noise_band:
                if (!(in_range(band_lo) && in_range(band_hi) && band_lo < band_hi))
                    throw std::invalid_argument("clip spec: bad noise band [" +
                                                std::to_string(band_lo) + ", " +
                                                std::to_string(band_hi) + "] Hz");
                break;
        }
    }
};

namespace detail {

/// Piecewise linear delay/attack/sustain/release envelope with randomized
/// corners. The random onset delay shifts the event within the clip, so
/// clip-level timing is a nuisance factor rather than a constant.
inline std::vector<double> random_envelope(std::size_t n, int sample_rate, Rng& rng) {
    const double delay_s = rng.uniform(0.0, 0.25);
    const double attack_s = rng.uniform(0.01, 0.08);
    const double release_s = rng.uniform(0.05, 0.2);
    const auto delay = static_cast<std::size_t>(delay_s * sample_rate);
    const auto attack = static_cast<std::size_t>(attack_s * sample_rate);
    const auto release = static_cast<std::size_t>(release_s * sample_rate);
    std::vector<double> env(n, 1.0);
    for (std::size_t i = 0; i < n && i < delay; ++i) env[i] = 0.0;
    for (std::size_t i = 0; i < attack; ++i)
        if (delay + i < n)
            env[delay + i] = static_cast<double>(i) / static_cast<double>(attack);
    for (std::size_t i = 0; i < n && i < release; ++i)
        env[n - 1 - i] = std::min(env[n - 1 - i], static_cast<double>(i) / release);
    return env;
}

inline void peak_normalize(std::vector<double>& s, double peak) {
    double mx = 0.0;
    for (const double v : s) mx = std::max(mx, std::abs(v));
    if (mx > 0.0)
        for (double& v : s) v *= peak / mx;
}

}  // namespace detail

inline WaveForm generate_clip(const ClipSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto n = static_cast<std::size_t>(spec.duration_s * spec.sample_rate);
    const double sr = spec.sample_rate;
    const double two_pi = 6.283185307179586476925286766559;
    std::vector<double> s(n, 0.0);

    switch (spec.kind) {
        case ClipKind::tone: {
            const double ph = rng.uniform(0.0, two_pi);
            for (std::size_t i = 0; i < n; ++i) {
                const double t = static_cast<double>(i) / sr;
                s[i] = std::sin(two_pi * spec.f0 * t + ph);
            }
            break;
        }
        case ClipKind::chirp: {
            const double ph = rng.uniform(0.0, two_pi);
            for (std::size_t i = 0; i < n; ++i) {
                const double t = static_cast<double>(i) / sr;
                s[i] = std::sin(two_pi * (spec.f0 * t + 0.5 * spec.sweep_rate * t * t) + ph);
            }
            break;
        }
        case ClipKind::noise_band: {
            // Seeded white noise shaped in the frequency domain: bins outside
            // the band are zeroed.
            for (double& v : s) v = rng.normal();
            RealFft fft(n);
            auto spectrum = fft.forward(s);
            for (std::size_t k = 0; k < spectrum.size(); ++k) {
                const double bin_hz = static_cast<double>(k) * sr / static_cast<double>(n);
                if (bin_hz < spec.band_lo || bin_hz > spec.band_hi) spectrum[k] = 0.0;
            }
            s = fft.inverse(spectrum);
            break;
        }
        case ClipKind::am_tone: {
            const double ph = rng.uniform(0.0, two_pi);
            const double depth = rng.uniform(0.4, 0.9);
            const double mph = rng.uniform(0.0, two_pi);
            for (std::size_t i = 0; i < n; ++i) {
                const double t = static_cast<double>(i) / sr;
                const double mod =
                    1.0 - depth * 0.5 * (1.0 + std::sin(two_pi * spec.am_rate * t + mph));
                s[i] = mod * std::sin(two_pi * spec.f0 * t + ph);
            }
            break;
        }
    }

    const auto env = detail::random_envelope(n, spec.sample_rate, rng);
    for (std::size_t i = 0; i < n; ++i) s[i] *= env[i];
    detail::peak_normalize(s, 0.5);

    WaveForm w;
    w.sample_rate = spec.sample_rate;
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) w.samples[i] = static_cast<float>(s[i]);
    return w;
}

/// Manifest rows. label is the pitch class for probe clips and -1 for
/// pretraining-only clips; split is "train" or "test".
struct ManifestEntry {
    std::string clip_id;
    std::string path;  // relative to the manifest's directory
    int label = -1;
    std::string split;

    bool operator==(const ManifestEntry&) const = default;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::string out;
    for (const ManifestEntry& e : entries) {
        nlohmann::json j;
        j["clip_id"] = e.clip_id;
        j["path"] = e.path;
        j["label"] = e.label;
        j["split"] = e.split;
        out += j.dump();
        out += "\n";
    }
    write_file_atomic(path, out);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path);
    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest " + path + " line " + std::to_string(lineno) + ": " +
                              e.what());
        }
        for (const auto& [key, value] : j.items()) {
            (void)value;
            if (key != "clip_id" && key != "path" && key != "label" && key != "split")
                throw FormatError("manifest " + path + " line " + std::to_string(lineno) +
                                  ": unknown key \"" + key + "\"");
        }
        try {
            ManifestEntry e;
            e.clip_id = j.at("clip_id").get<std::string>();
            e.path = j.at("path").get<std::string>();
            e.label = j.at("label").get<int>();
            e.split = j.at("split").get<std::string>();
            if (e.split != "train" && e.split != "test")
                throw FormatError("manifest " + path + " line " + std::to_string(lineno) +
                                  ": split must be train or test");
            entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest " + path + " line " + std::to_string(lineno) + ": " +
                              e.what());
        }
    }
    return entries;
}

/// Absolute path of a manifest entry's wav file.
inline std::string resolve_clip_path(const std::string& manifest_path, const ManifestEntry& e) {
    namespace fs = std::filesystem;
    fs::path p(e.path);
    if (p.is_absolute()) return p.string();
    return (fs::path(manifest_path).parent_path() / p).string();
}

struct CorpusConfig {
    std::size_t pretrain_clips = 2000;
    std::size_t probe_train_clips = 200;
    std::size_t probe_test_clips = 200;
    double duration_s = 0.7;
    int sample_rate = 16000;
    std::uint64_t seed = 1234;
};

namespace detail {

/// Clip recipe shared by the corpus builder: pitch-class clips jitter their
/// class frequency by +/- 3 percent; unlabeled pretraining clips draw the
/// fundamental log-uniformly so pretraining sees a pitch continuum.
///
/// Nuisance parameters are drawn wide on purpose. A chirp starts at f0 and
/// sweeps up to 1.4 octaves in a random direction, and a noise band is
/// centred on f0 with a random half-width up to an octave, so the pitch
/// class is explicit in the mel sequence (the opening frames, or the band's
/// geometric centre) but smeared in any time-averaged view of the clip.
inline ClipSpec corpus_clip_spec(const std::string& clip_id, int label, std::size_t ordinal,
                                 const CorpusConfig& cfg) {
    ClipSpec spec;
    spec.duration_s = cfg.duration_s;
    spec.sample_rate = cfg.sample_rate;
    spec.seed = fnv1a64(clip_id, cfg.seed);
    spec.kind = kCorpusKindCycle[(ordinal / kPitchClassHz.size()) % kCorpusKindCycle.size()];

    Rng rng(fnv1a64("spec:" + clip_id, cfg.seed));
    if (label >= 0)
        spec.f0 = kPitchClassHz[static_cast<std::size_t>(label)] * (1.0 + rng.uniform(-0.03, 0.03));
    else
        spec.f0 = 150.0 * std::exp(rng.uniform(0.0, std::log(2500.0 / 150.0)));

    switch (spec.kind) {
        case ClipKind::tone:
            break;
        case ClipKind::chirp: {
            double octaves = rng.uniform(0.8, 1.4);
            const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
            if (sign > 0.0) octaves = std::min(octaves, std::log2(7800.0 / spec.f0));
            const double f_end = spec.f0 * std::pow(2.0, sign * octaves);
            spec.sweep_rate = (f_end - spec.f0) / cfg.duration_s;
            break;
        }
        case ClipKind::noise_band: {
            const double half_octaves = rng.uniform(1.0 / 6.0, 1.0);
            spec.band_lo = spec.f0 * std::pow(2.0, -half_octaves);
            spec.band_hi = spec.f0 * std::pow(2.0, half_octaves);
            break;
        }
        case ClipKind::am_tone:
            spec.am_rate = rng.uniform(3.0, 9.0);
            break;
    }
    return spec;
}

}  // namespace detail

/// Writes wav/<clip_id>.wav files plus manifest.jsonl under out_dir. The
/// train split holds pretraining clips (label -1) and the labeled probe
/// training clips; the test split holds the labeled probe test clips. Labels
/// and kinds cycle, so probe splits are balanced. Per-clip seeds derive from
/// the clip id, so regeneration with one seed is exact.
inline std::vector<ManifestEntry> generate_corpus(const std::string& out_dir,
                                                  const CorpusConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "wav");
    std::vector<ManifestEntry> entries;

    const auto emit = [&](const std::string& id_prefix, const std::string& split, bool labeled,
                          std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) {
            char idbuf[64];
            std::snprintf(idbuf, sizeof(idbuf), "%s_%05zu", id_prefix.c_str(), i);
            ManifestEntry e;
            e.clip_id = idbuf;
            e.path = "wav/" + e.clip_id + ".wav";
            e.label = labeled ? static_cast<int>(i % kPitchClassHz.size()) : -1;
            e.split = split;
            const ClipSpec spec = detail::corpus_clip_spec(e.clip_id, e.label, i, cfg);
            write_wav_file((fs::path(out_dir) / e.path).string(), generate_clip(spec));
            entries.push_back(std::move(e));
        }
    };
    emit("pretrain", "train", false, cfg.pretrain_clips);
    emit("probe_train", "train", true, cfg.probe_train_clips);
    emit("probe_test", "test", true, cfg.probe_test_clips);

    write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), entries);
    return entries;
}

}  // namespace ajepa
