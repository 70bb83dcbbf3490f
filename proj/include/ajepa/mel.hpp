#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "ajepa/common.hpp"
#include "ajepa/fft.hpp"
#include "ajepa/io.hpp"
#include "ajepa/rng.hpp"
#include "ajepa/wav.hpp"

namespace ajepa {

/// Log floor added before the final log compression.
inline constexpr double kLogMelEps = 1e-5;

struct FrontendConfig {
    int sample_rate = 16000;
    int n_fft = 400;
    int hop = 160;
    int n_mels = 80;
    double f_min = 50.0;
    double f_max = 8000.0;
    double duration_s = 2.1;
    int target_frames = 208;

    void validate() const {
        if (sample_rate <= 0) throw std::invalid_argument("frontend: sample_rate must be positive");
        if (n_fft <= 0 || hop <= 0) throw std::invalid_argument("frontend: n_fft and hop must be positive");
        if (n_mels <= 0) throw std::invalid_argument("frontend: n_mels must be positive");
        if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0))
            throw std::invalid_argument("frontend: need 0 <= f_min < f_max <= sample_rate/2");
        if (target_frames <= 0) throw std::invalid_argument("frontend: target_frames must be positive");
        if (duration_s <= 0.0) throw std::invalid_argument("frontend: duration_s must be positive");
    }
};

/// Log-scaled mel energies, [n_mels x frames] row-major.
struct MelSpectrogram {
    std::size_t rows = 0;  // mel bins
    std::size_t cols = 0;  // frames
    std::vector<float> values;

    float& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank, [n_mels x (n_fft/2 + 1)] row-major, with filter
/// centers equally spaced on the mel scale between f_min and f_max. Weights are
/// evaluated at the exact bin frequencies (no snapping of edges to bins).
struct MelFilterbank {
    std::size_t n_mels = 0;
    std::size_t n_bins = 0;
    std::vector<double> weights;            // [n_mels x n_bins]
    std::vector<double> center_freqs_hz;    // [n_mels]

    const double* row(std::size_t m) const { return weights.data() + m * n_bins; }
};

inline MelFilterbank mel_filterbank(const FrontendConfig& cfg) {
    cfg.validate();
    const std::size_t n_bins = static_cast<std::size_t>(cfg.n_fft) / 2 + 1;
    const std::size_t n_mels = static_cast<std::size_t>(cfg.n_mels);

    const double mel_lo = hz_to_mel(cfg.f_min);
    const double mel_hi = hz_to_mel(cfg.f_max);
    std::vector<double> edges_hz(n_mels + 2);
    for (std::size_t i = 0; i < n_mels + 2; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(n_mels + 1);
        edges_hz[i] = mel_to_hz(mel_lo + t * (mel_hi - mel_lo));
    }

    MelFilterbank fb;
    fb.n_mels = n_mels;
    fb.n_bins = n_bins;
    fb.weights.assign(n_mels * n_bins, 0.0);
    fb.center_freqs_hz.assign(edges_hz.begin() + 1, edges_hz.end() - 1);

    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.n_fft;
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double lo = edges_hz[m], center = edges_hz[m + 1], hi = edges_hz[m + 2];
        double row_sum = 0.0;
        for (std::size_t k = 0; k < n_bins; ++k) {
            const double f = k * bin_hz;
            const double rise = (f - lo) / (center - lo);
            const double fall = (hi - f) / (hi - center);
            const double w = std::max(0.0, std::min(rise, fall));
            fb.weights[m * n_bins + k] = w;
            row_sum += w;
        }
        if (row_sum <= 0.0)
            throw std::invalid_argument(
                "mel_filterbank: filter row " + std::to_string(m) +
                " has empty support; n_mels too large for the FFT resolution");
    }
    return fb;
}

/// Magnitude STFT -> power -> mel -> log(x + eps).
/// Hann window of length n_fft, hop-spaced frames, centered with reflect
/// padding; frame count is floor(len/hop) + 1.
inline MelSpectrogram log_mel(const WaveForm& wave, const FrontendConfig& cfg) {
    cfg.validate();
    if (wave.samples.empty()) throw std::invalid_argument("log_mel: empty waveform");
    if (wave.sample_rate != cfg.sample_rate)
        throw std::invalid_argument("log_mel: waveform sample rate " +
                                    std::to_string(wave.sample_rate) + " != configured " +
                                    std::to_string(cfg.sample_rate));

    const std::size_t n = wave.samples.size();
    const std::size_t n_fft = static_cast<std::size_t>(cfg.n_fft);
    const std::size_t hop = static_cast<std::size_t>(cfg.hop);
    const std::size_t pad = n_fft / 2;
    const std::size_t frames = n / hop + 1;

    // Periodic Hann window.
    std::vector<double> window(n_fft);
    for (std::size_t i = 0; i < n_fft; ++i)
        window[i] = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * i / n_fft);

    // Reflect-padded sample lookup (numpy-style, edge sample not repeated).
    const auto sample_at = [&](std::ptrdiff_t idx) -> double {
        const std::ptrdiff_t len = static_cast<std::ptrdiff_t>(n);
        while (idx < 0 || idx >= len) {
            if (idx < 0) idx = -idx;
            if (idx >= len) idx = 2 * (len - 1) - idx;
            if (len == 1) return wave.samples[0];
        }
        return wave.samples[static_cast<std::size_t>(idx)];
    };

    const MelFilterbank fb = mel_filterbank(cfg);
    RealFft fft(n_fft);

    MelSpectrogram mel;
    mel.rows = static_cast<std::size_t>(cfg.n_mels);
    mel.cols = frames;
    mel.values.resize(mel.rows * mel.cols);

    std::vector<double> frame(n_fft);
    for (std::size_t t = 0; t < frames; ++t) {
        const std::ptrdiff_t start =
            static_cast<std::ptrdiff_t>(t * hop) - static_cast<std::ptrdiff_t>(pad);
        for (std::size_t i = 0; i < n_fft; ++i)
            frame[i] = sample_at(start + static_cast<std::ptrdiff_t>(i)) * window[i];
        const auto spec = fft.forward(frame);
        for (std::size_t m = 0; m < fb.n_mels; ++m) {
            const double* w = fb.row(m);
            double acc = 0.0;
            for (std::size_t k = 0; k < fb.n_bins; ++k) acc += w[k] * std::norm(spec[k]);
            mel.values[m * frames + t] = static_cast<float>(std::log(acc + kLogMelEps));
        }
    }
    return mel;
}

enum class CropMode { random, center };

/// Crop to a contiguous window or pad right with log(eps) until the frame
/// count equals target_frames. Random crops draw the start from rng.
inline MelSpectrogram pad_or_crop(const MelSpectrogram& mel, std::size_t target_frames,
                                  CropMode mode = CropMode::center, Rng* rng = nullptr) {
    if (target_frames == 0) throw std::invalid_argument("pad_or_crop: target_frames must be positive");
    if (mel.cols == target_frames) return mel;

    MelSpectrogram out;
    out.rows = mel.rows;
    out.cols = target_frames;
    out.values.resize(out.rows * out.cols);

    if (mel.cols > target_frames) {
        const std::size_t slack = mel.cols - target_frames;
        std::size_t start = slack / 2;
        if (mode == CropMode::random) {
            if (rng == nullptr) throw std::invalid_argument("pad_or_crop: random crop needs an rng");
            start = static_cast<std::size_t>(rng->uniform_below(slack + 1));
        }
        for (std::size_t r = 0; r < out.rows; ++r)
            std::memcpy(&out.values[r * target_frames], &mel.values[r * mel.cols + start],
                        target_frames * sizeof(float));
    } else {
        const float fill = static_cast<float>(std::log(kLogMelEps));
        for (std::size_t r = 0; r < out.rows; ++r) {
            std::memcpy(&out.values[r * target_frames], &mel.values[r * mel.cols],
                        mel.cols * sizeof(float));
            for (std::size_t c = mel.cols; c < target_frames; ++c)
                out.values[r * target_frames + c] = fill;
        }
    }
    return out;
}

/// Elementwise (x - mean) / std.
inline MelSpectrogram normalize(const MelSpectrogram& mel, double mean, double stddev) {
    if (!(stddev > 0.0)) throw std::invalid_argument("normalize: std must be positive");
    MelSpectrogram out = mel;
    const float m = static_cast<float>(mean);
    const float inv = static_cast<float>(1.0 / stddev);
    for (float& v : out.values) v = (v - m) * inv;
    return out;
}

// --- binary dump -------------------------------------------------------------
// magic "MELSPEC1", u32 rows, u32 cols (little endian), then row-major f32.

inline std::string encode_mel_dump(const MelSpectrogram& mel) {
    std::string out;
    out.reserve(16 + mel.values.size() * 4);
    out += "MELSPEC1";
    detail::wr_u32le(out, static_cast<std::uint32_t>(mel.rows));
    detail::wr_u32le(out, static_cast<std::uint32_t>(mel.cols));
    for (const float v : mel.values) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::wr_u32le(out, bits);
    }
    return out;
}

inline void write_mel_dump(const std::string& path, const MelSpectrogram& mel) {
    write_file_atomic(path, encode_mel_dump(mel));
}

inline MelSpectrogram decode_mel_dump(std::span<const unsigned char> bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), "MELSPEC1", 8) != 0)
        throw FormatError("mel dump: bad magic");
    MelSpectrogram mel;
    mel.rows = detail::rd_u32le(bytes.data() + 8);
    mel.cols = detail::rd_u32le(bytes.data() + 12);
    const std::size_t n = mel.rows * mel.cols;
    if (bytes.size() != 16 + n * 4) throw FormatError("mel dump: size does not match dims");
    mel.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = detail::rd_u32le(bytes.data() + 16 + i * 4);
        std::memcpy(&mel.values[i], &bits, 4);
    }
    return mel;
}

inline MelSpectrogram read_mel_dump(const std::string& path) {
    const auto bytes = read_binary_file(path);
    return decode_mel_dump(bytes);
}

}  // namespace ajepa
