#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "ajepa/common.hpp"
#include "ajepa/io.hpp"

namespace ajepa {

/// Mono audio in [-1, 1].
struct WaveForm {
    std::vector<float> samples;
    int sample_rate = 0;

    double duration_s() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

namespace detail {

inline std::uint32_t rd_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t rd_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void wr_u32le(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void wr_u16le(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

/// Decode a RIFF/WAVE container holding 16-bit PCM, mono or stereo.
/// Stereo is averaged to mono; samples are scaled by 1/32768.
inline WaveForm decode_wav(std::span<const unsigned char> bytes) {
    using detail::rd_u16le;
    using detail::rd_u32le;

    if (bytes.size() < 12) throw FormatError("wav: file shorter than RIFF header");
    if (std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw FormatError("wav: not a RIFF/WAVE container");

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    const unsigned char* data = nullptr;
    std::uint32_t data_len = 0;

    std::size_t off = 12;
    while (off + 8 <= bytes.size()) {
        const char* id = reinterpret_cast<const char*>(bytes.data() + off);
        const std::uint32_t len = rd_u32le(bytes.data() + off + 4);
        const std::size_t body = off + 8;
        if (body + len > bytes.size()) throw FormatError("wav: chunk overruns file");
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (len < 16) throw FormatError("wav: fmt chunk too short");
            format = rd_u16le(bytes.data() + body);
            channels = rd_u16le(bytes.data() + body + 2);
            sample_rate = rd_u32le(bytes.data() + body + 4);
            bits = rd_u16le(bytes.data() + body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = len;
        }
        off = body + len + (len & 1);  // chunks are word-aligned
    }

    if (!have_fmt || data == nullptr) throw FormatError("wav: missing fmt or data chunk");
    if (format != 1) throw UnsupportedError("wav: only PCM (format 1) is supported");
    if (bits != 16) throw UnsupportedError("wav: only 16-bit samples are supported");
    if (channels != 1 && channels != 2)
        throw UnsupportedError("wav: only mono or stereo is supported");
    if (sample_rate == 0) throw FormatError("wav: zero sample rate");

    const std::size_t frame_bytes = 2u * channels;
    const std::size_t n = data_len / frame_bytes;

    WaveForm w;
    w.sample_rate = static_cast<int>(sample_rate);
    w.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* f = data + i * frame_bytes;
        std::int32_t acc = 0;
        for (std::uint16_t c = 0; c < channels; ++c)
            acc += static_cast<std::int16_t>(rd_u16le(f + 2 * c));
        w.samples[i] = static_cast<float>(acc) / (32768.0f * channels);
    }
    return w;
}

inline WaveForm read_wav_file(const std::string& path) {
    const auto bytes = read_binary_file(path);
    return decode_wav(bytes);
}

/// Serialize as mono PCM16. Values are clamped to [-1, 1] and scaled by 32767.
inline std::string encode_wav(const WaveForm& wave) {
    using detail::wr_u16le;
    using detail::wr_u32le;

    const std::uint32_t n = static_cast<std::uint32_t>(wave.samples.size());
    const std::uint32_t data_len = n * 2;

    std::string out;
    out.reserve(44 + data_len);
    out += "RIFF";
    wr_u32le(out, 36 + data_len);
    out += "WAVE";
    out += "fmt ";
    wr_u32le(out, 16);
    wr_u16le(out, 1);  // PCM
    wr_u16le(out, 1);  // mono
    wr_u32le(out, static_cast<std::uint32_t>(wave.sample_rate));
    wr_u32le(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
    wr_u16le(out, 2);
    wr_u16le(out, 16);
    out += "data";
    wr_u32le(out, data_len);
    for (std::uint32_t i = 0; i < n; ++i) {
        float x = wave.samples[i];
        x = x < -1.0f ? -1.0f : (x > 1.0f ? 1.0f : x);
        const auto v = static_cast<std::int16_t>(std::lrintf(x * 32767.0f));
        wr_u16le(out, static_cast<std::uint16_t>(v));
    }
    return out;
}

inline void write_wav_file(const std::string& path, const WaveForm& wave) {
    write_file_atomic(path, encode_wav(wave));
}

}  // namespace ajepa
