#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ajepa {

/// Malformed container or on-disk structure (bad WAV header, truncated checkpoint, ...).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Well-formed input that this library deliberately does not handle (e.g. 24-bit PCM).
struct UnsupportedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace ajepa
