#pragma once

#include <complex>
#include <cstddef>
#include <mutex>
#include <stdexcept>
#include <vector>

#include <fftw3.h>

namespace ajepa {

namespace detail {
// FFTW planning is not thread-safe; execution on per-object buffers is.
inline std::mutex& fftw_plan_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

/// Real <-> half-complex FFT of a fixed size, double precision.
/// One instance owns its buffers and plans, so independent instances may run
/// on different threads concurrently.
class RealFft {
public:
    explicit RealFft(std::size_t n) : n_(n) {
        if (n == 0) throw std::invalid_argument("RealFft: size must be positive");
        in_ = fftw_alloc_real(n);
        out_ = fftw_alloc_complex(n / 2 + 1);
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        fwd_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
        inv_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), out_, in_, FFTW_ESTIMATE);
    }

    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    ~RealFft() {
        std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
        fftw_destroy_plan(fwd_);
        fftw_destroy_plan(inv_);
        fftw_free(in_);
        fftw_free(out_);
    }

    std::size_t size() const { return n_; }
    std::size_t bins() const { return n_ / 2 + 1; }

    /// input.size() == size(); returns size()/2+1 spectrum values.
    std::vector<std::complex<double>> forward(const std::vector<double>& input) {
        if (input.size() != n_) throw std::invalid_argument("RealFft::forward: wrong input length");
        for (std::size_t i = 0; i < n_; ++i) in_[i] = input[i];
        fftw_execute(fwd_);
        std::vector<std::complex<double>> spec(bins());
        for (std::size_t k = 0; k < spec.size(); ++k) spec[k] = {out_[k][0], out_[k][1]};
        return spec;
    }

    /// Inverse of forward, normalized by 1/n so inverse(forward(x)) == x.
    std::vector<double> inverse(const std::vector<std::complex<double>>& spectrum) {
        if (spectrum.size() != bins())
            throw std::invalid_argument("RealFft::inverse: wrong spectrum length");
        for (std::size_t k = 0; k < spectrum.size(); ++k) {
            out_[k][0] = spectrum[k].real();
            out_[k][1] = spectrum[k].imag();
        }
        fftw_execute(inv_);
        std::vector<double> x(n_);
        const double scale = 1.0 / static_cast<double>(n_);
        for (std::size_t i = 0; i < n_; ++i) x[i] = in_[i] * scale;
        return x;
    }

private:
    std::size_t n_;
    double* in_;
    fftw_complex* out_;
    fftw_plan fwd_;
    fftw_plan inv_;
};

}  // namespace ajepa
