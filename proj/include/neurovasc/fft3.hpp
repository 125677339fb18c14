#pragma once

#include <complex>
#include <map>
#include <mutex>
#include <vector>

#include "tensor.hpp"

namespace neurovasc::fft {

using cplx = std::complex<double>;

/// Twiddle matrix T[k*n+j] = exp(-+2*pi*i*k*j/n), cached per (n, direction).
/// Plain O(n^2) DFT; spectra in this codebase are tiny (<= a few dozen per axis).
inline const std::vector<cplx>& twiddle(index_t n, bool inverse) {
    static std::map<std::pair<index_t, bool>, std::vector<cplx>> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(n, inverse);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<cplx> t(static_cast<size_t>(n * n));
    const double sign = inverse ? 2.0 : -2.0;
    for (index_t k = 0; k < n; ++k)
        for (index_t j = 0; j < n; ++j) {
            const double ang = sign * 3.14159265358979323846 * static_cast<double>((k * j) % n) /
                               static_cast<double>(n);
            t[static_cast<size_t>(k * n + j)] = cplx(std::cos(ang), std::sin(ang));
        }
    return cache.emplace(key, std::move(t)).first->second;
}

namespace detail {
/// DFT along the axis with the given stride; `lines` enumerates the start of
/// each 1D line. Works in place via a scratch row.
inline void dft_axis(cplx* v, index_t n, index_t stride, const std::vector<index_t>& lines,
                     bool inverse) {
    const std::vector<cplx>& t = twiddle(n, inverse);
    std::vector<cplx> row(static_cast<size_t>(n));
    for (index_t base : lines) {
        for (index_t j = 0; j < n; ++j) row[static_cast<size_t>(j)] = v[base + j * stride];
        for (index_t k = 0; k < n; ++k) {
            cplx acc(0.0, 0.0);
            const cplx* tr = t.data() + k * n;
            for (index_t j = 0; j < n; ++j) acc += tr[j] * row[static_cast<size_t>(j)];
            v[base + k * stride] = acc;
        }
    }
}
}  // namespace detail

/// Separable 3D DFT over a (D,H,W) complex volume. Forward is unnormalized;
/// inverse applies the 1/(D*H*W) scale, so ifft(fft(x)) == x.
inline void fft3(cplx* v, index_t D, index_t H, index_t W, bool inverse) {
    std::vector<index_t> lines;
    lines.reserve(static_cast<size_t>(std::max({D * H, D * W, H * W})));
    // W axis
    lines.clear();
    for (index_t z = 0; z < D; ++z)
        for (index_t y = 0; y < H; ++y) lines.push_back((z * H + y) * W);
    detail::dft_axis(v, W, 1, lines, inverse);
    // H axis
    lines.clear();
    for (index_t z = 0; z < D; ++z)
        for (index_t x = 0; x < W; ++x) lines.push_back(z * H * W + x);
    detail::dft_axis(v, H, W, lines, inverse);
    // D axis
    lines.clear();
    for (index_t y = 0; y < H; ++y)
        for (index_t x = 0; x < W; ++x) lines.push_back(y * W + x);
    detail::dft_axis(v, D, H * W, lines, inverse);
    if (inverse) {
        const double s = 1.0 / static_cast<double>(D * H * W);
        for (index_t i = 0, n = D * H * W; i < n; ++i) v[i] *= s;
    }
}

}  // namespace neurovasc::fft
