#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace neurovasc {

using index_t = std::int64_t;

/// Dense rank-5 tensor (batch, channel, depth, height, width), row-major doubles.
/// All network activations and gradients use this layout; W is the fastest axis.
class Tensor {
public:
    Tensor() : shape_{0, 0, 0, 0, 0} {}
    Tensor(index_t b, index_t c, index_t d, index_t h, index_t w, double fill = 0.0)
        : shape_{b, c, d, h, w}, data_(static_cast<size_t>(b * c * d * h * w), fill) {}

    static Tensor zeros_like(const Tensor& t) {
        return Tensor(t.b(), t.c(), t.d(), t.h(), t.w());
    }

    index_t b() const { return shape_[0]; }
    index_t c() const { return shape_[1]; }
    index_t d() const { return shape_[2]; }
    index_t h() const { return shape_[3]; }
    index_t w() const { return shape_[4]; }
    const std::array<index_t, 5>& shape() const { return shape_; }
    index_t numel() const { return static_cast<index_t>(data_.size()); }
    index_t spatial() const { return shape_[2] * shape_[3] * shape_[4]; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    index_t offset(index_t b, index_t c, index_t z, index_t y, index_t x) const {
        return (((b * shape_[1] + c) * shape_[2] + z) * shape_[3] + y) * shape_[4] + x;
    }
    double& at(index_t b, index_t c, index_t z, index_t y, index_t x) {
        return data_[static_cast<size_t>(offset(b, c, z, y, x))];
    }
    double at(index_t b, index_t c, index_t z, index_t y, index_t x) const {
        return data_[static_cast<size_t>(offset(b, c, z, y, x))];
    }
    double& operator[](index_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](index_t i) const { return data_[static_cast<size_t>(i)]; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(0.0); }

    Tensor& add_(const Tensor& o) {
        check_same_shape(o);
        const double* s = o.data();
        double* p = data();
        for (index_t i = 0, n = numel(); i < n; ++i) p[i] += s[i];
        return *this;
    }
    Tensor& axpy_(double a, const Tensor& o) {
        check_same_shape(o);
        const double* s = o.data();
        double* p = data();
        for (index_t i = 0, n = numel(); i < n; ++i) p[i] += a * s[i];
        return *this;
    }
    Tensor& scale_(double a) {
        for (double& v : data_) v *= a;
        return *this;
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : data_) m = std::max(m, std::fabs(v));
        return m;
    }
    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    void check_same_shape(const Tensor& o) const {
        if (!same_shape(o)) throw std::invalid_argument("tensor shape mismatch: " + shape_str() + " vs " + o.shape_str());
    }
    std::string shape_str() const {
        std::string s = "(";
        for (int i = 0; i < 5; ++i) s += std::to_string(shape_[i]) + (i < 4 ? "," : ")");
        return s;
    }

private:
    std::array<index_t, 5> shape_;
    std::vector<double> data_;
};

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.b() != b.b() || a.d() != b.d() || a.h() != b.h() || a.w() != b.w())
        throw std::invalid_argument("concat_channels: spatial/batch mismatch " + a.shape_str() + " vs " + b.shape_str());
    Tensor out(a.b(), a.c() + b.c(), a.d(), a.h(), a.w());
    const index_t sp = a.spatial();
    for (index_t n = 0; n < a.b(); ++n) {
        std::memcpy(out.data() + out.offset(n, 0, 0, 0, 0), a.data() + a.offset(n, 0, 0, 0, 0),
                    static_cast<size_t>(a.c() * sp) * sizeof(double));
        std::memcpy(out.data() + out.offset(n, a.c(), 0, 0, 0), b.data() + b.offset(n, 0, 0, 0, 0),
                    static_cast<size_t>(b.c() * sp) * sizeof(double));
    }
    return out;
}

/// Split a channel-concatenated gradient back into the two operand gradients.
inline std::pair<Tensor, Tensor> split_channels(const Tensor& g, index_t ca, index_t cb) {
    if (g.c() != ca + cb) throw std::invalid_argument("split_channels: channel mismatch");
    Tensor ga(g.b(), ca, g.d(), g.h(), g.w());
    Tensor gb(g.b(), cb, g.d(), g.h(), g.w());
    const index_t sp = g.spatial();
    for (index_t n = 0; n < g.b(); ++n) {
        std::memcpy(ga.data() + ga.offset(n, 0, 0, 0, 0), g.data() + g.offset(n, 0, 0, 0, 0),
                    static_cast<size_t>(ca * sp) * sizeof(double));
        std::memcpy(gb.data() + gb.offset(n, 0, 0, 0, 0), g.data() + g.offset(n, ca, 0, 0, 0),
                    static_cast<size_t>(cb * sp) * sizeof(double));
    }
    return {std::move(ga), std::move(gb)};
}

// ===== 3D volumes (sample storage; image = float, labels = uint8) =====

template <class T>
class Vol3 {
public:
    Vol3() : shape_{0, 0, 0} {}
    Vol3(index_t d, index_t h, index_t w, T fill = T{})
        : shape_{d, h, w}, data_(static_cast<size_t>(d * h * w), fill) {}

    index_t d() const { return shape_[0]; }
    index_t h() const { return shape_[1]; }
    index_t w() const { return shape_[2]; }
    const std::array<index_t, 3>& shape() const { return shape_; }
    index_t numel() const { return static_cast<index_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    index_t offset(index_t z, index_t y, index_t x) const { return (z * shape_[1] + y) * shape_[2] + x; }
    T& at(index_t z, index_t y, index_t x) { return data_[static_cast<size_t>(offset(z, y, x))]; }
    T at(index_t z, index_t y, index_t x) const { return data_[static_cast<size_t>(offset(z, y, x))]; }
    T& operator[](index_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](index_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Vol3& o) const { return shape_ == o.shape_; }

private:
    std::array<index_t, 3> shape_;
    std::vector<T> data_;
};

using ImageVol = Vol3<float>;
using LabelVol = Vol3<std::uint8_t>;

}  // namespace neurovasc
