#pragma once

#include <algorithm>
#include <map>

#include "fft3.hpp"
#include "layers.hpp"

namespace neurovasc {

// =====================================================================
// Dilated conv block: [3x3x3 dilated conv -> BN -> ReLU] x 2
// =====================================================================

struct BlockConfig {
    index_t in_channels = 1;
    index_t out_channels = 1;
    index_t dild = 2, dilh = 2, dilw = 2;
    double drop_path_rate = 0.1;
    index_t eca_kernel = 3;
    index_t heads = 4;
};

class DilatedConvBlock : public Module {
public:
    DilatedConvBlock(index_t cin, index_t cout, Rng& rng, index_t dild = 2, index_t dilh = 2,
                     index_t dilw = 2)
        : conv1_(cin, cout, conv3_geom(dild, dilh, dilw), true, rng),
          bn1_(cout),
          conv2_(cout, cout, conv3_geom(dild, dilh, dilw), true, rng),
          bn2_(cout) {}

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        Tensor t = relu1_.forward(bn1_.forward(conv1_.forward(x, ctx), ctx), ctx);
        return relu2_.forward(bn2_.forward(conv2_.forward(t, ctx), ctx), ctx);
    }
    Tensor backward(const Tensor& gout) {
        Tensor g = conv2_.backward(bn2_.backward(relu2_.backward(gout)));
        return conv1_.backward(bn1_.backward(relu1_.backward(g)));
    }
    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        conv1_.collect_params(join_path(prefix, "unit1.conv"), out);
        bn1_.collect_params(join_path(prefix, "unit1.bn"), out);
        conv2_.collect_params(join_path(prefix, "unit2.conv"), out);
        bn2_.collect_params(join_path(prefix, "unit2.bn"), out);
    }
    index_t in_channels() const { return conv1_.in_channels(); }
    index_t out_channels() const { return conv2_.out_channels(); }

private:
    Conv3d conv1_;
    BatchNorm3d bn1_;
    ReLU relu1_;
    Conv3d conv2_;
    BatchNorm3d bn2_;
    ReLU relu2_;
};

// =====================================================================
// Additive grid attention gate for skip connections
// =====================================================================
// x_skip is projected with a strided pointwise conv onto the gate grid (one
// level deeper), summed with the projected gate signal, squashed to a scalar
// field, and the sigmoid coefficients are upsampled back onto x_skip.

class AttentionGate : public Module {
public:
    AttentionGate(index_t skip_channels, index_t gate_channels, Rng& rng)
        : c_(skip_channels),
          cg_(gate_channels),
          f_int_(std::max<index_t>(1, skip_channels / 2)),
          wx_(skip_channels, f_int_, pointwise_geom(), true, rng),
          wg_(gate_channels, f_int_, pointwise_geom(), true, rng),
          psi_(f_int_, 1, pointwise_geom(), true, rng) {}

    Tensor forward(const Tensor& x_skip, const Tensor& g, const RunCtx& ctx) {
        if (x_skip.d() != 2 * g.d() || x_skip.h() != 2 * g.h() || x_skip.w() != 2 * g.w())
            throw std::invalid_argument("AttentionGate: skip dims must be 2x gate dims, got " +
                                        x_skip.shape_str() + " vs " + g.shape_str());
        x_skip_ = x_skip;
        Tensor xs = subsample2(x_skip);
        Tensor a = wx_.forward(xs, ctx);
        a.add_(wg_.forward(g, ctx));
        a = relu_.forward(a, ctx);
        Tensor t = psi_.forward(a, ctx);
        sig_ = t;
        double* p = sig_.data();
        for (index_t i = 0, n = sig_.numel(); i < n; ++i) p[i] = 1.0 / (1.0 + std::exp(-p[i]));
        alpha_ = upsample2_trilinear(sig_);
        Tensor out = Tensor::zeros_like(x_skip);
        const index_t sp = x_skip.spatial();
        for (index_t b = 0; b < x_skip.b(); ++b) {
            const double* al = alpha_.data() + alpha_.offset(b, 0, 0, 0, 0);
            for (index_t c = 0; c < c_; ++c) {
                const double* xp = x_skip.data() + x_skip.offset(b, c, 0, 0, 0);
                double* op = out.data() + out.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) op[v] = xp[v] * al[v];
            }
        }
        return out;
    }

    /// Returns (grad x_skip, grad g).
    std::pair<Tensor, Tensor> backward(const Tensor& gout) {
        const index_t sp = x_skip_.spatial();
        Tensor gx = Tensor::zeros_like(x_skip_);
        Tensor galpha(gout.b(), 1, gout.d(), gout.h(), gout.w());
        for (index_t b = 0; b < gout.b(); ++b) {
            const double* al = alpha_.data() + alpha_.offset(b, 0, 0, 0, 0);
            double* ga = galpha.data() + galpha.offset(b, 0, 0, 0, 0);
            for (index_t c = 0; c < c_; ++c) {
                const double* go = gout.data() + gout.offset(b, c, 0, 0, 0);
                const double* xp = x_skip_.data() + x_skip_.offset(b, c, 0, 0, 0);
                double* gxp = gx.data() + gx.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) {
                    gxp[v] += go[v] * al[v];
                    ga[v] += go[v] * xp[v];
                }
            }
        }
        Tensor gsig = upsample2_trilinear_adjoint(galpha);
        double* gs = gsig.data();
        const double* s = sig_.data();
        for (index_t i = 0, n = gsig.numel(); i < n; ++i) gs[i] *= s[i] * (1.0 - s[i]);
        Tensor ga = relu_.backward(psi_.backward(gsig));
        Tensor gg = wg_.backward(ga);
        Tensor gxs = wx_.backward(ga);
        scatter_subsample2(gxs, gx);
        return {std::move(gx), std::move(gg)};
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        wx_.collect_params(join_path(prefix, "wx"), out);
        wg_.collect_params(join_path(prefix, "wg"), out);
        psi_.collect_params(join_path(prefix, "psi"), out);
    }

    /// Attention coefficients of the last forward, at skip resolution.
    const Tensor& coefficients() const { return alpha_; }

    static Tensor subsample2(const Tensor& x) {
        Tensor out(x.b(), x.c(), x.d() / 2, x.h() / 2, x.w() / 2);
        for (index_t b = 0; b < x.b(); ++b)
            for (index_t c = 0; c < x.c(); ++c)
                for (index_t z = 0; z < out.d(); ++z)
                    for (index_t y = 0; y < out.h(); ++y)
                        for (index_t xx = 0; xx < out.w(); ++xx)
                            out.at(b, c, z, y, xx) = x.at(b, c, 2 * z, 2 * y, 2 * xx);
        return out;
    }
    static void scatter_subsample2(const Tensor& gsub, Tensor& gx) {
        for (index_t b = 0; b < gsub.b(); ++b)
            for (index_t c = 0; c < gsub.c(); ++c)
                for (index_t z = 0; z < gsub.d(); ++z)
                    for (index_t y = 0; y < gsub.h(); ++y)
                        for (index_t xx = 0; xx < gsub.w(); ++xx)
                            gx.at(b, c, 2 * z, 2 * y, 2 * xx) += gsub.at(b, c, z, y, xx);
    }

    /// Factor-2 trilinear upsampling (half-voxel-centred sampling, clamped edges).
    static Tensor upsample2_trilinear(const Tensor& x) {
        Tensor out(x.b(), x.c(), 2 * x.d(), 2 * x.h(), 2 * x.w());
        auto table = [](index_t o, index_t n, index_t& i0, index_t& i1, double& w0) {
            if (o % 2 == 0) {
                i0 = std::max<index_t>(0, o / 2 - 1);
                i1 = o / 2;
                w0 = (o == 0) ? 0.0 : 0.25;
            } else {
                i0 = o / 2;
                i1 = std::min(n - 1, o / 2 + 1);
                w0 = (o / 2 + 1 > n - 1) ? 1.0 : 0.75;
            }
        };
        for (index_t b = 0; b < x.b(); ++b)
            for (index_t c = 0; c < x.c(); ++c)
                for (index_t z = 0; z < out.d(); ++z) {
                    index_t z0, z1;
                    double wz;
                    table(z, x.d(), z0, z1, wz);
                    for (index_t y = 0; y < out.h(); ++y) {
                        index_t y0, y1;
                        double wy;
                        table(y, x.h(), y0, y1, wy);
                        for (index_t xx = 0; xx < out.w(); ++xx) {
                            index_t x0, x1;
                            double wx;
                            table(xx, x.w(), x0, x1, wx);
                            double v = 0.0;
                            for (int iz = 0; iz < 2; ++iz)
                                for (int iy = 0; iy < 2; ++iy)
                                    for (int ix = 0; ix < 2; ++ix) {
                                        const double wgt = (iz ? 1.0 - wz : wz) * (iy ? 1.0 - wy : wy) *
                                                           (ix ? 1.0 - wx : wx);
                                        if (wgt == 0.0) continue;
                                        v += wgt * x.at(b, c, iz ? z1 : z0, iy ? y1 : y0, ix ? x1 : x0);
                                    }
                            out.at(b, c, z, y, xx) = v;
                        }
                    }
                }
        return out;
    }
    static Tensor upsample2_trilinear_adjoint(const Tensor& gout) {
        Tensor gin(gout.b(), gout.c(), gout.d() / 2, gout.h() / 2, gout.w() / 2);
        auto table = [](index_t o, index_t n, index_t& i0, index_t& i1, double& w0) {
            if (o % 2 == 0) {
                i0 = std::max<index_t>(0, o / 2 - 1);
                i1 = o / 2;
                w0 = (o == 0) ? 0.0 : 0.25;
            } else {
                i0 = o / 2;
                i1 = std::min(n - 1, o / 2 + 1);
                w0 = (o / 2 + 1 > n - 1) ? 1.0 : 0.75;
            }
        };
        for (index_t b = 0; b < gout.b(); ++b)
            for (index_t c = 0; c < gout.c(); ++c)
                for (index_t z = 0; z < gout.d(); ++z) {
                    index_t z0, z1;
                    double wz;
                    table(z, gin.d(), z0, z1, wz);
                    for (index_t y = 0; y < gout.h(); ++y) {
                        index_t y0, y1;
                        double wy;
                        table(y, gin.h(), y0, y1, wy);
                        for (index_t xx = 0; xx < gout.w(); ++xx) {
                            index_t x0, x1;
                            double wx;
                            table(xx, gin.w(), x0, x1, wx);
                            const double g = gout.at(b, c, z, y, xx);
                            for (int iz = 0; iz < 2; ++iz)
                                for (int iy = 0; iy < 2; ++iy)
                                    for (int ix = 0; ix < 2; ++ix) {
                                        const double wgt = (iz ? 1.0 - wz : wz) * (iy ? 1.0 - wy : wy) *
                                                           (ix ? 1.0 - wx : wx);
                                        if (wgt == 0.0) continue;
                                        gin.at(b, c, iz ? z1 : z0, iy ? y1 : y0, ix ? x1 : x0) += wgt * g;
                                    }
                        }
                    }
                }
        return gin;
    }

private:
    index_t c_, cg_, f_int_;
    Conv3d wx_, wg_, psi_;
    ReLU relu_;
    Tensor x_skip_, sig_, alpha_;
};

// =====================================================================
// ASPP: three parallel anisotropic dilated 3x3x3 convs, concat, 1x1x1 fuse
// =====================================================================

class Aspp : public Module {
public:
    Aspp(index_t channels, Rng& rng)
        : c_(channels),
          b1_(channels, channels, conv3_geom(1, 1, 1), true, rng),
          b2_(channels, channels, conv3_geom(1, 2, 2), true, rng),
          b3_(channels, channels, conv3_geom(1, 3, 3), true, rng),
          fuse_(3 * channels, channels, pointwise_geom(), true, rng) {}

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        Tensor t1 = b1_.forward(x, ctx);
        Tensor t2 = b2_.forward(x, ctx);
        Tensor t3 = b3_.forward(x, ctx);
        Tensor cat = concat_channels(concat_channels(t1, t2), t3);
        return fuse_.forward(cat, ctx);
    }
    Tensor backward(const Tensor& gout) {
        Tensor gcat = fuse_.backward(gout);
        auto [g12, g3] = split_channels(gcat, 2 * c_, c_);
        auto [g1, g2] = split_channels(g12, c_, c_);
        Tensor gx = b1_.backward(g1);
        gx.add_(b2_.backward(g2));
        gx.add_(b3_.backward(g3));
        return gx;
    }
    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        b1_.collect_params(join_path(prefix, "rate111"), out);
        b2_.collect_params(join_path(prefix, "rate122"), out);
        b3_.collect_params(join_path(prefix, "rate133"), out);
        fuse_.collect_params(join_path(prefix, "fuse"), out);
    }

private:
    index_t c_;
    Conv3d b1_, b2_, b3_, fuse_;
};

// =====================================================================
// Laplacian-of-Gaussian edge filter (fixed, non-learnable, depthwise)
// =====================================================================

struct LoGKernel {
    double sigma = 1.0;
    index_t size = 5;
    std::vector<double> weights;  // size^3, DC-corrected so the sum is 0

    static double raw_weight(double r2, double sigma) {
        const double s2 = sigma * sigma;
        return -1.0 / (3.14159265358979323846 * s2 * s2) * (1.0 - r2 / (2.0 * s2)) *
               std::exp(-r2 / (2.0 * s2));
    }

    static LoGKernel make(double sigma = 1.0, index_t size = 5) {
        if (size % 2 == 0) throw std::invalid_argument("LoGKernel: size must be odd");
        LoGKernel k;
        k.sigma = sigma;
        k.size = size;
        const index_t half = size / 2;
        k.weights.resize(static_cast<size_t>(size * size * size));
        double sum = 0.0;
        index_t i = 0;
        for (index_t z = -half; z <= half; ++z)
            for (index_t y = -half; y <= half; ++y)
                for (index_t x = -half; x <= half; ++x, ++i) {
                    const double r2 = static_cast<double>(z * z + y * y + x * x);
                    k.weights[static_cast<size_t>(i)] = raw_weight(r2, sigma);
                    sum += k.weights[static_cast<size_t>(i)];
                }
        const double mean = sum / static_cast<double>(size * size * size);
        for (double& w : k.weights) w -= mean;
        return k;
    }

    double weight_sum() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }
};

class LoGFilter : public Module {
public:
    explicit LoGFilter(LoGKernel kernel = LoGKernel::make()) : kernel_(std::move(kernel)) {}

    Tensor forward(const Tensor& x, const RunCtx&) {
        in_channels_ = x.c();
        Tensor out;
        ops::conv3d_forward(x, replicated(x.c()), empty_, x.c(), geom(x.c()), out);
        return out;
    }
    Tensor backward(const Tensor& gout) {
        // No learnable weights; only the input gradient is propagated.
        Tensor gin;
        Tensor dummy_in = Tensor::zeros_like(gout);
        ops::conv3d_backward(dummy_in, replicated(in_channels_), in_channels_, geom(in_channels_), gout,
                             &gin, nullptr, nullptr);
        return gin;
    }
    void collect_params(const std::string&, std::vector<Param*>&) override {}

    const LoGKernel& kernel() const { return kernel_; }

private:
    ops::Conv3dGeom geom(index_t c) const {
        return ops::Conv3dGeom{kernel_.size, kernel_.size, kernel_.size, 1, 1, 1, c};
    }
    const std::vector<double>& replicated(index_t c) {
        if (static_cast<index_t>(rep_.size()) != c * static_cast<index_t>(kernel_.weights.size())) {
            rep_.clear();
            rep_.reserve(static_cast<size_t>(c) * kernel_.weights.size());
            for (index_t i = 0; i < c; ++i)
                rep_.insert(rep_.end(), kernel_.weights.begin(), kernel_.weights.end());
        }
        return rep_;
    }

    LoGKernel kernel_;
    index_t in_channels_ = 0;
    std::vector<double> rep_, empty_;
};

// =====================================================================
// Frequency-spatial attention: learnable mask over the 3D spectrum
// =====================================================================
// f = Re( IFFT3( M .* FFT3(x) ) ), with M shared across batch and channels.
// M lives on a fixed design-time grid; a mismatched runtime spectrum resamples
// it linearly over wrapped normalized-frequency coordinates.

class Fsa : public Module {
public:
    Fsa(index_t mask_d, index_t mask_h, index_t mask_w) : md_(mask_d), mh_(mask_h), mw_(mask_w) {
        mask = Param({mask_d, mask_h, mask_w});
        init_const(mask, 1.0);  // identity at init
    }

    Tensor forward(const Tensor& x, const RunCtx&) {
        const index_t B = x.b(), C = x.c(), D = x.d(), H = x.h(), W = x.w();
        shape_ = x.shape();
        build_effective_mask(D, H, W);
        const index_t sp = D * H * W;
        spectra_.assign(static_cast<size_t>(B * C * sp), fft::cplx(0.0, 0.0));
        Tensor out = Tensor::zeros_like(x);
        std::vector<fft::cplx> buf(static_cast<size_t>(sp));
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double* xp = x.data() + x.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) buf[static_cast<size_t>(v)] = fft::cplx(xp[v], 0.0);
                fft::fft3(buf.data(), D, H, W, false);
                fft::cplx* store = spectra_.data() + (b * C + c) * sp;
                std::copy(buf.begin(), buf.end(), store);
                for (index_t v = 0; v < sp; ++v) buf[static_cast<size_t>(v)] *= meff_[static_cast<size_t>(v)];
                fft::fft3(buf.data(), D, H, W, true);
                double* op = out.data() + out.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) op[v] = buf[static_cast<size_t>(v)].real();
            }
        return out;
    }

    Tensor backward(const Tensor& gout) {
        const index_t B = shape_[0], C = shape_[1], D = shape_[2], H = shape_[3], W = shape_[4];
        const index_t sp = D * H * W;
        Tensor gin = Tensor::zeros_like(gout);
        std::vector<double> gmeff(static_cast<size_t>(sp), 0.0);
        std::vector<fft::cplx> buf(static_cast<size_t>(sp));
        const double invn = 1.0 / static_cast<double>(sp);
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double* gp = gout.data() + gout.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) buf[static_cast<size_t>(v)] = fft::cplx(gp[v], 0.0);
                fft::fft3(buf.data(), D, H, W, false);
                const fft::cplx* X = spectra_.data() + (b * C + c) * sp;
                for (index_t v = 0; v < sp; ++v) {
                    const fft::cplx G = buf[static_cast<size_t>(v)];
                    gmeff[static_cast<size_t>(v)] += invn * (X[v] * std::conj(G)).real();
                    buf[static_cast<size_t>(v)] = G * meff_[static_cast<size_t>(v)];
                }
                fft::fft3(buf.data(), D, H, W, true);
                double* gip = gin.data() + gin.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) gip[v] = buf[static_cast<size_t>(v)].real();
            }
        // Route the effective-mask gradient back onto the parameter grid.
        if (identity_map_) {
            for (index_t v = 0; v < sp; ++v) mask.g[static_cast<size_t>(v)] += gmeff[static_cast<size_t>(v)];
        } else {
            for (index_t v = 0; v < sp; ++v)
                for (int corner = 0; corner < 8; ++corner)
                    mask.g[map_idx_[static_cast<size_t>(8 * v + corner)]] +=
                        map_wgt_[static_cast<size_t>(8 * v + corner)] * gmeff[static_cast<size_t>(v)];
        }
        mask.grad_touched = true;
        return gin;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        register_param(mask, prefix, "mask", out);
    }

    Param mask;

private:
    // Wrapped linear interpolation of the mask grid at the runtime spectrum's
    // normalized signed frequencies (identity when shapes match).
    void build_effective_mask(index_t D, index_t H, index_t W) {
        const index_t sp = D * H * W;
        meff_.assign(static_cast<size_t>(sp), 0.0);
        identity_map_ = (D == md_ && H == mh_ && W == mw_);
        if (identity_map_) {
            std::copy(mask.w.begin(), mask.w.end(), meff_.begin());
            return;
        }
        map_idx_.assign(static_cast<size_t>(8 * sp), 0);
        map_wgt_.assign(static_cast<size_t>(8 * sp), 0.0);
        auto axis_map = [](index_t k, index_t n, index_t m, index_t& j0, index_t& j1, double& t) {
            const double nu = (k < (n + 1) / 2 ? static_cast<double>(k) : static_cast<double>(k - n)) /
                              static_cast<double>(n);
            double jf = nu * static_cast<double>(m);
            const double fl = std::floor(jf);
            t = jf - fl;
            j0 = static_cast<index_t>(fl) % m;
            if (j0 < 0) j0 += m;
            j1 = (j0 + 1) % m;
        };
        index_t v = 0;
        for (index_t z = 0; z < D; ++z) {
            index_t z0, z1;
            double tz;
            axis_map(z, D, md_, z0, z1, tz);
            for (index_t y = 0; y < H; ++y) {
                index_t y0, y1;
                double ty;
                axis_map(y, H, mh_, y0, y1, ty);
                for (index_t x = 0; x < W; ++x, ++v) {
                    index_t x0, x1;
                    double tx;
                    axis_map(x, W, mw_, x0, x1, tx);
                    double acc = 0.0;
                    int corner = 0;
                    for (int iz = 0; iz < 2; ++iz)
                        for (int iy = 0; iy < 2; ++iy)
                            for (int ix = 0; ix < 2; ++ix, ++corner) {
                                const double wgt = (iz ? tz : 1.0 - tz) * (iy ? ty : 1.0 - ty) *
                                                   (ix ? tx : 1.0 - tx);
                                const index_t idx =
                                    ((iz ? z1 : z0) * mh_ + (iy ? y1 : y0)) * mw_ + (ix ? x1 : x0);
                                map_idx_[static_cast<size_t>(8 * v + corner)] = static_cast<size_t>(idx);
                                map_wgt_[static_cast<size_t>(8 * v + corner)] = wgt;
                                acc += wgt * mask.w[static_cast<size_t>(idx)];
                            }
                    meff_[static_cast<size_t>(v)] = acc;
                }
            }
        }
    }

    index_t md_, mh_, mw_;
    std::array<index_t, 5> shape_{};
    std::vector<fft::cplx> spectra_;
    std::vector<double> meff_;
    bool identity_map_ = true;
    std::vector<size_t> map_idx_;
    std::vector<double> map_wgt_;
};

// =====================================================================
// Efficient channel attention (GAP -> 1D conv over channels -> sigmoid)
// =====================================================================

class Eca : public Module {
public:
    explicit Eca(index_t kernel, Rng& rng) : k_(kernel) {
        if (kernel % 2 == 0) throw std::invalid_argument("Eca: kernel must be odd");
        wk = Param({kernel});
        const double a = 1.0 / std::sqrt(static_cast<double>(kernel));
        for (double& v : wk.w) v = rng.uniform(-a, a);
    }

    Tensor forward(const Tensor& x, const RunCtx&) {
        const index_t B = x.b(), C = x.c(), sp = x.spatial();
        input_ = x;
        gap_.assign(static_cast<size_t>(B * C), 0.0);
        scale_.assign(static_cast<size_t>(B * C), 0.0);
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double* p = x.data() + x.offset(b, c, 0, 0, 0);
                double s = 0.0;
                for (index_t v = 0; v < sp; ++v) s += p[v];
                gap_[static_cast<size_t>(b * C + c)] = s / static_cast<double>(sp);
            }
        const index_t half = k_ / 2;
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                double t = 0.0;
                for (index_t j = 0; j < k_; ++j) {
                    const index_t cc = c + j - half;
                    if (cc >= 0 && cc < C) t += wk.w[static_cast<size_t>(j)] * gap_[static_cast<size_t>(b * C + cc)];
                }
                scale_[static_cast<size_t>(b * C + c)] = 1.0 / (1.0 + std::exp(-t));
            }
        Tensor out = Tensor::zeros_like(x);
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double s = scale_[static_cast<size_t>(b * C + c)];
                const double* p = x.data() + x.offset(b, c, 0, 0, 0);
                double* o = out.data() + out.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) o[v] = s * p[v];
            }
        return out;
    }

    Tensor backward(const Tensor& gout) {
        const index_t B = input_.b(), C = input_.c(), sp = input_.spatial();
        const index_t half = k_ / 2;
        Tensor gin = Tensor::zeros_like(input_);
        std::vector<double> gscale(static_cast<size_t>(B * C), 0.0);
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double s = scale_[static_cast<size_t>(b * C + c)];
                const double* go = gout.data() + gout.offset(b, c, 0, 0, 0);
                const double* xp = input_.data() + input_.offset(b, c, 0, 0, 0);
                double* gi = gin.data() + gin.offset(b, c, 0, 0, 0);
                double acc = 0.0;
                for (index_t v = 0; v < sp; ++v) {
                    gi[v] = go[v] * s;
                    acc += go[v] * xp[v];
                }
                gscale[static_cast<size_t>(b * C + c)] = acc;
            }
        std::vector<double> ggap(static_cast<size_t>(B * C), 0.0);
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double s = scale_[static_cast<size_t>(b * C + c)];
                const double gt = gscale[static_cast<size_t>(b * C + c)] * s * (1.0 - s);
                for (index_t j = 0; j < k_; ++j) {
                    const index_t cc = c + j - half;
                    if (cc >= 0 && cc < C) {
                        wk.g[static_cast<size_t>(j)] += gt * gap_[static_cast<size_t>(b * C + cc)];
                        ggap[static_cast<size_t>(b * C + cc)] += gt * wk.w[static_cast<size_t>(j)];
                    }
                }
            }
        for (index_t b = 0; b < B; ++b)
            for (index_t c = 0; c < C; ++c) {
                const double gadd = ggap[static_cast<size_t>(b * C + c)] / static_cast<double>(sp);
                double* gi = gin.data() + gin.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) gi[v] += gadd;
            }
        wk.grad_touched = true;
        return gin;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        register_param(wk, prefix, "weight", out);
    }

    /// Per-(batch,channel) sigmoid scales of the last forward.
    const std::vector<double>& scales() const { return scale_; }

    Param wk;

private:
    index_t k_;
    Tensor input_;
    std::vector<double> gap_, scale_;
};

// =====================================================================
// 3D involution: per-voxel kernels generated by a pointwise bottleneck,
// shared across channels within a group
// =====================================================================

class Involution3d : public Module {
public:
    Involution3d(index_t channels, Rng& rng, index_t kernel = 3, index_t groups = 1,
                 index_t reduction = 4)
        : c_(channels),
          k_(kernel),
          groups_(groups),
          cr_(std::max<index_t>(1, channels / reduction)),
          reduce_(channels, std::max<index_t>(1, channels / reduction), pointwise_geom(), true, rng),
          expand_(std::max<index_t>(1, channels / reduction), groups * kernel * kernel * kernel,
                  pointwise_geom(), true, rng) {
        if (channels % groups != 0)
            throw std::invalid_argument("Involution3d: channels not divisible by groups");
        if (kernel % 2 == 0) throw std::invalid_argument("Involution3d: kernel must be odd");
    }

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        input_ = x;
        kernels_ = expand_.forward(relu_.forward(reduce_.forward(x, ctx), ctx), ctx);
        return apply_kernels(x, kernels_);
    }

    Tensor backward(const Tensor& gout) {
        const index_t B = input_.b(), C = c_, D = input_.d(), H = input_.h(), W = input_.w();
        const index_t pad = k_ / 2, taps = k_ * k_ * k_;
        const index_t Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
        const index_t cpg = C / groups_;
        Tensor gkern = Tensor::zeros_like(kernels_);
        Tensor gin = Tensor::zeros_like(input_);
        std::vector<double> padbuf, gpad;
        for (index_t b = 0; b < B; ++b) {
            ops::pad_batch_item(input_, b, pad, pad, pad, padbuf);
            gpad.assign(padbuf.size(), 0.0);
            for (index_t c = 0; c < C; ++c) {
                const index_t grp = c / cpg;
                for (index_t a = 0; a < k_; ++a)
                    for (index_t bb = 0; bb < k_; ++bb)
                        for (index_t cc = 0; cc < k_; ++cc) {
                            const index_t o = grp * taps + (a * k_ + bb) * k_ + cc;
                            for (index_t z = 0; z < D; ++z)
                                for (index_t y = 0; y < H; ++y) {
                                    const double* go = gout.data() + gout.offset(b, c, z, y, 0);
                                    const double* kr = kernels_.data() + kernels_.offset(b, o, z, y, 0);
                                    double* gk = gkern.data() + gkern.offset(b, o, z, y, 0);
                                    const double* ip = padbuf.data() + ((c * Dp + z + a) * Hp + y + bb) * Wp + cc;
                                    double* gp = gpad.data() + ((c * Dp + z + a) * Hp + y + bb) * Wp + cc;
                                    for (index_t x = 0; x < W; ++x) {
                                        gk[x] += go[x] * ip[x];
                                        gp[x] += go[x] * kr[x];
                                    }
                                }
                        }
            }
            for (index_t c = 0; c < C; ++c)
                for (index_t z = 0; z < D; ++z)
                    for (index_t y = 0; y < H; ++y) {
                        const double* gp = gpad.data() + ((c * Dp + z + pad) * Hp + y + pad) * Wp + pad;
                        double* gi = gin.data() + gin.offset(b, c, z, y, 0);
                        for (index_t x = 0; x < W; ++x) gi[x] += gp[x];
                    }
        }
        gin.add_(reduce_.backward(relu_.backward(expand_.backward(gkern))));
        return gin;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        reduce_.collect_params(join_path(prefix, "reduce"), out);
        expand_.collect_params(join_path(prefix, "expand"), out);
    }

    /// Kernel-generator access for tests (e.g. forcing a centred delta).
    Conv3d& reduce() { return reduce_; }
    Conv3d& expand() { return expand_; }
    index_t kernel_size() const { return k_; }

private:
    Tensor apply_kernels(const Tensor& x, const Tensor& kern) const {
        const index_t B = x.b(), C = x.c(), D = x.d(), H = x.h(), W = x.w();
        const index_t pad = k_ / 2, taps = k_ * k_ * k_;
        const index_t Dp = D + 2 * pad, Hp = H + 2 * pad, Wp = W + 2 * pad;
        const index_t cpg = C / groups_;
        Tensor out = Tensor::zeros_like(x);
        std::vector<double> padbuf;
        for (index_t b = 0; b < B; ++b) {
            ops::pad_batch_item(x, b, pad, pad, pad, padbuf);
            for (index_t c = 0; c < C; ++c) {
                const index_t grp = c / cpg;
                for (index_t a = 0; a < k_; ++a)
                    for (index_t bb = 0; bb < k_; ++bb)
                        for (index_t cc = 0; cc < k_; ++cc) {
                            const index_t o = grp * taps + (a * k_ + bb) * k_ + cc;
                            for (index_t z = 0; z < D; ++z)
                                for (index_t y = 0; y < H; ++y) {
                                    double* op = out.data() + out.offset(b, c, z, y, 0);
                                    const double* kr = kern.data() + kern.offset(b, o, z, y, 0);
                                    const double* ip = padbuf.data() + ((c * Dp + z + a) * Hp + y + bb) * Wp + cc;
                                    for (index_t x = 0; x < W; ++x) op[x] += kr[x] * ip[x];
                                }
                        }
            }
        }
        return out;
    }

    index_t c_, k_, groups_, cr_;
    Conv3d reduce_;
    ReLU relu_;
    Conv3d expand_;
    Tensor input_, kernels_;
};

// =====================================================================
// Radially weight-tied 5x5x5 convolution (octahedral-equivariant)
// =====================================================================
// Kernel weights are shared across all offsets of equal squared radius, so
// the operator commutes with every 90-degree grid rotation exactly.

class SphericalConv3d : public Module {
public:
    SphericalConv3d(index_t cin, index_t cout, Rng& rng, index_t size = 5) : cin_(cin), cout_(cout), size_(size) {
        if (size % 2 == 0) throw std::invalid_argument("SphericalConv3d: size must be odd");
        const index_t half = size / 2;
        std::map<index_t, index_t> classes;
        for (index_t z = -half; z <= half; ++z)
            for (index_t y = -half; y <= half; ++y)
                for (index_t x = -half; x <= half; ++x) {
                    const index_t r2 = z * z + y * y + x * x;
                    if (!classes.count(r2)) {
                        const index_t id = static_cast<index_t>(classes.size());
                        classes[r2] = id;
                    }
                    class_of_.push_back(classes[r2]);
                }
        n_classes_ = static_cast<index_t>(classes.size());
        weight = Param({cout, cin, n_classes_});
        bias = Param({cout});
        init_kaiming_normal(weight, cin * size * size * size, rng);
    }

    Tensor forward(const Tensor& x, const RunCtx&) {
        input_ = x;
        Tensor out;
        ops::conv3d_forward(x, dense_weights(), bias.w, cout_, geom(), out);
        return out;
    }
    Tensor backward(const Tensor& gout) {
        const index_t taps = size_ * size_ * size_;
        std::vector<double> gdense(static_cast<size_t>(cout_ * cin_ * taps), 0.0);
        Tensor gin;
        ops::conv3d_backward(input_, dense_weights(), cout_, geom(), gout, &gin, &gdense, &bias.g);
        for (index_t co = 0; co < cout_; ++co)
            for (index_t ci = 0; ci < cin_; ++ci)
                for (index_t t = 0; t < taps; ++t)
                    weight.g[static_cast<size_t>((co * cin_ + ci) * n_classes_ +
                                                 class_of_[static_cast<size_t>(t)])] +=
                        gdense[static_cast<size_t>((co * cin_ + ci) * taps + t)];
        weight.grad_touched = bias.grad_touched = true;
        return gin;
    }
    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        register_param(weight, prefix, "radial_weight", out);
        register_param(bias, prefix, "bias", out);
    }

    index_t radial_classes() const { return n_classes_; }

    Param weight, bias;

private:
    ops::Conv3dGeom geom() const { return ops::Conv3dGeom{size_, size_, size_, 1, 1, 1, 1}; }
    std::vector<double> dense_weights() const {
        const index_t taps = size_ * size_ * size_;
        std::vector<double> dense(static_cast<size_t>(cout_ * cin_ * taps));
        for (index_t co = 0; co < cout_; ++co)
            for (index_t ci = 0; ci < cin_; ++ci)
                for (index_t t = 0; t < taps; ++t)
                    dense[static_cast<size_t>((co * cin_ + ci) * taps + t)] =
                        weight.w[static_cast<size_t>((co * cin_ + ci) * n_classes_ +
                                                     class_of_[static_cast<size_t>(t)])];
        return dense;
    }

    index_t cin_, cout_, size_, n_classes_ = 0;
    std::vector<index_t> class_of_;
    Tensor input_;
};

// =====================================================================
// ConvNeXt-style 3D block: depthwise 5^3 -> channel LayerNorm -> 4x MLP
// with GELU -> residual
// =====================================================================

class ConvNeXt3dBlock : public Module {
public:
    ConvNeXt3dBlock(index_t channels, Rng& rng)
        : c_(channels),
          dw_(channels, channels, ops::Conv3dGeom{5, 5, 5, 1, 1, 1, channels}, true, rng),
          pw1_(channels, 4 * channels, pointwise_geom(), true, rng),
          pw2_(4 * channels, channels, pointwise_geom(), true, rng) {
        ln_gamma = Param({channels});
        ln_beta = Param({channels});
        init_const(ln_gamma, 1.0);
    }

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        input_ = x;
        Tensor t = dw_.forward(x, ctx);
        t = layernorm_forward(t);
        t = pw1_.forward(t, ctx);
        preact_ = t;
        double* p = t.data();
        for (index_t i = 0, n = t.numel(); i < n; ++i) p[i] = gelu(p[i]);
        t = pw2_.forward(t, ctx);
        t.add_(x);
        return t;
    }
    Tensor backward(const Tensor& gout) {
        Tensor g = pw2_.backward(gout);
        const double* pre = preact_.data();
        double* p = g.data();
        for (index_t i = 0, n = g.numel(); i < n; ++i) p[i] *= gelu_grad(pre[i]);
        g = pw1_.backward(g);
        g = layernorm_backward(g);
        g = dw_.backward(g);
        g.add_(gout);  // residual
        return g;
    }
    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        dw_.collect_params(join_path(prefix, "dwconv"), out);
        register_param(ln_gamma, prefix, "ln.gamma", out);
        register_param(ln_beta, prefix, "ln.beta", out);
        pw1_.collect_params(join_path(prefix, "pw1"), out);
        pw2_.collect_params(join_path(prefix, "pw2"), out);
    }

    Param ln_gamma, ln_beta;

private:
    Tensor layernorm_forward(const Tensor& x) {
        const index_t B = x.b(), C = x.c(), sp = x.spatial();
        ln_xhat_ = Tensor::zeros_like(x);
        ln_invstd_.assign(static_cast<size_t>(B * sp), 0.0);
        Tensor out = Tensor::zeros_like(x);
        for (index_t b = 0; b < B; ++b)
            for (index_t v = 0; v < sp; ++v) {
                double s = 0.0, s2 = 0.0;
                for (index_t c = 0; c < C; ++c) {
                    const double xv = x[x.offset(b, c, 0, 0, 0) + v];
                    s += xv;
                    s2 += xv * xv;
                }
                const double mean = s / static_cast<double>(C);
                double var = s2 / static_cast<double>(C) - mean * mean;
                if (var < 0.0) var = 0.0;
                const double is = 1.0 / std::sqrt(var + 1e-6);
                ln_invstd_[static_cast<size_t>(b * sp + v)] = is;
                for (index_t c = 0; c < C; ++c) {
                    const index_t off = x.offset(b, c, 0, 0, 0) + v;
                    const double xh = (x[off] - mean) * is;
                    ln_xhat_[off] = xh;
                    out[off] = ln_gamma.w[static_cast<size_t>(c)] * xh + ln_beta.w[static_cast<size_t>(c)];
                }
            }
        return out;
    }
    Tensor layernorm_backward(const Tensor& gout) {
        const index_t B = gout.b(), C = gout.c(), sp = gout.spatial();
        Tensor gin = Tensor::zeros_like(gout);
        for (index_t b = 0; b < B; ++b)
            for (index_t v = 0; v < sp; ++v) {
                double sg = 0.0, sgx = 0.0;
                for (index_t c = 0; c < C; ++c) {
                    const index_t off = gout.offset(b, c, 0, 0, 0) + v;
                    const double gg = gout[off] * ln_gamma.w[static_cast<size_t>(c)];
                    sg += gg;
                    sgx += gg * ln_xhat_[off];
                    ln_gamma.g[static_cast<size_t>(c)] += gout[off] * ln_xhat_[off];
                    ln_beta.g[static_cast<size_t>(c)] += gout[off];
                }
                const double is = ln_invstd_[static_cast<size_t>(b * sp + v)];
                for (index_t c = 0; c < C; ++c) {
                    const index_t off = gout.offset(b, c, 0, 0, 0) + v;
                    const double gg = gout[off] * ln_gamma.w[static_cast<size_t>(c)];
                    gin[off] = is * (gg - sg / static_cast<double>(C) -
                                     ln_xhat_[off] * sgx / static_cast<double>(C));
                }
            }
        ln_gamma.grad_touched = ln_beta.grad_touched = true;
        return gin;
    }

    index_t c_;
    Conv3d dw_, pw1_, pw2_;
    Tensor input_, preact_, ln_xhat_;
    std::vector<double> ln_invstd_;
};

// =====================================================================
// Stochastic depth (residual branch drop with inverse-probability rescale)
// =====================================================================

class StochasticDepth {
public:
    explicit StochasticDepth(double rate) : rate_(rate) {
        if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("StochasticDepth: rate must be in [0,1]");
    }

    Tensor forward(const Tensor& x, const Tensor& branch, const RunCtx& ctx) {
        if (ctx.training) {
            if (!ctx.rng) throw std::logic_error("StochasticDepth: training forward requires an rng");
            if (ctx.rng->uniform() < rate_) {
                kept_ = false;
                scale_ = 0.0;
                return x;
            }
            kept_ = true;
            scale_ = 1.0 / (1.0 - rate_);
        } else {
            kept_ = true;
            scale_ = 1.0;
        }
        Tensor out = x;
        out.axpy_(scale_, branch);
        return out;
    }

    /// Returns (grad x, grad branch).
    std::pair<Tensor, Tensor> backward(const Tensor& gout) const {
        Tensor gb = Tensor::zeros_like(gout);
        if (kept_) {
            gb = gout;
            gb.scale_(scale_);
        }
        return {gout, std::move(gb)};
    }

    bool branch_kept() const { return kept_; }

private:
    double rate_;
    bool kept_ = true;
    double scale_ = 1.0;
};

// =====================================================================
// Gated axial attention: sequential per-axis MHSA with relative position
// bias, per-head sigmoid gates, and residual adds
// =====================================================================

class GatedAxialLayer : public Module {
public:
    GatedAxialLayer(index_t channels, index_t heads, Rng& rng, index_t max_len = 64,
                    double gate_bias_init = -4.0)
        : c_(channels), heads_(heads), max_len_(max_len) {
        if (channels % heads != 0)
            throw std::invalid_argument("GatedAxialLayer: channels not divisible by head count");
        for (int p = 0; p < 3; ++p) {
            passes_.push_back(std::make_unique<Pass>(channels, heads, max_len, gate_bias_init, rng));
        }
    }

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        Tensor t = passes_[0]->forward(x, 2, ctx);  // D axis
        t = passes_[1]->forward(t, 3, ctx);         // H axis
        return passes_[2]->forward(t, 4, ctx);      // W axis
    }
    Tensor backward(const Tensor& gout) {
        Tensor g = passes_[2]->backward(gout);
        g = passes_[1]->backward(g);
        return passes_[0]->backward(g);
    }
    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        static const char* names[3] = {"axis_d", "axis_h", "axis_w"};
        for (int p = 0; p < 3; ++p) passes_[p]->collect_params(join_path(prefix, names[p]), out);
    }

private:
    struct Pass : public Module {
        index_t c, heads, dh, max_len;
        Conv3d wq, wk, wv, wo;
        Param gates, relbias;
        // saved state
        Tensor x_in, q, k, v, gated;
        std::vector<double> att;  // rows x heads x L x L
        int axis = 4;

        Pass(index_t c_, index_t heads_, index_t max_len_, double gate_bias, Rng& rng)
            : c(c_),
              heads(heads_),
              dh(c_ / heads_),
              max_len(max_len_),
              wq(c_, c_, pointwise_geom(), true, rng),
              wk(c_, c_, pointwise_geom(), true, rng),
              wv(c_, c_, pointwise_geom(), true, rng),
              wo(c_, c_, pointwise_geom(), true, rng) {
            gates = Param({heads_});
            init_const(gates, gate_bias);
            relbias = Param({heads_, 2 * max_len_ - 1});
            // Output projection starts near zero so the gated layer opens
            // from an identity map.
            init_normal(wo.weight, 1e-3, rng);
            std::fill(wo.bias.w.begin(), wo.bias.w.end(), 0.0);
        }

        index_t axis_len(const Tensor& t) const { return t.shape()[static_cast<size_t>(axis)]; }

        // Enumerate (base offset, stride) for every 1D line along `axis`.
        void lines(const Tensor& t, std::vector<index_t>& base, index_t& stride) const {
            const index_t D = t.d(), H = t.h(), W = t.w();
            base.clear();
            if (axis == 2) {
                stride = H * W;
                for (index_t y = 0; y < H; ++y)
                    for (index_t x = 0; x < W; ++x) base.push_back(y * W + x);
            } else if (axis == 3) {
                stride = W;
                for (index_t z = 0; z < D; ++z)
                    for (index_t x = 0; x < W; ++x) base.push_back(z * H * W + x);
            } else {
                stride = 1;
                for (index_t z = 0; z < D; ++z)
                    for (index_t y = 0; y < H; ++y) base.push_back((z * H + y) * W);
            }
        }

        Tensor forward(const Tensor& x, int ax, const RunCtx& ctx) {
            axis = ax;
            x_in = x;
            q = wq.forward(x, ctx);
            k = wk.forward(x, ctx);
            v = wv.forward(x, ctx);
            const index_t L = axis_len(x), B = x.b();
            std::vector<index_t> base;
            index_t stride = 1;
            lines(x, base, stride);
            const index_t nrows = static_cast<index_t>(base.size());
            att.assign(static_cast<size_t>(B * nrows * heads * L * L), 0.0);
            Tensor o = Tensor::zeros_like(x);
            const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<double> logits(static_cast<size_t>(L));
            for (index_t b = 0; b < B; ++b)
                for (index_t r = 0; r < nrows; ++r) {
                    const index_t spoff = base[static_cast<size_t>(r)];
                    for (index_t h = 0; h < heads; ++h) {
                        double* arow = att.data() + (((b * nrows + r) * heads + h) * L) * L;
                        for (index_t i = 0; i < L; ++i) {
                            double mx = -1e308;
                            for (index_t j = 0; j < L; ++j) {
                                double dot = 0.0;
                                for (index_t d = 0; d < dh; ++d) {
                                    const index_t ch = h * dh + d;
                                    dot += q[q.offset(b, ch, 0, 0, 0) + spoff + i * stride] *
                                           k[k.offset(b, ch, 0, 0, 0) + spoff + j * stride];
                                }
                                const index_t rel = std::clamp(j - i, -(max_len - 1), max_len - 1);
                                logits[static_cast<size_t>(j)] =
                                    dot * inv_sqrt_dh +
                                    relbias.w[static_cast<size_t>(h * (2 * max_len - 1) + rel + max_len - 1)];
                                mx = std::max(mx, logits[static_cast<size_t>(j)]);
                            }
                            double den = 0.0;
                            for (index_t j = 0; j < L; ++j) {
                                const double e = std::exp(logits[static_cast<size_t>(j)] - mx);
                                arow[i * L + j] = e;
                                den += e;
                            }
                            for (index_t j = 0; j < L; ++j) arow[i * L + j] /= den;
                            for (index_t d = 0; d < dh; ++d) {
                                const index_t ch = h * dh + d;
                                double acc = 0.0;
                                for (index_t j = 0; j < L; ++j)
                                    acc += arow[i * L + j] * v[v.offset(b, ch, 0, 0, 0) + spoff + j * stride];
                                o[o.offset(b, ch, 0, 0, 0) + spoff + i * stride] = acc;
                            }
                        }
                    }
                }
            // per-head sigmoid gates, then output projection, then residual
            gated = o;
            for (index_t b = 0; b < B; ++b)
                for (index_t h = 0; h < heads; ++h) {
                    const double s = 1.0 / (1.0 + std::exp(-gates.w[static_cast<size_t>(h)]));
                    for (index_t d = 0; d < dh; ++d) {
                        double* p = gated.data() + gated.offset(b, h * dh + d, 0, 0, 0);
                        for (index_t vv = 0, n = gated.spatial(); vv < n; ++vv) p[vv] *= s;
                    }
                }
            Tensor y = wo.forward(gated, ctx);
            y.add_(x);
            return y;
        }

        Tensor backward(const Tensor& gout) {
            const index_t L = axis_len(x_in), B = x_in.b();
            Tensor g_gated = wo.backward(gout);
            // gate grads and ungated attention-output grad
            Tensor g_o = g_gated;
            for (index_t b = 0; b < B; ++b)
                for (index_t h = 0; h < heads; ++h) {
                    const double s = 1.0 / (1.0 + std::exp(-gates.w[static_cast<size_t>(h)]));
                    double gacc = 0.0;
                    for (index_t d = 0; d < dh; ++d) {
                        const index_t ch = h * dh + d;
                        double* gp = g_o.data() + g_o.offset(b, ch, 0, 0, 0);
                        const double* gtd = gated.data() + gated.offset(b, ch, 0, 0, 0);
                        for (index_t vv = 0, n = g_o.spatial(); vv < n; ++vv) {
                            // gated = s * o  =>  o = gated / s
                            gacc += gp[vv] * (gtd[vv] / s);
                            gp[vv] *= s;
                        }
                    }
                    gates.g[static_cast<size_t>(h)] += gacc * s * (1.0 - s);
                }
            gates.grad_touched = true;

            Tensor gq = Tensor::zeros_like(q), gk = Tensor::zeros_like(k), gv = Tensor::zeros_like(v);
            std::vector<index_t> base;
            index_t stride = 1;
            lines(x_in, base, stride);
            const index_t nrows = static_cast<index_t>(base.size());
            const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
            std::vector<double> gatt(static_cast<size_t>(L)), glog(static_cast<size_t>(L));
            for (index_t b = 0; b < B; ++b)
                for (index_t r = 0; r < nrows; ++r) {
                    const index_t spoff = base[static_cast<size_t>(r)];
                    for (index_t h = 0; h < heads; ++h) {
                        const double* arow = att.data() + (((b * nrows + r) * heads + h) * L) * L;
                        for (index_t i = 0; i < L; ++i) {
                            double dotsum = 0.0;
                            for (index_t j = 0; j < L; ++j) {
                                double ga = 0.0;
                                for (index_t d = 0; d < dh; ++d) {
                                    const index_t ch = h * dh + d;
                                    const double go = g_o[g_o.offset(b, ch, 0, 0, 0) + spoff + i * stride];
                                    ga += go * v[v.offset(b, ch, 0, 0, 0) + spoff + j * stride];
                                    gv[gv.offset(b, ch, 0, 0, 0) + spoff + j * stride] +=
                                        arow[i * L + j] * go;
                                }
                                gatt[static_cast<size_t>(j)] = ga;
                                dotsum += arow[i * L + j] * ga;
                            }
                            for (index_t j = 0; j < L; ++j) {
                                const double gl = arow[i * L + j] * (gatt[static_cast<size_t>(j)] - dotsum);
                                glog[static_cast<size_t>(j)] = gl;
                                const index_t rel = std::clamp(j - i, -(max_len - 1), max_len - 1);
                                relbias.g[static_cast<size_t>(h * (2 * max_len - 1) + rel + max_len - 1)] += gl;
                            }
                            for (index_t d = 0; d < dh; ++d) {
                                const index_t ch = h * dh + d;
                                const index_t qoff = q.offset(b, ch, 0, 0, 0) + spoff;
                                double gqacc = 0.0;
                                for (index_t j = 0; j < L; ++j) {
                                    const double gl = glog[static_cast<size_t>(j)] * inv_sqrt_dh;
                                    gqacc += gl * k[k.offset(b, ch, 0, 0, 0) + spoff + j * stride];
                                    gk[gk.offset(b, ch, 0, 0, 0) + spoff + j * stride] +=
                                        gl * q[qoff + i * stride];
                                }
                                gq[qoff + i * stride] += gqacc;
                            }
                        }
                    }
                }
            relbias.grad_touched = true;
            Tensor gx = gout;  // residual
            gx.add_(wq.backward(gq));
            gx.add_(wk.backward(gk));
            gx.add_(wv.backward(gv));
            return gx;
        }

        void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
            wq.collect_params(join_path(prefix, "wq"), out);
            wk.collect_params(join_path(prefix, "wk"), out);
            wv.collect_params(join_path(prefix, "wv"), out);
            wo.collect_params(join_path(prefix, "wo"), out);
            register_param(gates, prefix, "gates", out);
            register_param(relbias, prefix, "relbias", out);
        }
    };

    index_t c_, heads_, max_len_;
    std::vector<std::unique_ptr<Pass>> passes_;
};

/// Depthwise 3x3x3 convolution (groups == channels).
inline Conv3d make_depthwise3(index_t channels, Rng& rng) {
    return Conv3d(channels, channels, ops::Conv3dGeom{3, 3, 3, 1, 1, 1, channels}, true, rng);
}

}  // namespace neurovasc
