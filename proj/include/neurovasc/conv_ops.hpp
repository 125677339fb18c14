#pragma once

#include <cassert>
#include <vector>

#include "tensor.hpp"

namespace neurovasc::ops {

/// Geometry of a stride-1, same-padding 3D convolution. Kernel extents must be
/// odd so that pad = (k-1)*dil/2 preserves spatial size exactly.
struct Conv3dGeom {
    index_t kd = 3, kh = 3, kw = 3;
    index_t dild = 1, dilh = 1, dilw = 1;
    index_t groups = 1;

    index_t pd() const { return (kd - 1) * dild / 2; }
    index_t ph() const { return (kh - 1) * dilh / 2; }
    index_t pw() const { return (kw - 1) * dilw / 2; }
    index_t taps() const { return kd * kh * kw; }
};

inline void pad_batch_item(const Tensor& in, index_t b, index_t pd, index_t ph, index_t pw,
                           std::vector<double>& dst) {
    const index_t C = in.c(), D = in.d(), H = in.h(), W = in.w();
    const index_t Dp = D + 2 * pd, Hp = H + 2 * ph, Wp = W + 2 * pw;
    dst.assign(static_cast<size_t>(C * Dp * Hp * Wp), 0.0);
    for (index_t c = 0; c < C; ++c) {
        for (index_t z = 0; z < D; ++z) {
            for (index_t y = 0; y < H; ++y) {
                const double* src = in.data() + in.offset(b, c, z, y, 0);
                double* d = dst.data() + ((c * Dp + z + pd) * Hp + y + ph) * Wp + pw;
                std::memcpy(d, src, static_cast<size_t>(W) * sizeof(double));
            }
        }
    }
}

/// out[b,co,z,y,x] = bias[co] + sum_{ci in group, taps} w[co,ci,kd,kh,kw] * in[...]
/// Weight layout (Cout, Cin/groups, kd, kh, kw); bias may be empty.
inline void conv3d_forward(const Tensor& in, const std::vector<double>& wgt,
                           const std::vector<double>& bias, index_t cout, const Conv3dGeom& g,
                           Tensor& out) {
    const index_t B = in.b(), Cin = in.c(), D = in.d(), H = in.h(), W = in.w();
    const index_t cin_g = Cin / g.groups, cout_g = cout / g.groups;
    assert(Cin % g.groups == 0 && cout % g.groups == 0);
    assert(static_cast<index_t>(wgt.size()) == cout * cin_g * g.taps());
    if (out.b() != B || out.c() != cout || out.d() != D || out.h() != H || out.w() != W)
        out = Tensor(B, cout, D, H, W);

    const index_t pd = g.pd(), ph = g.ph(), pw = g.pw();
    const index_t Dp = D + 2 * pd, Hp = H + 2 * ph, Wp = W + 2 * pw;
    const bool padded = (pd | ph | pw) != 0;
    std::vector<double> padbuf;

    for (index_t b = 0; b < B; ++b) {
        const double* pad = nullptr;
        if (padded) {
            pad_batch_item(in, b, pd, ph, pw, padbuf);
            pad = padbuf.data();
        } else {
            pad = in.data() + in.offset(b, 0, 0, 0, 0);
        }
        for (index_t grp = 0; grp < g.groups; ++grp) {
            for (index_t col = 0; col < cout_g; ++col) {
                const index_t co = grp * cout_g + col;
                const double bval = bias.empty() ? 0.0 : bias[static_cast<size_t>(co)];
                for (index_t z = 0; z < D; ++z) {
                    for (index_t y = 0; y < H; ++y) {
                        double* orow = out.data() + out.offset(b, co, z, y, 0);
                        for (index_t x = 0; x < W; ++x) orow[x] = bval;
                        const double* wrow = wgt.data() + co * cin_g * g.taps();
                        for (index_t cil = 0; cil < cin_g; ++cil) {
                            const index_t ci = grp * cin_g + cil;
                            for (index_t a = 0; a < g.kd; ++a) {
                                for (index_t bb = 0; bb < g.kh; ++bb) {
                                    const double* irow =
                                        pad + ((ci * Dp + z + a * g.dild) * Hp + y + bb * g.dilh) * Wp;
                                    const double* wk = wrow + ((cil * g.kd + a) * g.kh + bb) * g.kw;
                                    for (index_t cc = 0; cc < g.kw; ++cc) {
                                        const double wv = wk[cc];
                                        const double* src = irow + cc * g.dilw;
                                        for (index_t x = 0; x < W; ++x) orow[x] += wv * src[x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv3d_forward. Any of gin/gw/gbias may be null; gw and gbias
/// are accumulated into (callers zero them at step boundaries).
inline void conv3d_backward(const Tensor& in, const std::vector<double>& wgt, index_t cout,
                            const Conv3dGeom& g, const Tensor& gout, Tensor* gin,
                            std::vector<double>* gw, std::vector<double>* gbias) {
    const index_t B = in.b(), Cin = in.c(), D = in.d(), H = in.h(), W = in.w();
    const index_t cin_g = Cin / g.groups, cout_g = cout / g.groups;
    const index_t taps = g.taps();

    if (gbias) {
        for (index_t b = 0; b < B; ++b)
            for (index_t co = 0; co < cout; ++co) {
                const double* p = gout.data() + gout.offset(b, co, 0, 0, 0);
                double acc = 0.0;
                for (index_t v = 0, n = D * H * W; v < n; ++v) acc += p[v];
                (*gbias)[static_cast<size_t>(co)] += acc;
            }
    }

    if (gw) {
        const index_t pd = g.pd(), ph = g.ph(), pw = g.pw();
        const index_t Dp = D + 2 * pd, Hp = H + 2 * ph, Wp = W + 2 * pw;
        const bool padded = (pd | ph | pw) != 0;
        std::vector<double> padbuf;
        for (index_t b = 0; b < B; ++b) {
            const double* pad = nullptr;
            if (padded) {
                pad_batch_item(in, b, pd, ph, pw, padbuf);
                pad = padbuf.data();
            } else {
                pad = in.data() + in.offset(b, 0, 0, 0, 0);
            }
            for (index_t grp = 0; grp < g.groups; ++grp) {
                for (index_t col = 0; col < cout_g; ++col) {
                    const index_t co = grp * cout_g + col;
                    for (index_t cil = 0; cil < cin_g; ++cil) {
                        const index_t ci = grp * cin_g + cil;
                        double* wdst = gw->data() + (co * cin_g + cil) * taps;
                        for (index_t a = 0; a < g.kd; ++a) {
                            for (index_t bb = 0; bb < g.kh; ++bb) {
                                for (index_t cc = 0; cc < g.kw; ++cc) {
                                    double acc = 0.0;
                                    for (index_t z = 0; z < D; ++z) {
                                        for (index_t y = 0; y < H; ++y) {
                                            const double* grow = gout.data() + gout.offset(b, co, z, y, 0);
                                            const double* irow =
                                                pad + ((ci * Dp + z + a * g.dild) * Hp + y + bb * g.dilh) * Wp +
                                                cc * g.dilw;
                                            for (index_t x = 0; x < W; ++x) acc += grow[x] * irow[x];
                                        }
                                    }
                                    wdst[(a * g.kh + bb) * g.kw + cc] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    if (gin) {
        // grad wrt input = conv of gout with channel-transposed, spatially
        // flipped weights; same padding carries over because p = (k-1)*dil/2.
        std::vector<double> wt(static_cast<size_t>(Cin * cout_g * taps));
        for (index_t grp = 0; grp < g.groups; ++grp) {
            for (index_t col = 0; col < cout_g; ++col) {
                const index_t co = grp * cout_g + col;
                for (index_t cil = 0; cil < cin_g; ++cil) {
                    const index_t ci = grp * cin_g + cil;
                    const double* src = wgt.data() + (co * cin_g + cil) * taps;
                    double* dst = wt.data() + (ci * cout_g + col) * taps;
                    for (index_t a = 0; a < g.kd; ++a)
                        for (index_t bb = 0; bb < g.kh; ++bb)
                            for (index_t cc = 0; cc < g.kw; ++cc)
                                dst[(a * g.kh + bb) * g.kw + cc] =
                                    src[((g.kd - 1 - a) * g.kh + (g.kh - 1 - bb)) * g.kw + (g.kw - 1 - cc)];
                }
            }
        }
        static const std::vector<double> no_bias;
        conv3d_forward(gout, wt, no_bias, Cin, g, *gin);
    }
}

// ===== 2x2x2 max pooling =====

inline Tensor maxpool2_forward(const Tensor& in, std::vector<index_t>& argmax) {
    const index_t B = in.b(), C = in.c(), D = in.d(), H = in.h(), W = in.w();
    for (int ax = 2; ax < 5; ++ax) {
        if (in.shape()[static_cast<size_t>(ax)] % 2 != 0)
            throw std::invalid_argument("maxpool2: odd spatial dim on axis " +
                                        std::string(1, "BCDHW"[ax]) + " of " + in.shape_str());
    }
    Tensor out(B, C, D / 2, H / 2, W / 2);
    argmax.assign(static_cast<size_t>(out.numel()), 0);
    index_t o = 0;
    for (index_t b = 0; b < B; ++b)
        for (index_t c = 0; c < C; ++c)
            for (index_t z = 0; z < D / 2; ++z)
                for (index_t y = 0; y < H / 2; ++y)
                    for (index_t x = 0; x < W / 2; ++x, ++o) {
                        double best = -1e308;
                        index_t bestidx = 0;
                        for (index_t a = 0; a < 2; ++a)
                            for (index_t bb = 0; bb < 2; ++bb)
                                for (index_t cc = 0; cc < 2; ++cc) {
                                    const index_t idx = in.offset(b, c, 2 * z + a, 2 * y + bb, 2 * x + cc);
                                    const double v = in[idx];
                                    if (v > best) {
                                        best = v;
                                        bestidx = idx;
                                    }
                                }
                        out[o] = best;
                        argmax[static_cast<size_t>(o)] = bestidx;
                    }
    return out;
}

inline Tensor maxpool2_backward(const Tensor& gout, const std::vector<index_t>& argmax,
                                const std::array<index_t, 5>& in_shape) {
    Tensor gin(in_shape[0], in_shape[1], in_shape[2], in_shape[3], in_shape[4]);
    for (index_t o = 0; o < gout.numel(); ++o) gin[argmax[static_cast<size_t>(o)]] += gout[o];
    return gin;
}

// ===== stride-2 transposed conv, 2x2x2 kernel (exact 2x upsample) =====
// Weight layout (Cin, Cout, 2, 2, 2); each output voxel has exactly one tap.

inline void convtranspose2_forward(const Tensor& in, const std::vector<double>& wgt,
                                   const std::vector<double>& bias, index_t cout, Tensor& out) {
    const index_t B = in.b(), Cin = in.c(), D = in.d(), H = in.h(), W = in.w();
    out = Tensor(B, cout, 2 * D, 2 * H, 2 * W);
    for (index_t b = 0; b < B; ++b) {
        for (index_t co = 0; co < cout; ++co) {
            if (!bias.empty()) {
                double* p = out.data() + out.offset(b, co, 0, 0, 0);
                const double bv = bias[static_cast<size_t>(co)];
                for (index_t v = 0, n = 8 * D * H * W; v < n; ++v) p[v] = bv;
            }
        }
        for (index_t ci = 0; ci < Cin; ++ci) {
            for (index_t co = 0; co < cout; ++co) {
                const double* wk = wgt.data() + (ci * cout + co) * 8;
                for (index_t z = 0; z < D; ++z)
                    for (index_t y = 0; y < H; ++y) {
                        const double* irow = in.data() + in.offset(b, ci, z, y, 0);
                        for (index_t a = 0; a < 2; ++a)
                            for (index_t bb = 0; bb < 2; ++bb) {
                                double* orow = out.data() + out.offset(b, co, 2 * z + a, 2 * y + bb, 0);
                                const double w0 = wk[(a * 2 + bb) * 2 + 0], w1 = wk[(a * 2 + bb) * 2 + 1];
                                for (index_t x = 0; x < W; ++x) {
                                    orow[2 * x] += w0 * irow[x];
                                    orow[2 * x + 1] += w1 * irow[x];
                                }
                            }
                    }
            }
        }
    }
}

inline void convtranspose2_backward(const Tensor& in, const std::vector<double>& wgt, index_t cout,
                                    const Tensor& gout, Tensor* gin, std::vector<double>* gw,
                                    std::vector<double>* gbias) {
    const index_t B = in.b(), Cin = in.c(), D = in.d(), H = in.h(), W = in.w();
    if (gbias) {
        for (index_t b = 0; b < B; ++b)
            for (index_t co = 0; co < cout; ++co) {
                const double* p = gout.data() + gout.offset(b, co, 0, 0, 0);
                double acc = 0.0;
                for (index_t v = 0, n = 8 * D * H * W; v < n; ++v) acc += p[v];
                (*gbias)[static_cast<size_t>(co)] += acc;
            }
    }
    if (gin) *gin = Tensor(B, Cin, D, H, W);
    for (index_t b = 0; b < B; ++b)
        for (index_t ci = 0; ci < Cin; ++ci)
            for (index_t co = 0; co < cout; ++co) {
                const double* wk = wgt.data() + (ci * cout + co) * 8;
                double* wgdst = gw ? gw->data() + (ci * cout + co) * 8 : nullptr;
                for (index_t z = 0; z < D; ++z)
                    for (index_t y = 0; y < H; ++y) {
                        const double* irow = in.data() + in.offset(b, ci, z, y, 0);
                        double* girow = gin ? gin->data() + gin->offset(b, ci, z, y, 0) : nullptr;
                        for (index_t a = 0; a < 2; ++a)
                            for (index_t bb = 0; bb < 2; ++bb) {
                                const double* grow = gout.data() + gout.offset(b, co, 2 * z + a, 2 * y + bb, 0);
                                const double w0 = wk[(a * 2 + bb) * 2 + 0], w1 = wk[(a * 2 + bb) * 2 + 1];
                                double acc0 = 0.0, acc1 = 0.0;
                                for (index_t x = 0; x < W; ++x) {
                                    const double g0 = grow[2 * x], g1 = grow[2 * x + 1];
                                    if (girow) girow[x] += w0 * g0 + w1 * g1;
                                    acc0 += g0 * irow[x];
                                    acc1 += g1 * irow[x];
                                }
                                if (wgdst) {
                                    wgdst[(a * 2 + bb) * 2 + 0] += acc0;
                                    wgdst[(a * 2 + bb) * 2 + 1] += acc1;
                                }
                            }
                    }
            }
}

}  // namespace neurovasc::ops
