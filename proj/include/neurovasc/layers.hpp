#pragma once

#include "conv_ops.hpp"
#include "module.hpp"

namespace neurovasc {

// ===== Conv3d (stride 1, same padding, optional groups/dilation) =====

class Conv3d : public Module {
public:
    Conv3d(index_t cin, index_t cout, ops::Conv3dGeom geom, bool with_bias, Rng& rng)
        : cin_(cin), cout_(cout), geom_(geom), has_bias_(with_bias) {
        const index_t cin_g = cin / geom.groups;
        weight = Param({cout, cin_g, geom.kd, geom.kh, geom.kw});
        init_kaiming_normal(weight, cin_g * geom.taps(), rng);
        if (has_bias_) bias = Param({cout});
    }

    Tensor forward(const Tensor& x, const RunCtx&) {
        if (x.c() != cin_)
            throw std::invalid_argument("Conv3d: expected " + std::to_string(cin_) + " channels, got " +
                                        x.shape_str());
        input_ = x;
        Tensor out;
        ops::conv3d_forward(x, weight.w, has_bias_ ? bias.w : empty_, cout_, geom_, out);
        return out;
    }

    Tensor backward(const Tensor& gout) {
        Tensor gin;
        ops::conv3d_backward(input_, weight.w, cout_, geom_, gout, &gin, &weight.g,
                             has_bias_ ? &bias.g : nullptr);
        weight.grad_touched = true;
        if (has_bias_) bias.grad_touched = true;
        return gin;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        register_param(weight, prefix, "weight", out);
        if (has_bias_) register_param(bias, prefix, "bias", out);
    }

    index_t in_channels() const { return cin_; }
    index_t out_channels() const { return cout_; }

    Param weight, bias;

private:
    index_t cin_, cout_;
    ops::Conv3dGeom geom_;
    bool has_bias_;
    Tensor input_;
    std::vector<double> empty_;
};

inline ops::Conv3dGeom pointwise_geom() { return ops::Conv3dGeom{1, 1, 1, 1, 1, 1, 1}; }
inline ops::Conv3dGeom conv3_geom(index_t dild = 1, index_t dilh = 1, index_t dilw = 1, index_t groups = 1) {
    return ops::Conv3dGeom{3, 3, 3, dild, dilh, dilw, groups};
}

// ===== BatchNorm3d =====

class BatchNorm3d : public Module {
public:
    explicit BatchNorm3d(index_t channels, double eps = 1e-5, double momentum = 0.1)
        : c_(channels), eps_(eps), momentum_(momentum) {
        gamma = Param({channels});
        beta = Param({channels});
        running_mean = Param({channels}, /*learn=*/false);
        running_var = Param({channels}, /*learn=*/false);
        init_const(gamma, 1.0);
        init_const(running_var, 1.0);
    }

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        const index_t B = x.b(), C = x.c(), sp = x.spatial();
        if (C != c_) throw std::invalid_argument("BatchNorm3d: channel mismatch");
        training_ = ctx.training;
        Tensor out = Tensor::zeros_like(x);
        xhat_ = Tensor::zeros_like(x);
        invstd_.assign(static_cast<size_t>(C), 0.0);
        const index_t n = B * sp;
        for (index_t c = 0; c < C; ++c) {
            double mean, var;
            if (training_) {
                double s = 0.0, s2 = 0.0;
                for (index_t b = 0; b < B; ++b) {
                    const double* p = x.data() + x.offset(b, c, 0, 0, 0);
                    for (index_t v = 0; v < sp; ++v) {
                        s += p[v];
                        s2 += p[v] * p[v];
                    }
                }
                mean = s / static_cast<double>(n);
                var = s2 / static_cast<double>(n) - mean * mean;
                if (var < 0.0) var = 0.0;
                const double unbiased = n > 1 ? var * static_cast<double>(n) / static_cast<double>(n - 1) : var;
                running_mean.w[c] = (1.0 - momentum_) * running_mean.w[c] + momentum_ * mean;
                running_var.w[c] = (1.0 - momentum_) * running_var.w[c] + momentum_ * unbiased;
            } else {
                mean = running_mean.w[c];
                var = running_var.w[c];
            }
            const double is = 1.0 / std::sqrt(var + eps_);
            invstd_[static_cast<size_t>(c)] = is;
            const double gmul = gamma.w[c] * is, badd = beta.w[c];
            for (index_t b = 0; b < B; ++b) {
                const double* p = x.data() + x.offset(b, c, 0, 0, 0);
                double* xh = xhat_.data() + xhat_.offset(b, c, 0, 0, 0);
                double* o = out.data() + out.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) {
                    xh[v] = (p[v] - mean) * is;
                    o[v] = gmul * (p[v] - mean) + badd;
                }
            }
        }
        return out;
    }

    Tensor backward(const Tensor& gout) {
        const index_t B = gout.b(), C = gout.c(), sp = gout.spatial();
        const double n = static_cast<double>(B * sp);
        Tensor gin = Tensor::zeros_like(gout);
        for (index_t c = 0; c < C; ++c) {
            double sg = 0.0, sgx = 0.0;
            for (index_t b = 0; b < B; ++b) {
                const double* gp = gout.data() + gout.offset(b, c, 0, 0, 0);
                const double* xh = xhat_.data() + xhat_.offset(b, c, 0, 0, 0);
                for (index_t v = 0; v < sp; ++v) {
                    sg += gp[v];
                    sgx += gp[v] * xh[v];
                }
            }
            gamma.g[c] += sgx;
            beta.g[c] += sg;
            const double gs = gamma.w[c] * invstd_[static_cast<size_t>(c)];
            for (index_t b = 0; b < B; ++b) {
                const double* gp = gout.data() + gout.offset(b, c, 0, 0, 0);
                const double* xh = xhat_.data() + xhat_.offset(b, c, 0, 0, 0);
                double* gi = gin.data() + gin.offset(b, c, 0, 0, 0);
                if (training_) {
                    for (index_t v = 0; v < sp; ++v)
                        gi[v] = gs * (gp[v] - sg / n - xh[v] * sgx / n);
                } else {
                    for (index_t v = 0; v < sp; ++v) gi[v] = gs * gp[v];
                }
            }
        }
        gamma.grad_touched = beta.grad_touched = true;
        return gin;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        register_param(gamma, prefix, "gamma", out);
        register_param(beta, prefix, "beta", out);
        register_param(running_mean, prefix, "running_mean", out);
        register_param(running_var, prefix, "running_var", out);
    }

    Param gamma, beta, running_mean, running_var;

private:
    index_t c_;
    double eps_, momentum_;
    bool training_ = false;
    Tensor xhat_;
    std::vector<double> invstd_;
};

// ===== elementwise activations =====

class ReLU : public Module {
public:
    Tensor forward(const Tensor& x, const RunCtx&) {
        Tensor out = x;
        double* p = out.data();
        for (index_t i = 0, n = out.numel(); i < n; ++i)
            if (p[i] < 0.0) p[i] = 0.0;
        output_ = out;
        return out;
    }
    Tensor backward(const Tensor& gout) {
        Tensor gin = gout;
        const double* o = output_.data();
        double* p = gin.data();
        for (index_t i = 0, n = gin.numel(); i < n; ++i)
            if (o[i] <= 0.0) p[i] = 0.0;
        return gin;
    }
    void collect_params(const std::string&, std::vector<Param*>&) override {}

private:
    Tensor output_;
};

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }
inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
    const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}

// ===== element-wise inverted dropout =====

class Dropout : public Module {
public:
    explicit Dropout(double rate) : rate_(rate) {}

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        active_ = ctx.training && rate_ > 0.0;
        if (!active_) return x;
        if (!ctx.rng) throw std::logic_error("Dropout: training forward requires an rng");
        const double scale = 1.0 / (1.0 - rate_);
        mask_.assign(static_cast<size_t>(x.numel()), 0.0);
        Tensor out = x;
        double* p = out.data();
        for (index_t i = 0, n = out.numel(); i < n; ++i) {
            if (ctx.rng->uniform() >= rate_) {
                mask_[static_cast<size_t>(i)] = scale;
                p[i] *= scale;
            } else {
                p[i] = 0.0;
            }
        }
        return out;
    }
    Tensor backward(const Tensor& gout) {
        if (!active_) return gout;
        Tensor gin = gout;
        double* p = gin.data();
        for (index_t i = 0, n = gin.numel(); i < n; ++i) p[i] *= mask_[static_cast<size_t>(i)];
        return gin;
    }
    void collect_params(const std::string&, std::vector<Param*>&) override {}

private:
    double rate_;
    bool active_ = false;
    std::vector<double> mask_;
};

// ===== 2x max pooling / 2x transposed-conv upsampling =====

class MaxPool3d : public Module {
public:
    Tensor forward(const Tensor& x, const RunCtx&) {
        in_shape_ = x.shape();
        return ops::maxpool2_forward(x, argmax_);
    }
    Tensor backward(const Tensor& gout) { return ops::maxpool2_backward(gout, argmax_, in_shape_); }
    void collect_params(const std::string&, std::vector<Param*>&) override {}

private:
    std::array<index_t, 5> in_shape_{};
    std::vector<index_t> argmax_;
};

class ConvTranspose3d : public Module {
public:
    ConvTranspose3d(index_t cin, index_t cout, Rng& rng) : cin_(cin), cout_(cout) {
        weight = Param({cin, cout, 2, 2, 2});
        bias = Param({cout});
        init_kaiming_normal(weight, cin * 8, rng);
    }
    Tensor forward(const Tensor& x, const RunCtx&) {
        if (x.c() != cin_) throw std::invalid_argument("ConvTranspose3d: channel mismatch");
        input_ = x;
        Tensor out;
        ops::convtranspose2_forward(x, weight.w, bias.w, cout_, out);
        return out;
    }
    Tensor backward(const Tensor& gout) {
        Tensor gin;
        ops::convtranspose2_backward(input_, weight.w, cout_, gout, &gin, &weight.g, &bias.g);
        weight.grad_touched = bias.grad_touched = true;
        return gin;
    }
    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        register_param(weight, prefix, "weight", out);
        register_param(bias, prefix, "bias", out);
    }

    Param weight, bias;

private:
    index_t cin_, cout_;
    Tensor input_;
};

}  // namespace neurovasc
