#pragma once

#include "blocks.hpp"

namespace neurovasc {

// =====================================================================
// MSC2F bottleneck: multi-scale (ASPP) + edge (LoG) + frequency (FSA)
// tokens, fused through depthwise conv + ECA and a dual 1x1x1 residual sum
// =====================================================================

struct Msc2fConfig {
    index_t channels = 256;
    double log_sigma = 1.0;
    index_t log_size = 5;
    index_t eca_kernel = 3;
    index_t mask_d = 12, mask_h = 12, mask_w = 8;  // bottleneck spectrum of the design input
};

class Msc2f : public Module {
public:
    Msc2f(const Msc2fConfig& cfg, Rng& rng)
        : cfg_(cfg),
          aspp_(cfg.channels, rng),
          log_(LoGKernel::make(cfg.log_sigma, cfg.log_size)),
          fsa_(cfg.mask_d, cfg.mask_h, cfg.mask_w),
          dw_(3 * cfg.channels, 3 * cfg.channels, ops::Conv3dGeom{3, 3, 3, 1, 1, 1, 3 * cfg.channels},
              true, rng),
          eca_(cfg.eca_kernel, rng),
          restore_(3 * cfg.channels, cfg.channels, pointwise_geom(), true, rng),
          proj_aspp_(cfg.channels, cfg.channels, pointwise_geom(), true, rng),
          proj_refined_(cfg.channels, cfg.channels, pointwise_geom(), true, rng) {
        if (cfg.channels < 1) throw std::invalid_argument("Msc2f: channels must be >= 1");
    }

    Tensor forward(const Tensor& f_skip, const RunCtx& ctx) {
        if (f_skip.c() != cfg_.channels)
            throw std::invalid_argument("Msc2f: expected " + std::to_string(cfg_.channels) +
                                        " channels, got " + f_skip.shape_str());
        Tensor f_aspp = aspp_.forward(f_skip, ctx);
        Tensor edge = log_.forward(f_aspp, ctx);
        Tensor freq = fsa_.forward(f_aspp, ctx);
        composite_channels_ = f_skip.c() + edge.c() + freq.c();
        Tensor composite = concat_channels(concat_channels(f_skip, edge), freq);
        Tensor t = eca_.forward(dw_.forward(composite, ctx), ctx);
        Tensor refined = restore_.forward(t, ctx);
        Tensor out = proj_aspp_.forward(f_aspp, ctx);
        out.add_(proj_refined_.forward(refined, ctx));
        return out;
    }

    Tensor backward(const Tensor& gout) {
        Tensor g_aspp = proj_aspp_.backward(gout);
        Tensor g_refined = proj_refined_.backward(gout);
        Tensor g_comp = dw_.backward(eca_.backward(restore_.backward(g_refined)));
        auto [g_se, g_freq] = split_channels(g_comp, 2 * cfg_.channels, cfg_.channels);
        auto [g_skip_direct, g_edge] = split_channels(g_se, cfg_.channels, cfg_.channels);
        g_aspp.add_(log_.backward(g_edge));
        g_aspp.add_(fsa_.backward(g_freq));
        Tensor g_skip = aspp_.backward(g_aspp);
        g_skip.add_(g_skip_direct);
        return g_skip;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        aspp_.collect_params(join_path(prefix, "aspp"), out);
        fsa_.collect_params(join_path(prefix, "fsa"), out);
        dw_.collect_params(join_path(prefix, "dwconv"), out);
        eca_.collect_params(join_path(prefix, "eca"), out);
        restore_.collect_params(join_path(prefix, "restore"), out);
        proj_aspp_.collect_params(join_path(prefix, "proj_aspp"), out);
        proj_refined_.collect_params(join_path(prefix, "proj_refined"), out);
    }

    index_t composite_channels() const { return composite_channels_; }
    Fsa& fsa() { return fsa_; }
    LoGFilter& log_filter() { return log_; }

private:
    Msc2fConfig cfg_;
    Aspp aspp_;
    LoGFilter log_;
    Fsa fsa_;
    Conv3d dw_;
    Eca eca_;
    Conv3d restore_, proj_aspp_, proj_refined_;
    index_t composite_channels_ = 0;
};

// =====================================================================
// CDA2F: four parallel branches (involution / FSA / spherical / ConvNeXt),
// scaled summation fusion, stochastic depth residual, gated axial attention
// =====================================================================

struct Cda2fConfig {
    index_t channels = 128;
    bool use_involution = true;
    bool use_fsa = true;
    bool use_spherical = true;
    bool use_convnext = true;
    double fusion_scale_init = 1.0;
    double drop_path_rate = 0.1;
    index_t heads = 4;
    index_t axial_max_len = 64;
    index_t mask_d = 24, mask_h = 24, mask_w = 16;  // level-4 spectrum of the design input

    bool any_branch() const { return use_involution || use_fsa || use_spherical || use_convnext; }
};

class Cda2f : public Module {
public:
    Cda2f(const Cda2fConfig& cfg, Rng& rng) : cfg_(cfg), sd_(cfg.drop_path_rate) {
        if (!cfg.any_branch()) throw std::invalid_argument("Cda2f: at least one branch must be enabled");
        if (cfg.use_involution) invol_ = std::make_unique<Involution3d>(cfg.channels, rng);
        if (cfg.use_fsa) fsa_ = std::make_unique<Fsa>(cfg.mask_d, cfg.mask_h, cfg.mask_w);
        if (cfg.use_spherical) spherical_ = std::make_unique<SphericalConv3d>(cfg.channels, cfg.channels, rng);
        if (cfg.use_convnext) convnext_ = std::make_unique<ConvNeXt3dBlock>(cfg.channels, rng);
        axial_ = std::make_unique<GatedAxialLayer>(cfg.channels, cfg.heads, rng, cfg.axial_max_len);
        fusion_scale = Param({1});
        init_const(fusion_scale, cfg.fusion_scale_init);
    }

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        if (x.c() != cfg_.channels)
            throw std::invalid_argument("Cda2f: expected " + std::to_string(cfg_.channels) +
                                        " channels, got " + x.shape_str());
        sum_ = Tensor::zeros_like(x);
        if (invol_) sum_.add_(invol_->forward(x, ctx));
        if (fsa_) sum_.add_(fsa_->forward(x, ctx));
        if (spherical_) sum_.add_(spherical_->forward(x, ctx));
        Tensor multi_domain = sum_;
        multi_domain.scale_(fusion_scale.w[0]);
        if (convnext_) multi_domain.add_(convnext_->forward(x, ctx));
        Tensor fused = sd_.forward(x, multi_domain, ctx);
        return axial_->forward(fused, ctx);
    }

    Tensor backward(const Tensor& gout) {
        Tensor g_fused = axial_->backward(gout);
        auto [gx, g_md] = sd_.backward(g_fused);
        if (convnext_) gx.add_(convnext_->backward(g_md));
        double gs = 0.0;
        const double* a = g_md.data();
        const double* b = sum_.data();
        for (index_t i = 0, n = g_md.numel(); i < n; ++i) gs += a[i] * b[i];
        fusion_scale.g[0] += gs;
        fusion_scale.grad_touched = true;
        Tensor g_sum = g_md;
        g_sum.scale_(fusion_scale.w[0]);
        if (invol_) gx.add_(invol_->backward(g_sum));
        if (fsa_) gx.add_(fsa_->backward(g_sum));
        if (spherical_) gx.add_(spherical_->backward(g_sum));
        return gx;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        if (invol_) invol_->collect_params(join_path(prefix, "involution"), out);
        if (fsa_) fsa_->collect_params(join_path(prefix, "fsa"), out);
        if (spherical_) spherical_->collect_params(join_path(prefix, "spherical"), out);
        if (convnext_) convnext_->collect_params(join_path(prefix, "convnext"), out);
        axial_->collect_params(join_path(prefix, "axial"), out);
        register_param(fusion_scale, prefix, "fusion_scale", out);
    }

    bool branch_kept() const { return sd_.branch_kept(); }
    Involution3d* involution() { return invol_.get(); }
    Fsa* fsa() { return fsa_.get(); }
    SphericalConv3d* spherical() { return spherical_.get(); }
    ConvNeXt3dBlock* convnext() { return convnext_.get(); }
    GatedAxialLayer& axial() { return *axial_; }

    Param fusion_scale;

private:
    Cda2fConfig cfg_;
    std::unique_ptr<Involution3d> invol_;
    std::unique_ptr<Fsa> fsa_;
    std::unique_ptr<SphericalConv3d> spherical_;
    std::unique_ptr<ConvNeXt3dBlock> convnext_;
    std::unique_ptr<GatedAxialLayer> axial_;
    StochasticDepth sd_;
    Tensor sum_;
};

}  // namespace neurovasc
