#pragma once

#include "fusion.hpp"

namespace neurovasc {

// =====================================================================
// Model configuration (complete, serializable description of one network)
// =====================================================================

struct ModelConfig {
    std::array<index_t, 5> channels{16, 32, 64, 128, 256};
    index_t num_classes = 3;
    index_t input_channels = 1;
    double dropout_rate = 0.2;
    bool use_msc2f = true;
    bool use_cda2f = true;
    bool use_attention_gates = true;
    std::array<index_t, 3> design_input_shape{192, 192, 128};  // (D,H,W); sizes the FSA masks
    index_t dilation = 2;
    double drop_path_rate = 0.1;
    index_t eca_kernel = 3;
    index_t heads = 4;
    index_t axial_max_len = 64;
    double log_sigma = 1.0;
    index_t log_size = 5;

    void validate() const {
        for (int i = 1; i < 5; ++i)
            if (channels[static_cast<size_t>(i)] <= channels[static_cast<size_t>(i - 1)])
                throw std::invalid_argument("ModelConfig: channels must be strictly increasing");
        if (channels[0] < 1) throw std::invalid_argument("ModelConfig: channels must be >= 1");
        if (num_classes < 2) throw std::invalid_argument("ModelConfig: num_classes must be >= 2");
        if (input_channels < 1) throw std::invalid_argument("ModelConfig: input_channels must be >= 1");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw std::invalid_argument("ModelConfig: dropout_rate must be in [0,1)");
        for (int a = 0; a < 3; ++a)
            if (design_input_shape[static_cast<size_t>(a)] % 16 != 0 ||
                design_input_shape[static_cast<size_t>(a)] < 16)
                throw std::invalid_argument("ModelConfig: design_input_shape must be divisible by 16");
        if (channels[3] % heads != 0)
            throw std::invalid_argument("ModelConfig: level-4 channels must be divisible by heads");
    }

    Msc2fConfig msc2f_config() const {
        Msc2fConfig c;
        c.channels = channels[4];
        c.log_sigma = log_sigma;
        c.log_size = log_size;
        c.eca_kernel = eca_kernel;
        c.mask_d = design_input_shape[0] / 16;
        c.mask_h = design_input_shape[1] / 16;
        c.mask_w = design_input_shape[2] / 16;
        return c;
    }
    Cda2fConfig cda2f_config() const {
        Cda2fConfig c;
        c.channels = channels[3];
        c.drop_path_rate = drop_path_rate;
        c.heads = heads;
        c.axial_max_len = axial_max_len;
        c.mask_d = design_input_shape[0] / 8;
        c.mask_h = design_input_shape[1] / 8;
        c.mask_w = design_input_shape[2] / 8;
        return c;
    }
};

struct NetworkSummary {
    index_t parameter_count = 0;
    std::vector<std::pair<std::string, index_t>> breakdown;
    std::string io_contract;

    index_t breakdown_sum() const {
        index_t s = 0;
        for (const auto& [k, v] : breakdown) s += v;
        return s;
    }
    bool has_component(const std::string& name) const {
        for (const auto& [k, v] : breakdown)
            if (k == name) return true;
        return false;
    }
};

// =====================================================================
// NeuroVascU-Net: 5-level dilated U-Net with attention-gated skips,
// CDA2F at level 4 (encoder + decoder) and MSC2F at the bottleneck
// =====================================================================

class NeuroVascUNet : public Module {
public:
    NeuroVascUNet(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const auto& ch = cfg.channels;
        const index_t dil = cfg.dilation;
        enc_[0] = std::make_unique<DilatedConvBlock>(cfg.input_channels, ch[0], rng, dil, dil, dil);
        enc_[1] = std::make_unique<DilatedConvBlock>(ch[0], ch[1], rng, dil, dil, dil);
        enc_[2] = std::make_unique<DilatedConvBlock>(ch[1], ch[2], rng, dil, dil, dil);
        enc_[3] = std::make_unique<DilatedConvBlock>(ch[2], ch[3], rng, dil, dil, dil);
        if (cfg.use_cda2f) {
            cda2f_enc_ = std::make_unique<Cda2f>(cfg.cda2f_config(), rng);
            cda2f_dec_ = std::make_unique<Cda2f>(cfg.cda2f_config(), rng);
        }
        bottleneck_ = std::make_unique<DilatedConvBlock>(ch[3], ch[4], rng, dil, dil, dil);
        if (cfg.use_msc2f) msc2f_ = std::make_unique<Msc2f>(cfg.msc2f_config(), rng);
        for (int l = 0; l < 4; ++l) {
            const index_t deeper = (l == 3) ? ch[4] : ch[static_cast<size_t>(l + 1)];
            up_[l] = std::make_unique<ConvTranspose3d>(deeper, ch[static_cast<size_t>(l)], rng);
            if (cfg.use_attention_gates)
                gate_[l] = std::make_unique<AttentionGate>(ch[static_cast<size_t>(l)], deeper, rng);
            dec_[l] = std::make_unique<DilatedConvBlock>(2 * ch[static_cast<size_t>(l)],
                                                         ch[static_cast<size_t>(l)], rng, dil, dil, dil);
        }
        head_ = std::make_unique<Conv3d>(ch[0], cfg.num_classes, pointwise_geom(), true, rng);
        for (int i = 0; i < 9; ++i) drops_.push_back(std::make_unique<Dropout>(cfg.dropout_rate));
    }

    const ModelConfig& config() const { return cfg_; }

    Tensor forward(const Tensor& x, const RunCtx& ctx) {
        if (x.c() != cfg_.input_channels)
            throw std::invalid_argument("forward: expected " + std::to_string(cfg_.input_channels) +
                                        " input channels, got " + x.shape_str());
        static const char* axis_names = "DHW";
        for (int a = 0; a < 3; ++a) {
            const index_t n = x.shape()[static_cast<size_t>(a + 2)];
            if (n % 16 != 0)
                throw std::invalid_argument(std::string("forward: spatial axis ") + axis_names[a] + "=" +
                                            std::to_string(n) + " is not divisible by 16");
        }
        // encoder
        Tensor t = x;
        for (int l = 0; l < 4; ++l) {
            t = enc_[l]->forward(t, ctx);
            if (l == 3 && cda2f_enc_) t = cda2f_enc_->forward(t, ctx);
            t = drops_[static_cast<size_t>(l)]->forward(t, ctx);
            skip_[l] = t;
            t = pool_[l].forward(t, ctx);
        }
        // bottleneck
        t = bottleneck_->forward(t, ctx);
        if (msc2f_) t = msc2f_->forward(t, ctx);
        t = drops_[4]->forward(t, ctx);
        // decoder (deep to shallow)
        for (int l = 3; l >= 0; --l) {
            Tensor up = up_[l]->forward(t, ctx);
            Tensor s = gate_[l] ? gate_[l]->forward(skip_[l], t, ctx) : skip_[l];
            t = dec_[l]->forward(concat_channels(s, up), ctx);
            if (l == 3 && cda2f_dec_) t = cda2f_dec_->forward(t, ctx);
            t = drops_[static_cast<size_t>(5 + (3 - l))]->forward(t, ctx);
        }
        return head_->forward(t, ctx);
    }

    /// Full backward pass; returns the gradient w.r.t. the network input.
    Tensor backward(const Tensor& g_logits) {
        Tensor g = head_->backward(g_logits);
        std::array<Tensor, 4> g_skip;
        // decoder, shallow to deep
        for (int l = 0; l < 4; ++l) {
            g = drops_[static_cast<size_t>(5 + (3 - l))]->backward(g);
            if (l == 3 && cda2f_dec_) g = cda2f_dec_->backward(g);
            Tensor g_cat = dec_[l]->backward(g);
            const index_t cl = cfg_.channels[static_cast<size_t>(l)];
            auto [g_s, g_up] = split_channels(g_cat, cl, cl);
            g = up_[l]->backward(g_up);  // gradient into the deeper decoder state
            if (gate_[l]) {
                auto [g_sk, g_gate_sig] = gate_[l]->backward(g_s);
                g_skip[static_cast<size_t>(l)] = std::move(g_sk);
                g.add_(g_gate_sig);
            } else {
                g_skip[static_cast<size_t>(l)] = std::move(g_s);
            }
        }
        // bottleneck
        g = drops_[4]->backward(g);
        if (msc2f_) g = msc2f_->backward(g);
        g = bottleneck_->backward(g);
        // encoder, deep to shallow
        for (int l = 3; l >= 0; --l) {
            Tensor g_lvl = pool_[l].backward(g);
            g_lvl.add_(g_skip[static_cast<size_t>(l)]);
            g_lvl = drops_[static_cast<size_t>(l)]->backward(g_lvl);
            if (l == 3 && cda2f_enc_) g_lvl = cda2f_enc_->backward(g_lvl);
            g = enc_[l]->backward(g_lvl);
        }
        return g;
    }

    void collect_params(const std::string& prefix, std::vector<Param*>& out) override {
        for (const auto& [name, mod] : components()) mod->collect_params(join_path(prefix, name), out);
    }

    NetworkSummary summarize() {
        NetworkSummary s;
        for (const auto& [name, mod] : components()) {
            std::vector<Param*> ps;
            mod->collect_params(name, ps);
            index_t count = 0;
            for (Param* p : ps)
                if (p->learnable) count += p->size();
            s.breakdown.emplace_back(name, count);
            s.parameter_count += count;
        }
        s.io_contract = "input (B," + std::to_string(cfg_.input_channels) +
                        ",D,H,W) with D,H,W divisible by 16 -> logits (B," +
                        std::to_string(cfg_.num_classes) + ",D,H,W)";
        return s;
    }

    Msc2f* msc2f() { return msc2f_.get(); }
    Cda2f* cda2f_encoder() { return cda2f_enc_.get(); }
    Cda2f* cda2f_decoder() { return cda2f_dec_.get(); }

private:
    std::vector<std::pair<std::string, Module*>> components() {
        std::vector<std::pair<std::string, Module*>> c;
        static const char* enc_names[4] = {"encoder.level1", "encoder.level2", "encoder.level3",
                                           "encoder.level4.block"};
        static const char* dec_names[4] = {"decoder.level1", "decoder.level2", "decoder.level3",
                                           "decoder.level4.block"};
        static const char* up_names[4] = {"up.level1", "up.level2", "up.level3", "up.level4"};
        static const char* gate_names[4] = {"gate.level1", "gate.level2", "gate.level3", "gate.level4"};
        for (int l = 0; l < 4; ++l) c.emplace_back(enc_names[l], enc_[l].get());
        if (cda2f_enc_) c.emplace_back("encoder.level4.cda2f", cda2f_enc_.get());
        c.emplace_back("bottleneck.block", bottleneck_.get());
        if (msc2f_) c.emplace_back("bottleneck.msc2f", msc2f_.get());
        for (int l = 3; l >= 0; --l) {
            c.emplace_back(up_names[l], up_[l].get());
            if (gate_[l]) c.emplace_back(gate_names[l], gate_[l].get());
            c.emplace_back(dec_names[l], dec_[l].get());
        }
        if (cda2f_dec_) c.emplace_back("decoder.level4.cda2f", cda2f_dec_.get());
        c.emplace_back("head", head_.get());
        return c;
    }

    ModelConfig cfg_;
    std::array<std::unique_ptr<DilatedConvBlock>, 4> enc_;
    std::array<MaxPool3d, 4> pool_;
    std::unique_ptr<Cda2f> cda2f_enc_, cda2f_dec_;
    std::unique_ptr<DilatedConvBlock> bottleneck_;
    std::unique_ptr<Msc2f> msc2f_;
    std::array<std::unique_ptr<ConvTranspose3d>, 4> up_;
    std::array<std::unique_ptr<AttentionGate>, 4> gate_;
    std::array<std::unique_ptr<DilatedConvBlock>, 4> dec_;
    std::unique_ptr<Conv3d> head_;
    std::vector<std::unique_ptr<Dropout>> drops_;
    std::array<Tensor, 4> skip_;
};

}  // namespace neurovasc
