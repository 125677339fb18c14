#pragma once

#include "tensor.hpp"

namespace neurovasc {

// =====================================================================
// Hybrid loss: alpha * weighted cross-entropy + beta * soft Dice
// =====================================================================

struct LossConfig {
    double alpha = 2.0;
    double beta = 1.0;
    std::vector<double> class_weights;  // one positive weight per class
    double epsilon = 1e-5;

    void validate(index_t num_classes) const {
        if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("LossConfig: alpha/beta must be >= 0");
        if (epsilon <= 0.0) throw std::invalid_argument("LossConfig: epsilon must be > 0");
        if (static_cast<index_t>(class_weights.size()) != num_classes)
            throw std::invalid_argument("LossConfig: need one weight per class");
        for (double w : class_weights)
            if (w <= 0.0) throw std::invalid_argument("LossConfig: weights must be positive");
    }
};

/// Background weight 1.0, class-k weight sqrt(fraction_bg / fraction_k).
inline std::vector<double> class_weights_from_fractions(const std::vector<double>& fractions) {
    if (fractions.empty()) throw std::invalid_argument("class_weights_from_fractions: empty fractions");
    std::vector<double> w(fractions.size());
    for (double f : fractions)
        if (f <= 0.0)
            throw std::invalid_argument("class_weights_from_fractions: zero/negative class fraction");
    w[0] = 1.0;
    for (size_t k = 1; k < fractions.size(); ++k) w[k] = std::sqrt(fractions[0] / fractions[k]);
    return w;
}

constexpr double kLogFloor = 1e-12;  // clamp inside log for numerical safety

/// Softmax over the channel axis, numerically stabilized.
inline Tensor softmax_channels(const Tensor& logits) {
    const index_t B = logits.b(), C = logits.c(), sp = logits.spatial();
    Tensor p = Tensor::zeros_like(logits);
    for (index_t b = 0; b < B; ++b)
        for (index_t v = 0; v < sp; ++v) {
            double mx = -1e308;
            for (index_t c = 0; c < C; ++c) mx = std::max(mx, logits[logits.offset(b, c, 0, 0, 0) + v]);
            double den = 0.0;
            for (index_t c = 0; c < C; ++c) {
                const double e = std::exp(logits[logits.offset(b, c, 0, 0, 0) + v] - mx);
                p[p.offset(b, c, 0, 0, 0) + v] = e;
                den += e;
            }
            for (index_t c = 0; c < C; ++c) p[p.offset(b, c, 0, 0, 0) + v] /= den;
        }
    return p;
}

/// Probability volume paired with its integer ground-truth labels.
struct PredictionPair {
    Tensor probs;                   // (B,C,D,H,W), rows on the simplex
    std::vector<LabelVol> target;   // one (D,H,W) label volume per batch item

    void validate() const {
        const index_t B = probs.b(), C = probs.c();
        if (static_cast<index_t>(target.size()) != B)
            throw std::invalid_argument("PredictionPair: batch size mismatch");
        for (const LabelVol& t : target) {
            if (t.d() != probs.d() || t.h() != probs.h() || t.w() != probs.w())
                throw std::invalid_argument("PredictionPair: label shape mismatch");
            for (index_t i = 0; i < t.numel(); ++i)
                if (t[i] >= C) throw std::invalid_argument("PredictionPair: label code out of range");
        }
        const index_t sp = probs.spatial();
        for (index_t b = 0; b < B; ++b)
            for (index_t v = 0; v < sp; ++v) {
                double s = 0.0;
                for (index_t c = 0; c < C; ++c) s += probs[probs.offset(b, c, 0, 0, 0) + v];
                if (std::fabs(s - 1.0) > 1e-6)
                    throw std::invalid_argument("PredictionPair: per-voxel probabilities must sum to 1");
            }
    }
    index_t voxels() const { return probs.b() * probs.spatial(); }
};

/// Mean over voxels of -sum_i w_i y_i log(p_i), log clamped at kLogFloor.
inline double wce_loss(const PredictionPair& pair, const std::vector<double>& weights) {
    const index_t B = pair.probs.b(), sp = pair.probs.spatial();
    double acc = 0.0;
    for (index_t b = 0; b < B; ++b) {
        const LabelVol& t = pair.target[static_cast<size_t>(b)];
        for (index_t v = 0; v < sp; ++v) {
            const index_t cls = t[v];
            const double p = pair.probs[pair.probs.offset(b, cls, 0, 0, 0) + v];
            acc -= weights[static_cast<size_t>(cls)] * std::log(std::max(p, kLogFloor));
        }
    }
    return acc / static_cast<double>(B * sp);
}

/// 1 - soft DSC, DSC = (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps), averaged over
/// the non-background classes, flattened over the whole batch.
inline double dice_loss(const PredictionPair& pair, double eps = 1e-5) {
    const index_t B = pair.probs.b(), C = pair.probs.c(), sp = pair.probs.spatial();
    double mean_dsc = 0.0;
    for (index_t k = 1; k < C; ++k) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (index_t b = 0; b < B; ++b) {
            const LabelVol& t = pair.target[static_cast<size_t>(b)];
            const double* pp = pair.probs.data() + pair.probs.offset(b, k, 0, 0, 0);
            for (index_t v = 0; v < sp; ++v) {
                const double tv = (t[v] == k) ? 1.0 : 0.0;
                inter += pp[v] * tv;
                psum += pp[v];
                tsum += tv;
            }
        }
        mean_dsc += (2.0 * inter + eps) / (psum + tsum + eps);
    }
    mean_dsc /= static_cast<double>(C - 1);
    return 1.0 - mean_dsc;
}

inline double hybrid_loss(const PredictionPair& pair, const LossConfig& cfg) {
    cfg.validate(pair.probs.c());
    return cfg.alpha * wce_loss(pair, cfg.class_weights) + cfg.beta * dice_loss(pair, cfg.epsilon);
}

struct LossParts {
    double wce = 0.0;
    double dice = 0.0;
    double total = 0.0;
};

/// Hybrid loss straight from logits, with the analytic gradient w.r.t.
/// logits when requested. Matches the probability-space routes exactly.
inline LossParts hybrid_loss_logits(const Tensor& logits, const std::vector<LabelVol>& labels,
                                    const LossConfig& cfg, Tensor* grad_logits = nullptr) {
    const index_t B = logits.b(), C = logits.c(), sp = logits.spatial();
    cfg.validate(C);
    if (static_cast<index_t>(labels.size()) != B)
        throw std::invalid_argument("hybrid_loss_logits: batch size mismatch");
    Tensor p = softmax_channels(logits);
    const double n = static_cast<double>(B * sp);

    LossParts parts;
    // WCE
    for (index_t b = 0; b < B; ++b) {
        const LabelVol& t = labels[static_cast<size_t>(b)];
        for (index_t v = 0; v < sp; ++v) {
            const index_t cls = t[v];
            parts.wce -= cfg.class_weights[static_cast<size_t>(cls)] *
                         std::log(std::max(p[p.offset(b, cls, 0, 0, 0) + v], kLogFloor));
        }
    }
    parts.wce /= n;

    // Dice (per foreground class over the flattened batch)
    const index_t K = C - 1;
    std::vector<double> num(static_cast<size_t>(K)), den(static_cast<size_t>(K));
    for (index_t k = 1; k < C; ++k) {
        double inter = 0.0, psum = 0.0, tsum = 0.0;
        for (index_t b = 0; b < B; ++b) {
            const LabelVol& t = labels[static_cast<size_t>(b)];
            const double* pp = p.data() + p.offset(b, k, 0, 0, 0);
            for (index_t v = 0; v < sp; ++v) {
                const double tv = (t[v] == k) ? 1.0 : 0.0;
                inter += pp[v] * tv;
                psum += pp[v];
                tsum += tv;
            }
        }
        num[static_cast<size_t>(k - 1)] = 2.0 * inter + cfg.epsilon;
        den[static_cast<size_t>(k - 1)] = psum + tsum + cfg.epsilon;
        parts.dice += num[static_cast<size_t>(k - 1)] / den[static_cast<size_t>(k - 1)];
    }
    parts.dice = 1.0 - parts.dice / static_cast<double>(K);
    parts.total = cfg.alpha * parts.wce + cfg.beta * parts.dice;

    if (grad_logits) {
        // dL/dp, then one softmax-Jacobian application per voxel.
        Tensor gp = Tensor::zeros_like(p);
        for (index_t b = 0; b < B; ++b) {
            const LabelVol& t = labels[static_cast<size_t>(b)];
            for (index_t v = 0; v < sp; ++v) {
                const index_t cls = t[v];
                const double pv = p[p.offset(b, cls, 0, 0, 0) + v];
                if (pv > kLogFloor)
                    gp[gp.offset(b, cls, 0, 0, 0) + v] -=
                        cfg.alpha * cfg.class_weights[static_cast<size_t>(cls)] / (pv * n);
                for (index_t k = 1; k < C; ++k) {
                    const double tv = (t[v] == k) ? 1.0 : 0.0;
                    const double nk = num[static_cast<size_t>(k - 1)], dk = den[static_cast<size_t>(k - 1)];
                    // d(1 - mean_k num/den)/dp_k = -(2*t*den - num)/den^2 / K
                    gp[gp.offset(b, k, 0, 0, 0) + v] -=
                        cfg.beta * (2.0 * tv * dk - nk) / (dk * dk) / static_cast<double>(K);
                }
            }
        }
        *grad_logits = Tensor::zeros_like(logits);
        for (index_t b = 0; b < B; ++b)
            for (index_t v = 0; v < sp; ++v) {
                double dot = 0.0;
                for (index_t c = 0; c < C; ++c)
                    dot += gp[gp.offset(b, c, 0, 0, 0) + v] * p[p.offset(b, c, 0, 0, 0) + v];
                for (index_t c = 0; c < C; ++c) {
                    const index_t off = p.offset(b, c, 0, 0, 0) + v;
                    (*grad_logits)[off] = p[off] * (gp[off] - dot);
                }
            }
    }
    return parts;
}

}  // namespace neurovasc
