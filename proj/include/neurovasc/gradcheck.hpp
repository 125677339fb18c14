#pragma once

#include <functional>

#include "module.hpp"

namespace neurovasc {

// =====================================================================
// Central finite-difference gradient verification (double precision)
// =====================================================================

struct CheckTarget {
    double* w = nullptr;
    double* g = nullptr;
    index_t n = 0;
    std::string name;
};

inline CheckTarget target_of(Param& p) { return {p.w.data(), p.g.data(), p.size(), p.name}; }
inline CheckTarget target_of(Tensor& value, Tensor& grad, const std::string& name) {
    return {value.data(), grad.data(), value.numel(), name};
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;
    index_t checked = 0;

    bool pass(double tol) const { return checked > 0 && max_rel_err < tol; }
};

inline double grad_rel_err(double analytic, double fd) {
    return std::fabs(analytic - fd) / std::max({1e-6, std::fabs(analytic), std::fabs(fd)});
}

/// Compares analytic gradients against central differences.
/// `loss_fn` must be a deterministic function of the target values;
/// `analytic_pass` must populate all target gradient buffers.
/// `sample` > 0 checks that many randomly drawn entries per target.
inline GradCheckReport finite_diff_check(const std::function<double()>& loss_fn,
                                         const std::function<void()>& analytic_pass,
                                         std::vector<CheckTarget> targets, double h_scale = 1e-5,
                                         index_t sample = 0, Rng* rng = nullptr) {
    analytic_pass();
    std::vector<std::vector<double>> saved;
    saved.reserve(targets.size());
    for (const CheckTarget& t : targets) saved.emplace_back(t.g, t.g + t.n);

    GradCheckReport rep;
    for (size_t ti = 0; ti < targets.size(); ++ti) {
        CheckTarget& t = targets[ti];
        std::vector<index_t> idx;
        if (sample > 0 && sample < t.n) {
            if (!rng) throw std::logic_error("finite_diff_check: sampling requires an rng");
            for (index_t s = 0; s < sample; ++s) idx.push_back(rng->uniform_int(0, t.n - 1));
        } else {
            idx.resize(static_cast<size_t>(t.n));
            for (index_t i = 0; i < t.n; ++i) idx[static_cast<size_t>(i)] = i;
        }
        for (index_t i : idx) {
            const double orig = t.w[i];
            const double h = h_scale * std::max(1.0, std::fabs(orig));
            t.w[i] = orig + h;
            const double lp = loss_fn();
            t.w[i] = orig - h;
            const double lm = loss_fn();
            t.w[i] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double re = grad_rel_err(saved[ti][static_cast<size_t>(i)], fd);
            ++rep.checked;
            if (re > rep.max_rel_err) {
                rep.max_rel_err = re;
                rep.worst = t.name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

/// Fixed pseudo-random projection so that any tensor output reduces to a
/// scalar "loss" with a dense, well-scaled gradient.
inline Tensor make_projection(const std::array<index_t, 5>& shape, std::uint64_t seed) {
    Rng rng(seed);
    Tensor p(shape[0], shape[1], shape[2], shape[3], shape[4]);
    for (index_t i = 0; i < p.numel(); ++i) p[i] = rng.uniform(-1.0, 1.0);
    return p;
}

inline double project(const Tensor& out, const Tensor& proj) {
    double acc = 0.0;
    const double* a = out.data();
    const double* b = proj.data();
    for (index_t i = 0, n = out.numel(); i < n; ++i) acc += a[i] * b[i];
    return acc;
}

inline Tensor random_tensor(index_t b, index_t c, index_t d, index_t h, index_t w, Rng& rng,
                            double lo = -1.0, double hi = 1.0) {
    Tensor t(b, c, d, h, w);
    for (index_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace neurovasc
