#pragma once

#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace neurovasc {

/// One learnable tensor (or non-learnable buffer, e.g. batch-norm running
/// stats). `name` is the canonical checkpoint path, assigned by collect_params.
struct Param {
    std::vector<index_t> shape;
    std::vector<double> w;
    std::vector<double> g;
    bool learnable = true;
    bool grad_touched = false;
    std::string name;

    Param() = default;
    explicit Param(std::vector<index_t> s, bool learn = true) : shape(std::move(s)), learnable(learn) {
        w.assign(static_cast<size_t>(size()), 0.0);
        g.assign(w.size(), 0.0);
    }
    index_t size() const {
        index_t n = 1;
        for (index_t s : shape) n *= s;
        return n;
    }
    void zero_grad() {
        std::fill(g.begin(), g.end(), 0.0);
        grad_touched = false;
    }
    double grad_max_abs() const {
        double m = 0.0;
        for (double v : g) m = std::max(m, std::fabs(v));
        return m;
    }
};

/// Per-call execution context. Blocks are pure functions of (parameters,
/// input, ctx); rng is only consulted in training mode.
struct RunCtx {
    bool training = false;
    Rng* rng = nullptr;
};

class Module {
public:
    virtual ~Module() = default;
    virtual void collect_params(const std::string& prefix, std::vector<Param*>& out) = 0;

    std::vector<Param*> params(const std::string& prefix = "net") {
        std::vector<Param*> out;
        collect_params(prefix, out);
        return out;
    }
    void zero_grad() {
        for (Param* p : params()) p->zero_grad();
    }
};

inline std::string join_path(const std::string& prefix, const std::string& local) {
    return prefix.empty() ? local : prefix + "." + local;
}
inline void register_param(Param& p, const std::string& prefix, const std::string& local,
                           std::vector<Param*>& out) {
    p.name = join_path(prefix, local);
    out.push_back(&p);
}

// ===== weight init =====

inline void init_kaiming_normal(Param& p, index_t fan_in, Rng& rng) {
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : p.w) v = rng.normal(0.0, std);
}
inline void init_xavier_uniform(Param& p, index_t fan_in, index_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : p.w) v = rng.uniform(-a, a);
}
inline void init_normal(Param& p, double std, Rng& rng) {
    for (double& v : p.w) v = rng.normal(0.0, std);
}
inline void init_const(Param& p, double v) { std::fill(p.w.begin(), p.w.end(), v); }

}  // namespace neurovasc
