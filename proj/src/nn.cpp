#include "probekit/nn.hpp"

#include <cmath>

namespace probekit::nn {

Tensor kaiming_init(int64_t fan_out, int64_t fan_in, DType dt, Rng& rng) {
    Tensor t({fan_out, fan_in}, dt);
    const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    if (dt == DType::F32) {
        auto* p = t.mut<float>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<float>(rng.normal() * std);
    } else {
        auto* p = t.mut<double>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal() * std;
    }
    return t;
}

namespace {

template <typename T>
void sgd_update(T* p, T* v, const T* g, int64_t n, T lr, T mu) {
    for (int64_t i = 0; i < n; ++i) {
        v[i] = mu * v[i] + g[i];
        p[i] -= lr * v[i];
    }
}

template <typename T>
void adam_update(T* p, T* m, T* v, const T* g, int64_t n, T lr, T b1, T b2, T eps, T bc1, T bc2) {
    for (int64_t i = 0; i < n; ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mh = m[i] / bc1;
        const T vh = v[i] / bc2;
        p[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

}  // namespace

void SgdMomentum::step(ParamStore& ps, const GradMap& grads) {
    for (const auto& [name, g] : grads.entries()) {
        if (!ps.has(name) || ps.is_frozen(name)) continue;
        Tensor p = ps.get(name).clone();
        auto [it, fresh] = velocity_.try_emplace(name, Tensor::zeros(p.dims(), p.dtype()));
        if (p.dtype() == DType::F32)
            sgd_update(p.mut<float>(), it->second.mut<float>(), g.data<float>(), p.numel(),
                       static_cast<float>(lr_), static_cast<float>(momentum_));
        else
            sgd_update(p.mut<double>(), it->second.mut<double>(), g.data<double>(), p.numel(), lr_, momentum_);
        ps.set(name, std::move(p));
    }
}

void Adam::step(ParamStore& ps, const GradMap& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, g] : grads.entries()) {
        if (!ps.has(name) || ps.is_frozen(name)) continue;
        Tensor p = ps.get(name).clone();
        auto [mi, f1] = m_.try_emplace(name, Tensor::zeros(p.dims(), p.dtype()));
        auto [vi, f2] = v_.try_emplace(name, Tensor::zeros(p.dims(), p.dtype()));
        if (p.dtype() == DType::F32)
            adam_update(p.mut<float>(), mi->second.mut<float>(), vi->second.mut<float>(), g.data<float>(),
                        p.numel(), static_cast<float>(lr_), static_cast<float>(beta1_),
                        static_cast<float>(beta2_), static_cast<float>(eps_), static_cast<float>(bc1),
                        static_cast<float>(bc2));
        else
            adam_update(p.mut<double>(), mi->second.mut<double>(), vi->second.mut<double>(), g.data<double>(),
                        p.numel(), lr_, beta1_, beta2_, eps_, bc1, bc2);
        ps.set(name, std::move(p));
    }
}

}  // namespace probekit::nn
