#pragma once

#include <map>
#include <string>

#include "probekit/autodiff.hpp"
#include "probekit/tensor.hpp"

namespace probekit::nn {

// Graph leaf bound to a named parameter; frozen entries come out detached.
inline ad::Var param(const ParamStore& ps, const std::string& name) {
    return ad::Var(ps.get(name), !ps.is_frozen(name), name);
}

// y = x * W^T + b for row-major activations x [B,in], W [out,in], b [out]
inline ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b) {
    return ad::add(ad::matmul(x, w, false, true), b);
}

Tensor kaiming_init(int64_t fan_out, int64_t fan_in, DType dt, Rng& rng);

class SgdMomentum {
  public:
    SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
    void step(ParamStore& ps, const GradMap& grads);
    double lr() const { return lr_; }

  private:
    double lr_, momentum_;
    std::map<std::string, Tensor> velocity_;
};

class Adam {
  public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
    void step(ParamStore& ps, const GradMap& grads);

  private:
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

}  // namespace probekit::nn
