#pragma once

#include <string>
#include <vector>

#include "probekit/autodiff.hpp"
#include "probekit/diffusion.hpp"
#include "probekit/tensor.hpp"

namespace probekit::lora {

// Low-rank deltas W_eff = W + (alpha/r) B A with A [r, in] Gaussian(0, 1/r)
// and B [out, r] zero-initialized, stored as "lora/{target}/A" and ".../B".
struct LoraParams {
    int rank = 0;
    double alpha = 0;
    std::vector<std::string> targets;
    ParamStore params;

    bool has_target(const std::string& name) const;
    std::string a_name(const std::string& target) const { return "lora/" + target + "/A"; }
    std::string b_name(const std::string& target) const { return "lora/" + target + "/B"; }

    void save(const std::string& path) const;
    static LoraParams load(const std::string& path);
};

// Freezes the base parameters and returns fresh deltas for the given targets.
LoraParams attach_lora(diffusion::DenoiserNet& net, int rank, const std::vector<std::string>& targets,
                       uint64_t seed);

// W_eff as a graph node; differentiable w.r.t. A and B only.
ad::Var effective_weight(const ad::Var& base, const LoraParams& lp, const std::string& target);

}  // namespace probekit::lora
