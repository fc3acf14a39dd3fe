#include "probekit/lora.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "probekit/nn.hpp"

namespace probekit::lora {

bool LoraParams::has_target(const std::string& name) const {
    return std::find(targets.begin(), targets.end(), name) != targets.end();
}

LoraParams attach_lora(diffusion::DenoiserNet& net, int rank, const std::vector<std::string>& targets,
                       uint64_t seed) {
    LoraParams lp;
    lp.rank = rank;
    lp.alpha = static_cast<double>(rank);  // unit scaling: alpha/r = 1
    lp.targets = targets;
    Rng rng = Rng::seeded(derive_seed(seed, "lora-init"));
    for (const auto& target : targets) {
        if (!net.params().has(target)) throw ContractError("attach_lora: unknown target " + target);
        const Tensor& w = net.params().get(target);
        if (w.rank() != 2) throw ContractError("attach_lora: target is not a matrix: " + target);
        const int64_t out = w.dim(0), in = w.dim(1);
        if (rank < 1 || rank > std::min(out, in)) throw ContractError("attach_lora: rank too large for " + target);
        Tensor a({rank, in}, w.dtype());
        const double std = 1.0 / std::sqrt(static_cast<double>(rank));
        for (int64_t i = 0; i < a.numel(); ++i) a.set1(i, std * rng.normal());
        lp.params.add(lp.a_name(target), std::move(a));
        lp.params.add(lp.b_name(target), Tensor::zeros({out, rank}, w.dtype()));
    }
    net.params().freeze_all();
    return lp;
}

ad::Var effective_weight(const ad::Var& base, const LoraParams& lp, const std::string& target) {
    ad::Var a = nn::param(lp.params, lp.a_name(target));
    ad::Var b = nn::param(lp.params, lp.b_name(target));
    const Tensor& w = base.value();
    if (a.value().dim(1) != w.dim(1) || b.value().dim(0) != w.dim(0))
        throw ShapeError("effective_weight: delta/base shape mismatch for " + target);
    ad::Var delta = ad::matmul(b, a);
    return ad::add(base, ad::scale(delta, lp.alpha / lp.rank));
}

void LoraParams::save(const std::string& path) const {
    params.save(path);
    nlohmann::json meta;
    meta["rank"] = rank;
    meta["alpha"] = alpha;
    meta["targets"] = targets;
    std::ofstream os(path + ".json");
    if (!os) throw IoError("cannot write manifest: " + path + ".json");
    os << meta.dump(2) << "\n";
}

LoraParams LoraParams::load(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw IoError("missing manifest: " + path + ".json");
    nlohmann::json meta = nlohmann::json::parse(is);
    LoraParams lp;
    lp.rank = meta.at("rank").get<int>();
    lp.alpha = meta.at("alpha").get<double>();
    lp.targets = meta.at("targets").get<std::vector<std::string>>();
    lp.params = ParamStore::load(path);
    return lp;
}

}  // namespace probekit::lora
