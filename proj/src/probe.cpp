#include "probekit/probe.hpp"

#include <algorithm>
#include <cmath>

#include "probekit/kernels.hpp"
#include "probekit/nn.hpp"

namespace probekit::probe {

// --- train-step plans ---------------------------------------------------------

namespace {

TrainStepPlan build_plan(int T, int K, int t_s, StepCount convention) {
    const int stride = T / K;
    TrainStepPlan plan;
    plan.T = T;
    plan.K = K;
    plan.t_s = t_s;
    const int listed = convention == StepCount::KPlusOne ? K + 1 : K;
    for (int i = 0; i < listed; ++i) {
        const int step = t_s + i * stride;
        if (step > T) break;  // the K+1 offset list is clipped to [1, T]
        plan.steps.push_back(step);
    }
    return plan;
}

int max_start(int T, int K) {
    // the first K offsets must fit: t_s + (K-1) floor(T/K) <= T
    return T - (K - 1) * (T / K);
}

}  // namespace

TrainStepPlan make_train_steps(int T, int K, int t_s, StepCount convention) {
    if (K < 1 || K > T) throw ContractError("make_train_steps: need 1 <= K <= T");
    if (t_s < 1 || t_s > max_start(T, K))
        throw ContractError("make_train_steps: t_s places a required step outside [1, T]");
    return build_plan(T, K, t_s, convention);
}

TrainStepPlan make_train_steps(int T, int K, Rng& rng, StepCount convention) {
    if (K < 1 || K > T) throw ContractError("make_train_steps: need 1 <= K <= T");
    const int t_s = static_cast<int>(rng.uniform_int(1, max_start(T, K)));
    return build_plan(T, K, t_s, convention);
}

TrainStepPlan empty_plan(int T) {
    TrainStepPlan plan;
    plan.T = T;
    plan.K = 0;
    plan.t_s = 0;
    return plan;
}

// --- perceptual extractor ------------------------------------------------------

PerceptualExtractor PerceptualExtractor::init(int image_size, DType dt, uint64_t seed) {
    PerceptualExtractor pe;
    pe.image_size_ = image_size;
    Rng rng = Rng::seeded(derive_seed(seed, "perceptual-init"));
    auto conv_init = [&](int64_t f, int64_t c) {
        Tensor w({f, c, 3, 3}, dt);
        const double std = std::sqrt(2.0 / static_cast<double>(c * 9));
        for (int64_t i = 0; i < w.numel(); ++i) w.set1(i, std * rng.normal());
        return w;
    };
    pe.params_.add("conv1.w", conv_init(8, 1), /*frozen=*/true);
    pe.params_.add("conv2.w", conv_init(16, 8), /*frozen=*/true);
    pe.params_.add("conv3.w", conv_init(32, 16), /*frozen=*/true);
    return pe;
}

std::vector<ad::Var> PerceptualExtractor::features(const ad::Var& x) const {
    if (x.value().rank() != 4 || x.value().dim(1) != 1) throw ShapeError("perceptual: expected [N,1,H,W]");
    ad::Var h1 = ad::relu(ad::conv2d(x, nn::param(params_, "conv1.w"), 2, 1));
    ad::Var h2 = ad::relu(ad::conv2d(h1, nn::param(params_, "conv2.w"), 2, 1));
    ad::Var h3 = ad::relu(ad::conv2d(h2, nn::param(params_, "conv3.w"), 2, 1));
    return {h1, h2, h3};
}

// --- losses --------------------------------------------------------------------

namespace {

ad::Var as_image_batch(const ad::Var& x, int size) {
    const int64_t n = x.value().numel() / (static_cast<int64_t>(size) * size);
    return ad::reshape(x, {n, 1, size, size});
}

}  // namespace

ad::Var probe_loss(const detector::DetectorNet& det, const ad::Var& x_image) {
    ad::Var x4 = as_image_batch(x_image, det.cfg().input_size);
    ad::Var z = det.logits(x4);
    return ad::mean(ad::softplus(z));
}

ad::Var perceptual_loss(const PerceptualExtractor& gamma, const ad::Var& x_adapted, const ad::Var& x_base) {
    if (x_adapted.value().numel() != x_base.value().numel())
        throw ShapeError("perceptual_loss: operand size mismatch");
    ad::Var fa1, fa2, fa3, fb1, fb2, fb3;
    {
        auto fa = gamma.features(as_image_batch(x_adapted, gamma.image_size()));
        fa1 = fa[0];
        fa2 = fa[1];
        fa3 = fa[2];
    }
    {
        ad::NoGradGuard ng;  // the unadapted reference is a constant
        auto fb = gamma.features(as_image_batch(ad::constant(x_base.value()), gamma.image_size()));
        fb1 = fb[0];
        fb2 = fb[1];
        fb3 = fb[2];
    }
    return ad::add(ad::add(ad::mse(fa1, fb1), ad::mse(fa2, fb2)), ad::mse(fa3, fb3));
}

// --- probe optimization ----------------------------------------------------------

namespace {

void check_frozen(const ParamStore& ps, const char* who) {
    for (const auto& name : ps.names())
        if (!ps.is_frozen(name)) throw ContractError(std::string(who) + " parameters must be frozen");
}

struct RequestEval {
    ad::Var probe_l;
    ad::Var perc_l;
    Tensor adapted_x0;
};

}  // namespace

ProbeStepOut probe_step(const diffusion::DenoiserNet& net, const lora::LoraParams& lp,
                        const detector::DetectorNet& det, const PerceptualExtractor& gamma,
                        const std::vector<diffusion::SampleRequest>& batch, double lambda,
                        const TrainStepPlan& plan, const diffusion::NoiseSchedule& sched) {
    if (batch.empty()) throw ContractError("probe_step: empty batch");
    if (lambda < 0.0) throw ConfigError("probe_step: lambda must be >= 0");
    check_frozen(net.params(), "generator");
    check_frozen(det.params(), "detector");
    check_frozen(gamma.params(), "extractor");

    std::vector<RequestEval> evals(batch.size());
    kernels::parallel_for(static_cast<int64_t>(batch.size()), [&](int64_t i) {
        diffusion::SampleRequest req = batch[static_cast<size_t>(i)];
        req.grad_plan = plan;
        auto adapted = diffusion::sample(net, &lp, sched, req);
        RequestEval ev;
        ev.adapted_x0 = adapted.x0.value();
        ev.probe_l = probe_loss(det, adapted.x0);
        if (lambda > 0.0) {
            diffusion::SampleRequest base_req = batch[static_cast<size_t>(i)];
            base_req.grad_plan.reset();
            ad::NoGradGuard ng;
            auto base = diffusion::sample(net, nullptr, sched, base_req);
            ev.perc_l = perceptual_loss(gamma, adapted.x0, base.x0);
        }
        evals[static_cast<size_t>(i)] = std::move(ev);
    });

    // combine in request order
    ad::Var probe_sum = evals[0].probe_l;
    for (size_t i = 1; i < evals.size(); ++i) probe_sum = ad::add(probe_sum, evals[i].probe_l);
    ad::Var total = ad::scale(probe_sum, 1.0 / static_cast<double>(evals.size()));
    ProbeStepOut out;
    out.probe_term = total.value().get(0);
    if (lambda > 0.0) {
        ad::Var perc_sum = evals[0].perc_l;
        for (size_t i = 1; i < evals.size(); ++i) perc_sum = ad::add(perc_sum, evals[i].perc_l);
        ad::Var perc_mean = ad::scale(perc_sum, 1.0 / static_cast<double>(evals.size()));
        out.perc_term = perc_mean.value().get(0);
        total = ad::add(total, ad::scale(perc_mean, lambda));
    }
    out.total_loss = total.value().get(0);
    out.grads = ad::backward(total, &lp.params);
    out.adapted_x0.reserve(evals.size());
    for (auto& ev : evals) out.adapted_x0.push_back(std::move(ev.adapted_x0));
    return out;
}

GradMap drtune_gradient_manual(const diffusion::Trajectory& traj, const Tensor& dl_dx0,
                               const TrainStepPlan& plan, const diffusion::NoiseSchedule& sched,
                               const diffusion::DenoiserNet& net, const lora::LoraParams& lp,
                               const diffusion::SampleRequest& req) {
    if (traj.x.size() != static_cast<size_t>(sched.T) + 1)
        throw ContractError("drtune_gradient_manual: trajectory length mismatch");
    GradMap out;
    for (const int t : plan.steps) {
        if (t < 1 || t > sched.T) throw ContractError("drtune_gradient_manual: plan step out of range");
        if (!traj.x[static_cast<size_t>(t)].defined())
            throw ContractError("drtune_gradient_manual: trajectory missing x_t");
        const auto [a, b, c] = sched.ddim_coeffs(t);
        (void)a;
        (void)c;
        const double coeff = sched.a_prod_below(t) * b;
        Tensor cotangent(dl_dx0.dims(), dl_dx0.dtype());
        for (int64_t i = 0; i < cotangent.numel(); ++i) cotangent.set1(i, coeff * dl_dx0.get(i));

        ad::Var eps_hat = diffusion::guided_eps(net, &lp, ad::constant(traj.x[static_cast<size_t>(t)]), t,
                                                req.class_id, req.guidance);
        ad::Var pseudo = ad::sum(ad::mul(eps_hat, ad::constant(std::move(cotangent))));
        GradMap term = ad::backward(pseudo);
        for (const auto& [name, g] : term.entries()) out.accumulate(name, g);
    }
    // untouched adapter entries count as exact zeros
    for (const auto& name : lp.params.names())
        if (!lp.params.is_frozen(name) && !out.has(name))
            out.set(name, Tensor::zeros(lp.params.get(name).dims(), lp.params.get(name).dtype()));
    return out;
}

ProbeResult run_probe(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                      const detector::DetectorNet& det, const PerceptualExtractor& gamma,
                      const ProbeConfig& cfg) {
    if (cfg.rounds < 1) throw ConfigError("run_probe: rounds must be >= 1");
    if (cfg.n_prompts < 1) throw ConfigError("run_probe: n_prompts must be >= 1");

    // working copies: base generator and critic are frozen for the whole run
    diffusion::DenoiserNet gen = net;
    gen.params() = net.params().clone();
    detector::DetectorNet critic = det;
    critic.params() = det.params().clone();
    critic.params().freeze_all();

    ProbeResult result;
    result.lora = lora::attach_lora(gen, cfg.rank, diffusion::lora_target_names(), derive_seed(cfg.seed, "lora"));

    Rng class_rng = Rng::seeded(derive_seed(cfg.seed, "probe-classes"));
    result.requests.reserve(static_cast<size_t>(cfg.n_prompts));
    for (int i = 0; i < cfg.n_prompts; ++i)
        result.requests.push_back({derive_seed(cfg.seed, "probe-req", static_cast<uint64_t>(i)),
                                   static_cast<int>(class_rng.uniform_int(0, net.cfg().classes - 1))});

    nn::SgdMomentum opt(cfg.lr, cfg.momentum);
    Rng plan_rng = Rng::seeded(derive_seed(cfg.seed, "t-start"));
    result.train_samples.split_name = "probe";
    result.train_samples.seed = cfg.seed;
    result.train_samples.items.reserve(result.requests.size());

    const int size = net.cfg().image_size;
    lora::LoraParams last_good = result.lora;
    last_good.params = result.lora.params.clone();

    int step_index = 0;
    for (int begin = 0; begin < cfg.n_prompts; begin += cfg.batch, ++step_index) {
        const int end = std::min(cfg.n_prompts, begin + cfg.batch);
        std::vector<diffusion::SampleRequest> batch;
        for (int i = begin; i < end; ++i) {
            diffusion::SampleRequest req;
            req.class_id = result.requests[static_cast<size_t>(i)].class_id;
            req.seed = result.requests[static_cast<size_t>(i)].seed;
            req.guidance = cfg.guidance;
            batch.push_back(std::move(req));
        }
        const TrainStepPlan plan = cfg.t_s_mode == TsMode::Fixed
                                       ? make_train_steps(sched.T, cfg.K, cfg.t_s, cfg.step_count)
                                       : make_train_steps(sched.T, cfg.K, plan_rng, cfg.step_count);

        ProbeStepOut step = probe_step(gen, result.lora, critic, gamma, batch, cfg.lambda, plan, sched);
        if (!std::isfinite(step.total_loss)) {
            result.diverged_at_step = step_index;
            result.lora = std::move(last_good);
            return result;
        }
        for (size_t r = 0; r < step.adapted_x0.size(); ++r) {
            toydata::ToyImage img;
            img.pixels = diffusion::clamp_unit(step.adapted_x0[r].reshaped({size, size}));
            img.class_id = batch[r].class_id;
            img.label = 1;
            img.source_tag = "probe";
            result.train_samples.items.push_back(std::move(img));
        }
        opt.step(result.lora.params, step.grads);
        last_good.params = result.lora.params.clone();
        result.log.push_back({step_index, step.probe_term, step.perc_term, step.total_loss});
    }
    return result;
}

toydata::SplitDataset regenerate_probe_samples(const diffusion::DenoiserNet& net,
                                               const diffusion::NoiseSchedule& sched,
                                               const lora::LoraParams* lp,
                                               const std::vector<ProbeRequestInfo>& requests,
                                               double guidance, const std::string& source_tag) {
    toydata::SplitDataset ds;
    ds.split_name = source_tag;
    ds.items.resize(requests.size());
    const int size = net.cfg().image_size;
    kernels::parallel_for(static_cast<int64_t>(requests.size()), [&](int64_t i) {
        diffusion::SampleRequest req;
        req.class_id = requests[static_cast<size_t>(i)].class_id;
        req.seed = requests[static_cast<size_t>(i)].seed;
        req.guidance = guidance;
        auto out = diffusion::sample(net, lp, sched, req);
        toydata::ToyImage img;
        img.pixels = diffusion::clamp_unit(out.x0.value().reshaped({size, size}));
        img.class_id = req.class_id;
        img.label = 1;
        img.source_tag = source_tag;
        ds.items[static_cast<size_t>(i)] = std::move(img);
    });
    return ds;
}

}  // namespace probekit::probe
