#include "probekit/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "probekit/lora.hpp"
#include "probekit/nn.hpp"

namespace probekit::diffusion {

namespace {
constexpr double kTau = 6.283185307179586476925286766559;
thread_local int t_recorded_net_calls = 0;
}  // namespace

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, double eta) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    if (eta < 0.0) throw ConfigError("schedule: eta must be >= 0");
    NoiseSchedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.eta = eta;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T) + 1);
    s.alpha_bar[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / (T - 1);
        s.beta[static_cast<size_t>(t - 1)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[static_cast<size_t>(t)] =
            s.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - s.beta[static_cast<size_t>(t - 1)]);
    }
    return s;
}

NoiseSchedule::Coeffs NoiseSchedule::ddim_coeffs(int t) const {
    if (t < 1 || t > T) throw ContractError("ddim_coeffs: t out of range");
    const double ab_prev = alpha_bar[static_cast<size_t>(t - 1)];
    const double ab = alpha_bar[static_cast<size_t>(t)];
    const double a = std::sqrt(ab_prev / ab);
    const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double b = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) - a * std::sqrt(1.0 - ab);
    return {a, b, sigma};
}

double NoiseSchedule::a_prod_below(int t) const {
    if (t < 1 || t > T) throw ContractError("a_prod_below: t out of range");
    double p = 1.0;
    for (int s = 1; s < t; ++s) p *= ddim_coeffs(s).a;
    return p;
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps)) throw ShapeError("q_sample: eps dims must match x0");
    if (t < 0 || t > sched.T) throw ContractError("q_sample: t out of range");
    const double ab = sched.alpha_bar[static_cast<size_t>(t)];
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out(x0.dims(), x0.dtype());
    for (int64_t i = 0; i < out.numel(); ++i) out.set1(i, sa * x0.get(i) + sb * eps.get(i));
    return out;
}

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
    if (!x_t.same_shape(eps_hat)) throw ShapeError("ddim_step: shape mismatch");
    const auto [a, b, c] = sched.ddim_coeffs(t);
    (void)c;
    Tensor out(x_t.dims(), x_t.dtype());
    for (int64_t i = 0; i < out.numel(); ++i) out.set1(i, a * x_t.get(i) + b * eps_hat.get(i));
    return out;
}

Tensor clamp_unit(const Tensor& x) {
    Tensor out = x.clone();
    for (int64_t i = 0; i < out.numel(); ++i) out.set1(i, std::clamp(out.get(i), -1.0, 1.0));
    return out;
}

// --- denoiser ----------------------------------------------------------------

DenoiserNet DenoiserNet::init(const DenoiserConfig& cfg, uint64_t seed) {
    DenoiserNet net;
    net.cfg_ = cfg;
    Rng rng = Rng::seeded(derive_seed(seed, "denoiser-init"));
    const int d = cfg.image_size * cfg.image_size;
    const int h = cfg.hidden;
    const int f = 2 * cfg.time_freqs;
    const DType dt = cfg.dtype;
    auto& ps = net.params_;
    ps.add("input.w", nn::kaiming_init(h, d, dt, rng));
    ps.add("input.b", Tensor::zeros({h}, dt));
    ps.add("time.w1", nn::kaiming_init(h, f, dt, rng));
    ps.add("time.b1", Tensor::zeros({h}, dt));
    ps.add("time.w2", nn::kaiming_init(h, h, dt, rng));
    ps.add("time.b2", Tensor::zeros({h}, dt));
    {
        Tensor table({cfg.classes + 1, h}, dt);
        for (int64_t i = 0; i < table.numel(); ++i) table.set1(i, 0.02 * rng.normal());
        ps.add("class.table", std::move(table));
    }
    ps.add("hidden.w1", nn::kaiming_init(h, h, dt, rng));
    ps.add("hidden.b1", Tensor::zeros({h}, dt));
    ps.add("hidden.w2", nn::kaiming_init(h, h, dt, rng));
    ps.add("hidden.b2", Tensor::zeros({h}, dt));
    ps.add("output.w", nn::kaiming_init(d, h, dt, rng));
    ps.add("output.b", Tensor::zeros({d}, dt));
    return net;
}

std::vector<std::string> lora_target_names() { return {"hidden.w1", "hidden.w2"}; }

namespace {

Tensor time_features(std::span<const int> ts, int freqs, DType dt) {
    Tensor feat({static_cast<int64_t>(ts.size()), 2 * freqs}, dt);
    for (size_t r = 0; r < ts.size(); ++r) {
        for (int k = 0; k < freqs; ++k) {
            const double w = std::exp(-std::log(10000.0) * k / std::max(1, freqs - 1));
            feat.set1(static_cast<int64_t>(r) * 2 * freqs + 2 * k, std::sin(w * ts[r]));
            feat.set1(static_cast<int64_t>(r) * 2 * freqs + 2 * k + 1, std::cos(w * ts[r]));
        }
    }
    return feat;
}

}  // namespace

ad::Var DenoiserNet::forward(const ad::Var& x_t, std::span<const int> ts, std::span<const int> class_ids,
                             const lora::LoraParams* lp) const {
    const auto& ps = params_;
    if (x_t.value().rank() != 2 || x_t.value().dim(1) != input_dim())
        throw ShapeError("denoiser: expected rows of flattened images");
    if (ts.size() != class_ids.size() || static_cast<int64_t>(ts.size()) != x_t.value().dim(0))
        throw ShapeError("denoiser: per-row ts/class_ids required");

    ad::Var h0 = nn::linear(x_t, nn::param(ps, "input.w"), nn::param(ps, "input.b"));

    ad::Var feat = ad::constant(time_features(ts, cfg_.time_freqs, cfg_.dtype));
    ad::Var t1 = ad::silu(nn::linear(feat, nn::param(ps, "time.w1"), nn::param(ps, "time.b1")));
    ad::Var temb = nn::linear(t1, nn::param(ps, "time.w2"), nn::param(ps, "time.b2"));

    std::vector<int64_t> rows(class_ids.size());
    for (size_t i = 0; i < class_ids.size(); ++i) {
        const int c = class_ids[i];
        if (c < -1 || c >= cfg_.classes) throw ContractError("denoiser: class id out of range");
        rows[i] = c < 0 ? cfg_.classes : c;  // null class embedding
    }
    ad::Var cemb = ad::embed_lookup(nn::param(ps, "class.table"), std::move(rows));

    ad::Var h = ad::add(ad::add(h0, temb), cemb);

    auto hidden_weight = [&](const std::string& name) {
        ad::Var base = nn::param(ps, name);
        if (lp && lp->has_target(name)) return lora::effective_weight(base, *lp, name);
        return base;
    };
    ad::Var h1 = ad::silu(ad::add(ad::matmul(h, hidden_weight("hidden.w1"), false, true),
                                  nn::param(ps, "hidden.b1")));
    ad::Var h2 = ad::silu(ad::add(ad::matmul(h1, hidden_weight("hidden.w2"), false, true),
                                  nn::param(ps, "hidden.b2")));
    return nn::linear(h2, nn::param(ps, "output.w"), nn::param(ps, "output.b"));
}

void DenoiserNet::save(const std::string& path) const {
    params_.save(path);
    nlohmann::json meta;
    meta["image_size"] = cfg_.image_size;
    meta["classes"] = cfg_.classes;
    meta["hidden"] = cfg_.hidden;
    meta["time_freqs"] = cfg_.time_freqs;
    meta["dtype"] = dtype_name(cfg_.dtype);
    std::ofstream os(path + ".json");
    if (!os) throw IoError("cannot write manifest: " + path + ".json");
    os << meta.dump(2) << "\n";
}

DenoiserNet DenoiserNet::load(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw IoError("missing manifest: " + path + ".json");
    nlohmann::json meta = nlohmann::json::parse(is);
    DenoiserNet net;
    net.cfg_.image_size = meta.at("image_size").get<int>();
    net.cfg_.classes = meta.at("classes").get<int>();
    net.cfg_.hidden = meta.at("hidden").get<int>();
    net.cfg_.time_freqs = meta.at("time_freqs").get<int>();
    net.cfg_.dtype = meta.at("dtype").get<std::string>() == "f64" ? DType::F64 : DType::F32;
    net.params_ = ParamStore::load(path);
    return net;
}

std::vector<TrainLogRow> train_denoiser(DenoiserNet& net, const std::vector<Tensor>& images,
                                        const std::vector<int>& class_ids, const NoiseSchedule& sched,
                                        const TrainConfig& cfg) {
    if (images.empty() || images.size() != class_ids.size())
        throw ContractError("train_denoiser: empty or mismatched dataset");
    const int d = net.input_dim();
    const DType dt = net.cfg().dtype;
    nn::Adam opt(cfg.lr);
    Rng rng = Rng::seeded(derive_seed(cfg.seed, "denoiser-train"));
    std::vector<TrainLogRow> log;

    for (int step = 0; step < cfg.steps; ++step) {
        const int b = cfg.batch;
        Tensor x0({b, d}, dt), eps({b, d}, dt), xt({b, d}, dt);
        std::vector<int> ts(static_cast<size_t>(b)), cids(static_cast<size_t>(b));
        for (int r = 0; r < b; ++r) {
            const size_t idx = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(images.size()) - 1));
            const Tensor& img = images[idx];
            const int t = static_cast<int>(rng.uniform_int(1, sched.T));
            ts[static_cast<size_t>(r)] = t;
            cids[static_cast<size_t>(r)] = rng.bernoulli(cfg.cond_drop) ? -1 : class_ids[idx];
            const double sa = std::sqrt(sched.alpha_bar[static_cast<size_t>(t)]);
            const double sb = std::sqrt(1.0 - sched.alpha_bar[static_cast<size_t>(t)]);
            for (int64_t i = 0; i < d; ++i) {
                const double e = rng.normal();
                const double v = img.get(i);
                x0.set1(static_cast<int64_t>(r) * d + i, v);
                eps.set1(static_cast<int64_t>(r) * d + i, e);
                xt.set1(static_cast<int64_t>(r) * d + i, sa * v + sb * e);
            }
        }
        ad::Var pred = net.forward(ad::constant(xt), ts, cids, nullptr);
        ad::Var loss = ad::mse(pred, ad::constant(eps));
        const double lv = loss.value().get(0);
        if (!std::isfinite(lv)) throw NumericError("denoiser training diverged at step " + std::to_string(step));
        GradMap grads = ad::backward(loss);
        opt.step(net.params(), grads);
        if (step % 50 == 0 || step == cfg.steps - 1) log.push_back({step, lv});
    }
    return log;
}

// --- sampling ----------------------------------------------------------------

int last_recorded_net_calls() { return t_recorded_net_calls; }

ad::Var guided_eps(const DenoiserNet& net, const lora::LoraParams* lp, const ad::Var& x_in, int t,
                   int class_id, double g) {
    const int ts[1] = {t};
    if (g == 0.0) {
        const int uncond[1] = {-1};
        return net.forward(x_in, ts, uncond, lp);
    }
    if (g == 1.0) {
        const int cond[1] = {class_id};
        return net.forward(x_in, ts, cond, lp);
    }
    const int uncond[1] = {-1};
    const int cond[1] = {class_id};
    ad::Var eps_u = net.forward(x_in, ts, uncond, lp);
    ad::Var eps_c = net.forward(x_in, ts, cond, lp);
    return ad::add(eps_u, ad::scale(ad::sub(eps_c, eps_u), g));
}

SampleOut sample(const DenoiserNet& net, const lora::LoraParams* lp, const NoiseSchedule& sched,
                 const SampleRequest& req) {
    if (req.class_id < 0 || req.class_id >= net.cfg().classes)
        throw ContractError("sample: class_id out of range");
    if (req.grad_plan) {
        for (const int s : req.grad_plan->steps)
            if (s < 1 || s > sched.T) throw ContractError("sample: grad_plan step outside [1, T]");
    }
    const int start_t = req.start_t == 0 ? sched.T : req.start_t;
    if (start_t < 1 || start_t > sched.T) throw ContractError("sample: start_t out of range");
    if (start_t != sched.T && !req.init_latent)
        throw ContractError("sample: partial chains need an explicit latent");
    t_recorded_net_calls = 0;

    Rng rng = Rng::seeded(derive_seed(req.seed, "x_T"));
    const int d = net.input_dim();
    ad::Var x = req.init_latent ? *req.init_latent
                                : ad::constant(Tensor::randn({1, d}, net.cfg().dtype, rng));
    if (x.value().rank() != 2 || x.value().dim(0) != 1 || x.value().dim(1) != d)
        throw ShapeError("sample: latent must be [1, D]");

    SampleOut out;
    if (req.record_trajectory) {
        out.trajectory.emplace();
        out.trajectory->x.assign(static_cast<size_t>(sched.T) + 1, Tensor());
        out.trajectory->x[static_cast<size_t>(start_t)] = x.value();
    }

    const bool routed = req.grad_plan.has_value();
    std::optional<ad::NoGradGuard> plain_guard;
    if (!routed) plain_guard.emplace();

    for (int t = start_t; t >= 1; --t) {
        ad::Var eps_hat;
        if (routed) {
            ad::Var x_in = ad::stop_grad(x);
            if (req.grad_plan->contains(t)) {
                eps_hat = guided_eps(net, lp, x_in, t, req.class_id, req.guidance);
                if (eps_hat.requires_grad()) ++t_recorded_net_calls;
            } else {
                ad::NoGradGuard ng;
                eps_hat = guided_eps(net, lp, x_in, t, req.class_id, req.guidance);
            }
        } else {
            eps_hat = guided_eps(net, lp, x, t, req.class_id, req.guidance);
        }

        const auto [a, b, c] = sched.ddim_coeffs(t);
        x = ad::add(ad::scale(x, a), ad::scale(eps_hat, b));
        if (c > 0.0) {
            // stochastic DDIM tail noise; always detached
            Tensor noise = Tensor::randn({1, d}, net.cfg().dtype, rng);
            x = ad::add(x, ad::scale(ad::constant(std::move(noise)), c));
        }
        if (out.trajectory) out.trajectory->x[static_cast<size_t>(t - 1)] = x.value();
    }
    out.x0 = x;
    return out;
}

}  // namespace probekit::diffusion
