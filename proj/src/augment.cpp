#include "probekit/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "probekit/nn.hpp"
#include "probekit/probe.hpp"

namespace probekit::augment {

namespace {

// ITU-T T.81 Annex K luminance quantization table
constexpr int kQLum[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

int64_t reflect(int64_t i, int64_t n) {
    if (n == 1) return 0;
    const int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

void check_image(const Tensor& x, const char* who) {
    if (x.rank() != 2) throw ShapeError(std::string(who) + ": expected [H,W] image");
}

// orthonormal 8x8 DCT-II basis, row u evaluated at sample i
struct DctBasis {
    std::array<double, 64> m;
    DctBasis() {
        for (int u = 0; u < 8; ++u)
            for (int i = 0; i < 8; ++i)
                m[static_cast<size_t>(u * 8 + i)] =
                    (u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0)) *
                    std::cos((2.0 * i + 1.0) * u * 3.14159265358979323846 / 16.0);
    }
};
const DctBasis kDct;

}  // namespace

Tensor compress_blockdct(const Tensor& x, int quality) {
    check_image(x, "compress_blockdct");
    if (quality < 1 || quality > 100) throw ContractError("compress_blockdct: quality must be in [1,100]");
    const double s = quality < 50 ? 50.0 / quality : (200.0 - 2.0 * quality) / 100.0;
    std::array<double, 64> step;
    for (int i = 0; i < 64; ++i) step[static_cast<size_t>(i)] = std::max(1.0, std::round(kQLum[i] * s));

    const int64_t h = x.dim(0), w = x.dim(1);
    const int64_t bh = (h + 7) / 8, bw = (w + 7) / 8;
    Tensor out(x.dims(), x.dtype());
    std::array<double, 64> block{}, coef{};
    for (int64_t by = 0; by < bh; ++by) {
        for (int64_t bx = 0; bx < bw; ++bx) {
            // gather on the 0..255 scale, reflecting over image edges
            for (int r = 0; r < 8; ++r)
                for (int c = 0; c < 8; ++c) {
                    const int64_t sr = reflect(by * 8 + r, h), sc = reflect(bx * 8 + c, w);
                    block[static_cast<size_t>(r * 8 + c)] = (x.get(sr * w + sc) + 1.0) * 127.5 - 128.0;
                }
            // forward 2-D DCT
            for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v) {
                    double acc = 0.0;
                    for (int r = 0; r < 8; ++r)
                        for (int c = 0; c < 8; ++c)
                            acc += block[static_cast<size_t>(r * 8 + c)] * kDct.m[static_cast<size_t>(u * 8 + r)] *
                                   kDct.m[static_cast<size_t>(v * 8 + c)];
                    const double q = step[static_cast<size_t>(u * 8 + v)];
                    coef[static_cast<size_t>(u * 8 + v)] = std::round(acc / q) * q;
                }
            // inverse 2-D DCT, scatter only in-range pixels
            for (int r = 0; r < 8; ++r) {
                const int64_t dr = by * 8 + r;
                if (dr >= h) continue;
                for (int c = 0; c < 8; ++c) {
                    const int64_t dc = bx * 8 + c;
                    if (dc >= w) continue;
                    double acc = 0.0;
                    for (int u = 0; u < 8; ++u)
                        for (int v = 0; v < 8; ++v)
                            acc += coef[static_cast<size_t>(u * 8 + v)] * kDct.m[static_cast<size_t>(u * 8 + r)] *
                                   kDct.m[static_cast<size_t>(v * 8 + c)];
                    out.set1(dr * w + dc, std::clamp((acc + 128.0) / 127.5 - 1.0, -1.0, 1.0));
                }
            }
        }
    }
    return out;
}

Tensor gaussian_blur(const Tensor& x, double sigma) {
    check_image(x, "gaussian_blur");
    if (sigma < 0.0) throw ContractError("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0) return x;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        norm += kernel[static_cast<size_t>(i + radius)];
    }
    for (auto& k : kernel) k /= norm;

    const int64_t h = x.dim(0), w = x.dim(1);
    Tensor tmp(x.dims(), x.dtype()), out(x.dims(), x.dtype());
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<size_t>(i + radius)] * x.get(r * w + reflect(c + i, w));
            tmp.set1(r * w + c, acc);
        }
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<size_t>(i + radius)] * tmp.get(reflect(r + i, h) * w + c);
            out.set1(r * w + c, std::clamp(acc, -1.0, 1.0));
        }
    return out;
}

Tensor add_noise(const Tensor& x, double std_255, Rng& rng) {
    check_image(x, "add_noise");
    if (std_255 < 0.0) throw ContractError("add_noise: std must be >= 0");
    if (std_255 == 0.0) return x;
    const double std = std_255 * 2.0 / 255.0;
    Tensor out(x.dims(), x.dtype());
    for (int64_t i = 0; i < x.numel(); ++i) out.set1(i, std::clamp(x.get(i) + std * rng.normal(), -1.0, 1.0));
    return out;
}

Tensor resize(const Tensor& x, double scale) {
    check_image(x, "resize");
    if (scale <= 0.0) throw ContractError("resize: scale must be positive");
    if (scale == 1.0) return x;
    const int64_t h = x.dim(0), w = x.dim(1);
    const int64_t nh = static_cast<int64_t>(std::llround(h * scale));
    const int64_t nw = static_cast<int64_t>(std::llround(w * scale));
    if (nh < 2 || nw < 2) throw ContractError("resize: output smaller than 2 pixels");
    Tensor out({nh, nw}, x.dtype());
    for (int64_t r = 0; r < nh; ++r) {
        const double sr = (r + 0.5) * static_cast<double>(h) / nh - 0.5;
        const int64_t r0 = static_cast<int64_t>(std::floor(sr));
        const double fr = sr - r0;
        for (int64_t c = 0; c < nw; ++c) {
            const double sc = (c + 0.5) * static_cast<double>(w) / nw - 0.5;
            const int64_t c0 = static_cast<int64_t>(std::floor(sc));
            const double fc = sc - c0;
            auto pix = [&](int64_t rr, int64_t cc) { return x.get(reflect(rr, h) * w + reflect(cc, w)); };
            const double v = (1 - fr) * ((1 - fc) * pix(r0, c0) + fc * pix(r0, c0 + 1)) +
                             fr * ((1 - fc) * pix(r0 + 1, c0) + fc * pix(r0 + 1, c0 + 1));
            out.set1(r * nw + c, std::clamp(v, -1.0, 1.0));
        }
    }
    return out;
}

namespace {

Tensor rotate90(const Tensor& x, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return x;
    const int64_t h = x.dim(0), w = x.dim(1);
    const int64_t nh = (k % 2 == 0) ? h : w;
    const int64_t nw = (k % 2 == 0) ? w : h;
    Tensor out({nh, nw}, x.dtype());
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            int64_t dr = 0, dc = 0;
            switch (k) {
                case 1:
                    dr = c;
                    dc = h - 1 - r;
                    break;
                case 2:
                    dr = h - 1 - r;
                    dc = w - 1 - c;
                    break;
                default:
                    dr = w - 1 - c;
                    dc = r;
                    break;
            }
            out.set1(dr * nw + dc, x.get(r * w + c));
        }
    return out;
}

Tensor hflip(const Tensor& x) {
    const int64_t h = x.dim(0), w = x.dim(1);
    Tensor out(x.dims(), x.dtype());
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) out.set1(r * w + c, x.get(r * w + (w - 1 - c)));
    return out;
}

Tensor crop_and_restore(const Tensor& x, double frac, Rng& rng) {
    const int64_t h = x.dim(0), w = x.dim(1);
    const int64_t ch = std::max<int64_t>(2, static_cast<int64_t>(std::llround(h * frac)));
    const int64_t cw = std::max<int64_t>(2, static_cast<int64_t>(std::llround(w * frac)));
    if (ch == h && cw == w) return x;
    const int64_t off_r = rng.uniform_int(0, h - ch);
    const int64_t off_c = rng.uniform_int(0, w - cw);
    Tensor out(x.dims(), x.dtype());
    // crop then reflect-pad back to the original size
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c)
            out.set1(r * w + c, x.get((off_r + reflect(r, ch)) * w + off_c + reflect(c, cw)));
    return out;
}

}  // namespace

Tensor random_augment(const Tensor& x, const AugmentPolicy& policy, Rng& rng) {
    check_image(x, "random_augment");
    Tensor out = x;
    if (policy.compress) {
        const int q = static_cast<int>(rng.uniform_int(policy.compress_quality_min, policy.compress_quality_max));
        if (q < 100) out = compress_blockdct(out, q);  // quality 100 = no compression
    }
    if (policy.blur) {
        const double sigma = rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max);
        out = gaussian_blur(out, sigma);
    }
    if (policy.noise) {
        const double std = rng.uniform(policy.noise_std_min, policy.noise_std_max);
        out = add_noise(out, std, rng);
    }
    if (policy.resize_enabled) {
        const double scale = rng.uniform(policy.resize_scale_min, policy.resize_scale_max);
        out = resize(out, scale);
    }
    if (policy.flip && rng.bernoulli(0.5)) out = hflip(out);
    if (policy.rotate) {
        const int k = static_cast<int>(rng.uniform_int(0, 3));
        out = rotate90(out, k);
    }
    if (policy.crop) {
        const double frac = rng.uniform(policy.crop_min_frac, 1.0);
        out = crop_and_restore(out, frac, rng);
    }
    if (policy.jitter) {
        const double b = rng.uniform(-policy.brightness_max, policy.brightness_max);
        const double c = rng.uniform(1.0 - policy.contrast_range, 1.0 + policy.contrast_range);
        if (b != 0.0 || c != 1.0) {
            double mean = 0.0;
            for (int64_t i = 0; i < out.numel(); ++i) mean += out.get(i);
            mean /= static_cast<double>(out.numel());
            Tensor jittered(out.dims(), out.dtype());
            for (int64_t i = 0; i < out.numel(); ++i)
                jittered.set1(i, std::clamp(mean + c * (out.get(i) - mean) + b, -1.0, 1.0));
            out = std::move(jittered);
        }
    }
    return out;
}

// --- adversarial baselines -----------------------------------------------------

namespace {

double frozen_probe_score_grad(const detector::DetectorNet& det, const Tensor& image, Tensor* grad_out) {
    const int s = det.cfg().input_size;
    ad::Var x(image.astype(det.cfg().dtype), /*requires_grad=*/true);
    ad::Var z = det.logits(ad::reshape(x, {1, 1, s, s}));
    ad::Var loss = ad::mean(ad::softplus(z));
    ad::backward(loss);
    *grad_out = x.grad();
    // softplus(z) is monotone in z, so the loss doubles as the score proxy
    return loss.value().get(0);
}

}  // namespace

Tensor pgd_pixel(const Tensor& x, const detector::DetectorNet& det_in, const PgdConfig& cfg) {
    check_image(x, "pgd_pixel");
    if (cfg.eps < 0.0) throw ContractError("pgd_pixel: eps must be >= 0");
    if (cfg.eps > 0.0 && (cfg.steps < 1 || cfg.alpha <= 0.0 || cfg.alpha > cfg.eps + 1e-15))
        throw ContractError("pgd_pixel: need 0 < alpha <= eps and steps >= 1");
    detector::DetectorNet det = det_in;
    det.params() = det_in.params().clone();
    det.params().freeze_all();

    const double eps = cfg.eps * 2.0;  // [0,1] budget onto the [-1,1] scale
    const double alpha = cfg.alpha * 2.0;
    const int64_t n = x.numel();

    Tensor delta = Tensor::zeros(x.dims(), x.dtype());
    Tensor best = x.clone();
    double best_score = det.predict(x);
    for (int it = 0; it < cfg.steps && eps > 0.0; ++it) {
        Tensor candidate(x.dims(), x.dtype());
        for (int64_t i = 0; i < n; ++i)
            candidate.set1(i, std::clamp(x.get(i) + delta.get(i), -1.0, 1.0));
        Tensor grad;
        frozen_probe_score_grad(det, candidate, &grad);
        const double score = det.predict(candidate);
        if (score < best_score) {
            best_score = score;
            best = candidate.clone();
        }
        for (int64_t i = 0; i < n; ++i) {
            const double g = grad.get(i);
            const double step = g > 0.0 ? -alpha : (g < 0.0 ? alpha : 0.0);
            delta.set1(i, std::clamp(delta.get(i) + step, -eps, eps));
        }
    }
    // the final iterate competes too
    if (eps > 0.0) {
        Tensor candidate(x.dims(), x.dtype());
        for (int64_t i = 0; i < n; ++i)
            candidate.set1(i, std::clamp(x.get(i) + delta.get(i), -1.0, 1.0));
        if (det.predict(candidate) < best_score) best = candidate;
    }
    return best;
}

Tensor pgd_latent(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                  const detector::DetectorNet& det_in, const diffusion::SampleRequest& req_in,
                  const PgdConfig& cfg) {
    const int t_star = cfg.latent_step_t == 0 ? sched.T : cfg.latent_step_t;
    if (t_star < 1 || t_star > sched.T) throw ContractError("pgd_latent: latent_step_t out of range");
    detector::DetectorNet det = det_in;
    det.params() = det_in.params().clone();
    det.params().freeze_all();
    diffusion::DenoiserNet gen = net;
    gen.params() = net.params().clone();
    gen.params().freeze_all();

    const int size = net.cfg().image_size;
    // full gradient coverage downstream of the attacked latent
    probe::TrainStepPlan plan = probe::make_train_steps(t_star, t_star, 1);

    // reference latent x_{t*}: the plain trajectory up to t_star
    Tensor latent0;
    {
        ad::NoGradGuard ng;
        if (t_star == sched.T) {
            Rng rng = Rng::seeded(derive_seed(req_in.seed, "x_T"));
            latent0 = Tensor::randn({1, net.input_dim()}, net.cfg().dtype, rng);
        } else {
            diffusion::SampleRequest probe_req = req_in;
            probe_req.record_trajectory = true;
            probe_req.grad_plan.reset();
            auto out = diffusion::sample(gen, nullptr, sched, probe_req);
            latent0 = out.trajectory->x[static_cast<size_t>(t_star)];
        }
    }

    auto rollout = [&](const Tensor& latent, bool with_grad, Tensor* grad_out) {
        diffusion::SampleRequest req = req_in;
        req.start_t = t_star;
        ad::Var lv(latent, /*requires_grad=*/with_grad);
        req.init_latent = lv;
        if (with_grad) req.grad_plan = plan;
        std::optional<ad::NoGradGuard> guard;
        if (!with_grad) guard.emplace();
        auto out = diffusion::sample(gen, nullptr, sched, req);
        if (with_grad) {
            ad::Var loss = probe::probe_loss(det, out.x0);
            ad::backward(loss);
            *grad_out = lv.grad();
        }
        return diffusion::clamp_unit(out.x0.value().reshaped({size, size}));
    };

    Tensor delta = Tensor::zeros(latent0.dims(), latent0.dtype());
    Tensor best = rollout(latent0, false, nullptr);
    double best_score = det.predict(best);
    const int64_t n = latent0.numel();
    for (int it = 0; it < cfg.steps && cfg.eps > 0.0; ++it) {
        Tensor latent(latent0.dims(), latent0.dtype());
        for (int64_t i = 0; i < n; ++i) latent.set1(i, latent0.get(i) + delta.get(i));
        Tensor grad;
        Tensor image = rollout(latent, true, &grad);
        const double score = det.predict(image);
        if (score < best_score) {
            best_score = score;
            best = std::move(image);
        }
        for (int64_t i = 0; i < n; ++i) {
            const double g = grad.get(i);
            const double step = g > 0.0 ? -cfg.alpha : (g < 0.0 ? cfg.alpha : 0.0);
            delta.set1(i, std::clamp(delta.get(i) + step, -cfg.eps, cfg.eps));
        }
    }
    if (cfg.eps > 0.0) {
        Tensor latent(latent0.dims(), latent0.dtype());
        for (int64_t i = 0; i < n; ++i) latent.set1(i, latent0.get(i) + delta.get(i));
        Tensor image = rollout(latent, false, nullptr);
        if (det.predict(image) < best_score) best = std::move(image);
    }
    return best;
}

}  // namespace probekit::augment
