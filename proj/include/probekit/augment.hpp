#pragma once

#include <string>

#include "probekit/detector.hpp"
#include "probekit/diffusion.hpp"
#include "probekit/rng.hpp"
#include "probekit/tensor.hpp"

namespace probekit::augment {

// Post-processing operators over [H,W] images in [-1,1]. Every operator at
// its identity parameter returns the input bit-for-bit (compression at
// quality 100 stays within the block-DCT rounding bound instead).

// 8x8 block DCT quantization with the standard luminance table scaled by
// s = q < 50 ? 50/q : (200 - 2q)/100; steps = max(1, round(Q * s)).
Tensor compress_blockdct(const Tensor& x, int quality);

// separable kernel, radius ceil(3 sigma), reflect padding; sigma 0 = identity
Tensor gaussian_blur(const Tensor& x, double sigma);

// additive Gaussian noise specified on the 0..255 scale, clamped
Tensor add_noise(const Tensor& x, double std_255, Rng& rng);

// bilinear resample by a positive scale factor; 1.0 = identity
Tensor resize(const Tensor& x, double scale);

struct AugmentPolicy {
    bool compress = true;
    int compress_quality_min = 50, compress_quality_max = 100;
    bool blur = true;
    double blur_sigma_min = 0.0, blur_sigma_max = 3.0;
    bool noise = true;
    double noise_std_min = 0.0, noise_std_max = 55.0;
    bool resize_enabled = true;
    double resize_scale_min = 0.5, resize_scale_max = 2.0;
    bool flip = true;
    bool rotate = true;
    bool crop = true;
    double crop_min_frac = 0.8;
    bool jitter = true;
    double brightness_max = 0.2;   // additive in [-b, b]
    double contrast_range = 0.2;   // multiplicative in [1-c, 1+c]
};

// fixed operator order: compress, blur, noise, resize, geometric, jitter;
// parameters drawn independently per call from the policy ranges
Tensor random_augment(const Tensor& x, const AugmentPolicy& policy, Rng& rng);

struct PgdConfig {
    double eps = 4.0 / 255.0;    // L-inf budget on the [0,1] pixel scale
    double alpha = 1.0 / 255.0;  // step size, same scale
    int steps = 10;
    int latent_step_t = 0;  // 0 = attack x_T
};

// Projected gradient descent on the pixels, minimizing the fake logit; the
// returned image is the lowest-scoring iterate (iterate 0 included).
Tensor pgd_pixel(const Tensor& x, const detector::DetectorNet& det, const PgdConfig& cfg);

// Same objective, but the perturbation lives on the sampler latent and
// gradients route through the stop-gradient chain.
Tensor pgd_latent(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                  const detector::DetectorNet& det, const diffusion::SampleRequest& req,
                  const PgdConfig& cfg);

}  // namespace probekit::augment
