#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "probekit/autodiff.hpp"
#include "probekit/plan.hpp"
#include "probekit/tensor.hpp"

namespace probekit::lora {
struct LoraParams;
}

namespace probekit::diffusion {

// DDIM update x_{t-1} = a_t x_t + b_t eps_hat + c_t eps with
//   a_t = sqrt(abar_{t-1}/abar_t)
//   b_t = sqrt(1 - abar_{t-1} - sigma_t^2) - a_t sqrt(1 - abar_t)
//   c_t = sigma_t,  sigma_t = eta sqrt((1-abar_{t-1})/(1-abar_t)) sqrt(1 - abar_t/abar_{t-1})
struct NoiseSchedule {
    int T = 0;
    double beta_start = 0, beta_end = 0, eta = 0;
    std::vector<double> beta;       // index t-1, length T
    std::vector<double> alpha_bar;  // length T+1, alpha_bar[0] = 1

    struct Coeffs {
        double a, b, c;
    };
    Coeffs ddim_coeffs(int t) const;        // 1 <= t <= T
    double a_prod_below(int t) const;       // prod_{s=1}^{t-1} a_s
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, double eta);

// forward noising x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// single DDIM update on plain tensors (used by the sampler and by tests)
Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched);

struct DenoiserConfig {
    int image_size = 16;
    int classes = 4;
    int hidden = 128;
    int time_freqs = 32;
    DType dtype = DType::F32;
};

// Conditional epsilon-prediction MLP: input projection + sinusoidal time
// embedding MLP + class embedding table (classes + 1 rows, last row is the
// null class for classifier-free guidance) + two SiLU hidden layers.
class DenoiserNet {
  public:
    static DenoiserNet init(const DenoiserConfig& cfg, uint64_t seed);

    // x_t rows [B, D]; ts and class_ids have one entry per row; class -1 maps
    // to the null embedding. LoRA deltas apply to the two hidden layers.
    ad::Var forward(const ad::Var& x_t, std::span<const int> ts, std::span<const int> class_ids,
                    const lora::LoraParams* lora = nullptr) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const DenoiserConfig& cfg() const { return cfg_; }
    int input_dim() const { return cfg_.image_size * cfg_.image_size; }

    void save(const std::string& path) const;
    static DenoiserNet load(const std::string& path);

  private:
    DenoiserConfig cfg_;
    ParamStore params_;
};

// names of the layers that accept low-rank deltas
std::vector<std::string> lora_target_names();

struct TrainConfig {
    int steps = 3000;
    double lr = 1e-3;
    int batch = 32;
    double cond_drop = 0.1;
    uint64_t seed = 0;
};

struct TrainLogRow {
    int step;
    double loss;
};

std::vector<TrainLogRow> train_denoiser(DenoiserNet& net, const std::vector<Tensor>& images,
                                        const std::vector<int>& class_ids, const NoiseSchedule& sched,
                                        const TrainConfig& cfg);

struct SampleRequest {
    int class_id = 0;
    double guidance = 0.0;
    uint64_t seed = 0;
    std::optional<probe::TrainStepPlan> grad_plan;
    bool record_trajectory = false;
    // replaces the seeded x_T draw; may carry gradient (latent attacks)
    std::optional<ad::Var> init_latent;
    // denoise from this step down; 0 means the full chain from T. When below
    // T, init_latent supplies x_{start_t}.
    int start_t = 0;
};

struct Trajectory {
    std::vector<Tensor> x;  // x[t] for t = 0..T (detached values)
};

struct SampleOut {
    ad::Var x0;  // carries a graph when grad_plan is set and grads are enabled
    std::optional<Trajectory> trajectory;
};

SampleOut sample(const DenoiserNet& net, const lora::LoraParams* lora, const NoiseSchedule& sched,
                 const SampleRequest& req);

// classifier-free guided prediction eps_u + g (eps_c - eps_u); a single net
// call when g is exactly 0 (unconditional) or 1 (conditional)
ad::Var guided_eps(const DenoiserNet& net, const lora::LoraParams* lora, const ad::Var& x_in, int t,
                   int class_id, double g);

// number of guided net calls recorded with gradient in the current thread's
// most recent sample() invocation (memory contract observability)
int last_recorded_net_calls();

Tensor clamp_unit(const Tensor& x);

}  // namespace probekit::diffusion
