#pragma once

#include <optional>
#include <string>
#include <vector>

#include "probekit/detector.hpp"
#include "probekit/diffusion.hpp"
#include "probekit/lora.hpp"
#include "probekit/plan.hpp"
#include "probekit/tensor.hpp"
#include "probekit/toydata.hpp"

namespace probekit::probe {

// Fixed random conv features (3 layers, stride 2, channels 8/16/32) used to
// keep adapted samples close to the unadapted generator output.
class PerceptualExtractor {
  public:
    static PerceptualExtractor init(int image_size, DType dt, uint64_t seed);

    // three feature maps for a batch [N,1,H,W]
    std::vector<ad::Var> features(const ad::Var& x) const;
    const ParamStore& params() const { return params_; }
    int image_size() const { return image_size_; }

  private:
    ParamStore params_;
    int image_size_ = 16;
};

// -log(1 - p(fake|x)) = softplus(fake_logit); differentiable w.r.t. x
ad::Var probe_loss(const detector::DetectorNet& det, const ad::Var& x_image);

// sum over feature maps of mean squared differences; x_base enters detached
ad::Var perceptual_loss(const PerceptualExtractor& gamma, const ad::Var& x_adapted, const ad::Var& x_base);

enum class TsMode { Fixed, RandomPerBatch };

struct ProbeConfig {
    double lambda = 1.0;
    double lr = 1e-3;
    double momentum = 0.9;
    int batch = 16;
    int n_prompts = 2000;
    int K = 5;
    int t_s = 5;
    TsMode t_s_mode = TsMode::Fixed;
    StepCount step_count = StepCount::KPlusOne;
    int rounds = 1;
    int rank = 4;
    double guidance = 2.0;
    uint64_t seed = 0;
};

struct ProbeStepOut {
    double total_loss = 0;
    double probe_term = 0;
    double perc_term = 0;
    GradMap grads;                   // LoRA entries only (explicit zeros when untouched)
    std::vector<Tensor> adapted_x0;  // raw sampler outputs, one per request
};

// One optimization step over a batch of sampling requests: adapted routed
// pass + gradient-free base pass per request, mean losses, LoRA gradients.
ProbeStepOut probe_step(const diffusion::DenoiserNet& net, const lora::LoraParams& lp,
                        const detector::DetectorNet& det, const PerceptualExtractor& gamma,
                        const std::vector<diffusion::SampleRequest>& batch, double lambda,
                        const TrainStepPlan& plan, const diffusion::NoiseSchedule& sched);

// Analytic gradient route: dL/dPhi = sum_{t in plan} (dL/dx0 * prod_{s<t} a_s)
// * b_t * d eps_hat(sg(x_t), t) / dPhi, replayed from a recorded trajectory.
GradMap drtune_gradient_manual(const diffusion::Trajectory& traj, const Tensor& dl_dx0,
                               const TrainStepPlan& plan, const diffusion::NoiseSchedule& sched,
                               const diffusion::DenoiserNet& net, const lora::LoraParams& lp,
                               const diffusion::SampleRequest& req);

struct ProbeLogRow {
    int step;
    double probe;
    double perc;
    double total;
};

struct ProbeRequestInfo {
    uint64_t seed;
    int class_id;
};

struct ProbeResult {
    lora::LoraParams lora;
    toydata::SplitDataset train_samples;  // images captured while optimizing
    std::vector<ProbeLogRow> log;
    std::vector<ProbeRequestInfo> requests;
    // set when a step produced a non-finite loss; lora then holds the last
    // finite checkpoint
    std::optional<int> diverged_at_step;
};

ProbeResult run_probe(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                      const detector::DetectorNet& det, const PerceptualExtractor& gamma,
                      const ProbeConfig& cfg);

// Deterministic replay of the request list with a given adapter.
toydata::SplitDataset regenerate_probe_samples(const diffusion::DenoiserNet& net,
                                               const diffusion::NoiseSchedule& sched,
                                               const lora::LoraParams* lp,
                                               const std::vector<ProbeRequestInfo>& requests,
                                               double guidance, const std::string& source_tag);

}  // namespace probekit::probe
