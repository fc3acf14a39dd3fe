#pragma once

#include <functional>
#include <string>
#include <vector>

#include "probekit/autodiff.hpp"
#include "probekit/tensor.hpp"
#include "probekit/toydata.hpp"

namespace probekit::detector {

// Binary real/fake classifier. Convention: positive logit means fake, so
// p_fake = sigmoid(logit) and every loss in the project derives from this.
struct DetectorConfig {
    int input_size = 16;
    int c1 = 8;
    int c2 = 16;
    DType dtype = DType::F32;
};

class DetectorNet {
  public:
    static DetectorNet init(const DetectorConfig& cfg, uint64_t seed);

    // x [N,1,H,W] -> logits [N,1]
    ad::Var logits(const ad::Var& x) const;

    double predict(const Tensor& image) const;          // image exactly input_size
    double predict_patched(const Tensor& image) const;  // any size; tiles + reflect-pads

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const DetectorConfig& cfg() const { return cfg_; }

    void save(const std::string& path) const;
    static DetectorNet load(const std::string& path);

  private:
    DetectorConfig cfg_;
    ParamStore params_;
};

// batch assembly: images fitted to the detector input (random-crop larger,
// reflect-pad smaller) and stacked as [N,1,S,S]
Tensor fit_to_size(const Tensor& image, int size, Rng* crop_rng = nullptr);

struct PretrainConfig {
    double lr = 1e-3;
    int batch = 64;
    int max_epochs = 12;
    int patience = 3;
    double val_fraction = 0.1;
    uint64_t seed = 0;
};

struct MixConfig {
    double w = 0.5;
    double lr = 5e-4;
    int batch = 64;
    int max_epochs = 8;
    int patience = 2;
    double val_fraction = 0.1;
    uint64_t seed = 0;
};

struct EpochLogRow {
    int epoch;
    double train_loss;
    double val_bacc;
};

// per-sample augmentation hook applied during training; identity when empty
using AugmentFn = std::function<Tensor(const Tensor&, Rng&)>;

struct PretrainOut {
    DetectorNet net;
    std::vector<EpochLogRow> log;
};

PretrainOut pretrain(const toydata::SplitDataset& real, const toydata::SplitDataset& fake,
                     const PretrainConfig& cfg, const DetectorConfig& net_cfg, const AugmentFn& augment);

// Mixed fine-tuning: every iteration takes one batch from the pretraining
// pool and one from the probe-paired pool, loss (1-w) L_pre + w L_probe.
PretrainOut finetune_mixed(const DetectorNet& net, const toydata::SplitDataset& pre_real,
                           const toydata::SplitDataset& pre_fake, const toydata::SplitDataset& probe_paired,
                           const MixConfig& cfg, const AugmentFn& augment);

}  // namespace probekit::detector
