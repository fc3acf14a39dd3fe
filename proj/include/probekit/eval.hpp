#pragma once

#include <span>
#include <string>
#include <vector>

#include "probekit/detector.hpp"
#include "probekit/diffusion.hpp"
#include "probekit/tensor.hpp"
#include "probekit/toydata.hpp"

namespace probekit::eval {

struct ScoredSample {
    double score = 0.5;  // p_fake in [0,1]
    int label = 0;       // 0 = real, 1 = fake
    std::string source_tag;
    std::string augment_desc;
};

// mean of per-class accuracies; predicted fake iff score > threshold
double balanced_accuracy(std::span<const ScoredSample> samples, double threshold = 0.5);

// ranked-sum AP with ties broken by stable original order
double average_precision(std::span<const ScoredSample> samples);

struct ReportRow {
    std::string run_id, stage, split, generator_tag, metric;
    double value = 0;
    uint64_t seed = 0;
    std::string param;
};

void write_report_csv(const std::string& path, std::span<const ReportRow> rows);
void write_report_jsonl(const std::string& path, std::span<const ReportRow> rows);

struct SweepPoint {
    std::string op;      // "blur" | "compress" | "resize" | "identity"
    double strength = 0;
};

std::vector<SweepPoint> default_sweep_grid();

// scores every (grid point, sample) pair via patch-averaged inference and
// emits one balanced-accuracy row per grid point
std::vector<ReportRow> robustness_sweep(const detector::DetectorNet& det,
                                        const toydata::SplitDataset& dataset,
                                        std::span<const SweepPoint> grid, const std::string& run_id,
                                        const std::string& stage, const std::string& generator_tag,
                                        uint64_t seed);

struct RadialProfile {
    std::vector<double> energy;  // per-ring sum of |F|^2 / (H W), so the total
                                 // matches the spatial energy (Parseval)
    std::vector<int64_t> count;  // bin population
    double total_spatial = 0;    // sum of r^2 over images
};

// |DFT|^2 binned by integer radius, averaged over the image set
RadialProfile radial_energy_profile(std::span<const Tensor> images);

// residual r = x - x_hat with x_hat the one-step denoised estimate at t_probe
RadialProfile residual_spectrum(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                                std::span<const toydata::ToyImage> images, int t_probe);

void write_profile_csv(const std::string& path, const RadialProfile& profile);

}  // namespace probekit::eval
