#pragma once

#include <string>
#include <vector>

#include "probekit/rng.hpp"
#include "probekit/tensor.hpp"

namespace probekit::toydata {

// Procedural grayscale image families standing in for a photographic "real"
// source: 0 = gaussian blob, 1 = linear gradient, 2 = stripes, 3 = checker.
constexpr int kNumClasses = 4;

struct ClassAttrs {
    double center_x = 0, center_y = 0;  // blob
    double sigma = 0.25;
    double amplitude = 0.8;
    double baseline = 0.5;
    double angle = 0;  // gradient / stripes orientation
    double frequency = 2.5;
    double phase = 0, phase2 = 0;
};

struct ToyImage {
    Tensor pixels;  // [H, W] in [-1, 1]
    int class_id = 0;
    int label = 0;  // 0 = real, 1 = fake
    std::string source_tag = "real";
};

struct SplitDataset {
    std::vector<ToyImage> items;
    std::string split_name;
    uint64_t seed = 0;
};

ClassAttrs draw_attrs(int class_id, Rng& rng);
// Pure render of a class pattern (no noise, no clamping shenanigans).
Tensor render_class(int class_id, const ClassAttrs& attrs, int size, DType dt);

struct DataConfig {
    int image_size = 16;
    int classes = kNumClasses;
    double noise_std = 0.02;
    DType dtype = DType::F32;
};

ToyImage sample_real(int class_id, uint64_t item_seed, const DataConfig& cfg);
SplitDataset make_split(int n_per_class, uint64_t seed, const std::string& split_name, const DataConfig& cfg);

// PTAR archive with per-item tensors "img/{idx}" plus a sidecar JSON manifest.
void save_dataset(const std::string& ptar_path, const SplitDataset& ds);
SplitDataset load_dataset(const std::string& ptar_path);

}  // namespace probekit::toydata
