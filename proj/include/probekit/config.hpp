#pragma once

#include <cstdint>
#include <string>

#include "probekit/common.hpp"

namespace probekit::config {

// Line-oriented configuration: [section] headers, key = value pairs, '#'
// comments. Unknown sections or keys are hard errors.
struct RunConfig {
    struct Data {
        int image_size = 16;
        int classes = 4;
        double noise_std = 0.02;
        int n_train_per_class = 250;
        int n_test_per_class = 125;
        int n_pair_per_class = 500;
    } data;

    struct Generator {
        int T = 35;
        double beta_start = 1e-4;
        double beta_end = 0.05;
        double eta = 0.0;
        double guidance = 2.0;
        int hidden = 128;
        int time_freqs = 32;
        int train_steps = 3000;
        double lr = 1e-3;
        int batch = 32;
        double cond_drop = 0.1;
    } generator;

    struct GeneratorVariant {
        int hidden = 160;
        double beta_end = 0.04;
        int train_steps = 3000;
        double lr = 1e-3;
        int batch = 32;
        double cond_drop = 0.1;
    } generator_variant;

    struct Detector {
        double lr = 1e-3;
        int batch = 64;
        int max_epochs = 12;
        int patience = 3;
        double val_fraction = 0.1;
        int n_fake_per_class = 250;
        double w = 0.5;
        double finetune_lr = 5e-4;
        int finetune_batch = 64;
        int finetune_epochs = 8;
        int finetune_patience = 2;
        int n_probe_samples = 2000;
        std::string probe_archives;  // extra sample sources, comma separated
    } detector;

    struct Probe {
        double lambda = 1.0;
        double lr = 1e-3;
        double momentum = 0.9;
        int batch = 16;
        int n_prompts = 2000;
        int K = 5;
        int t_s = 5;
        std::string t_s_mode = "fixed";  // fixed | random
        std::string step_count = "kplus1";  // kplus1 | k
        int rounds = 1;
        int rank = 4;
    } probe;

    struct Augment {
        bool enabled = true;
        int compress_min = 50, compress_max = 100;
        double blur_min = 0.0, blur_max = 3.0;
        double noise_min = 0.0, noise_max = 55.0;
        double resize_min = 0.5, resize_max = 2.0;
        bool flip = true, rotate = true, crop = true, jitter = true;
        double crop_min_frac = 0.8;
        double brightness = 0.2;
        double contrast = 0.2;
        double pgd_eps = 4.0 / 255.0;
        double pgd_alpha = 1.0 / 255.0;
        int pgd_steps = 10;
    } augment;

    struct Eval {
        int n_eval_per_class = 125;
        int n_pgd = 32;
        int spectrum_t_probe = 1;
        int spectrum_images = 128;
    } eval;

    struct Io {
        std::string out_dir = "runs";
        std::string run_id;  // empty = derived from the config hash
        std::string precision = "f32";
        uint64_t seed = 42;
    } io;

    DType dtype() const { return io.precision == "f64" ? DType::F64 : DType::F32; }

    void validate() const;
    // FNV-1a over every semantically meaningful key (out_dir and run_id are
    // excluded; they name the location, not the experiment)
    uint64_t semantic_hash() const;
    std::string resolved_run_id() const;
};

RunConfig parse_file(const std::string& path);
RunConfig parse_text(const std::string& text);
std::string to_text(const RunConfig& cfg);

}  // namespace probekit::config
