#include "probekit/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "probekit/augment.hpp"
#include "probekit/detector.hpp"
#include "probekit/diffusion.hpp"
#include "probekit/eval.hpp"
#include "probekit/kernels.hpp"
#include "probekit/lora.hpp"
#include "probekit/probe.hpp"

namespace probekit::pipeline {

namespace fs = std::filesystem;
using config::RunConfig;

const std::vector<StageInfo>& stage_graph() {
    static const std::vector<StageInfo> graph = {
        {"gen-data", {}},
        {"pretrain-generator", {"gen-data"}},
        {"pretrain-variant-generator", {"gen-data"}},
        {"pretrain-detector", {"gen-data", "pretrain-generator"}},
        {"probe", {"pretrain-generator", "pretrain-detector"}},
        {"export-samples", {"probe"}},
        {"finetune-detector", {"gen-data", "pretrain-detector", "export-samples"}},
        {"evaluate", {"gen-data", "pretrain-generator", "pretrain-variant-generator", "pretrain-detector"}},
        {"sweep-robustness", {"evaluate"}},
        {"analyze-spectrum", {"evaluate", "export-samples"}},
        {"run-all", {}},
    };
    return graph;
}

bool is_stage_name(const std::string& name) {
    for (const auto& s : stage_graph())
        if (s.name == name) return true;
    return false;
}

std::string explain() {
    std::ostringstream os;
    os << "stage dependency graph (acyclic):\n";
    for (const auto& s : stage_graph()) {
        os << "  " << s.name;
        if (!s.deps.empty()) {
            os << " <- ";
            for (size_t i = 0; i < s.deps.size(); ++i) os << (i ? ", " : "") << s.deps[i];
        }
        os << '\n';
    }
    os << "run-all executes every stage in listed order, looping "
          "probe/export-samples/finetune-detector when probe.rounds > 1\n";
    return os.str();
}

std::string run_dir(const RunConfig& cfg) {
    return (fs::path(cfg.io.out_dir) / cfg.resolved_run_id()).string();
}

namespace {

std::string stage_dir(const RunConfig& cfg, const std::string& stage) {
    return (fs::path(run_dir(cfg)) / stage).string();
}

// key artifact that marks a stage as complete
std::string stage_marker(const RunConfig& cfg, const std::string& stage) {
    const fs::path dir = stage_dir(cfg, stage);
    if (stage == "gen-data") return (dir / "real_train.ptar").string();
    if (stage == "pretrain-generator" || stage == "pretrain-variant-generator")
        return (dir / "generator.ptar").string();
    if (stage == "pretrain-detector" || stage == "finetune-detector") return (dir / "detector.ptar").string();
    if (stage == "probe") return (dir / "lora.ptar").string();
    if (stage == "export-samples") return (dir / "probe_samples.ptar").string();
    if (stage == "evaluate") return (dir / "report.csv").string();
    if (stage == "sweep-robustness") return (dir / "robustness.csv").string();
    if (stage == "analyze-spectrum") return (dir / "spectrum_real.csv").string();
    throw ContractError("unknown stage: " + stage);
}

void check_deps(const RunConfig& cfg, const std::string& stage) {
    std::vector<std::string> missing;
    for (const auto& s : stage_graph()) {
        if (s.name != stage) continue;
        for (const auto& dep : s.deps)
            if (!fs::exists(stage_marker(cfg, dep))) missing.push_back(dep);
    }
    if (!missing.empty()) {
        std::string msg = "stage '" + stage + "' is missing upstream artifacts from:";
        for (const auto& m : missing) msg += " " + m;
        throw DependencyError(msg);
    }
}

std::string timestamp_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return buf;
}

void update_manifest(const RunConfig& cfg, const std::string& stage,
                     const std::vector<std::string>& artifacts) {
    const fs::path path = fs::path(run_dir(cfg)) / "manifest.json";
    nlohmann::json m;
    if (fs::exists(path)) {
        std::ifstream is(path);
        m = nlohmann::json::parse(is);
    } else {
        m["run_id"] = cfg.resolved_run_id();
        m["config_hash"] = cfg.semantic_hash();
        m["version"] = "0.1.0";
        m["created"] = timestamp_now();
        m["seed"] = cfg.io.seed;
        m["precision"] = cfg.io.precision;
    }
    m["updated"] = timestamp_now();
    m["stages"][stage] = {{"artifacts", artifacts}, {"completed_at", timestamp_now()}};
    std::ofstream os(path);
    os << m.dump(2) << '\n';
}

void check_run_id_consistency(const RunConfig& cfg) {
    const fs::path path = fs::path(run_dir(cfg)) / "manifest.json";
    if (!fs::exists(path)) return;
    std::ifstream is(path);
    nlohmann::json m = nlohmann::json::parse(is);
    if (m.value("config_hash", 0ull) != cfg.semantic_hash())
        throw ConfigError("run directory '" + run_dir(cfg) +
                          "' belongs to a different configuration; refusing to overwrite");
}

toydata::DataConfig data_config(const RunConfig& cfg) {
    toydata::DataConfig dc;
    dc.image_size = cfg.data.image_size;
    dc.classes = cfg.data.classes;
    dc.noise_std = cfg.data.noise_std;
    dc.dtype = cfg.dtype();
    return dc;
}

diffusion::NoiseSchedule schedule_for(const RunConfig& cfg, bool variant) {
    return diffusion::make_schedule(cfg.generator.T, cfg.generator.beta_start,
                                    variant ? cfg.generator_variant.beta_end : cfg.generator.beta_end,
                                    cfg.generator.eta);
}

augment::AugmentPolicy policy_for(const RunConfig& cfg) {
    augment::AugmentPolicy p;
    p.compress = cfg.augment.enabled;
    p.compress_quality_min = cfg.augment.compress_min;
    p.compress_quality_max = cfg.augment.compress_max;
    p.blur = cfg.augment.enabled;
    p.blur_sigma_min = cfg.augment.blur_min;
    p.blur_sigma_max = cfg.augment.blur_max;
    p.noise = cfg.augment.enabled;
    p.noise_std_min = cfg.augment.noise_min;
    p.noise_std_max = cfg.augment.noise_max;
    p.resize_enabled = cfg.augment.enabled;
    p.resize_scale_min = cfg.augment.resize_min;
    p.resize_scale_max = cfg.augment.resize_max;
    p.flip = cfg.augment.enabled && cfg.augment.flip;
    p.rotate = cfg.augment.enabled && cfg.augment.rotate;
    p.crop = cfg.augment.enabled && cfg.augment.crop;
    p.crop_min_frac = cfg.augment.crop_min_frac;
    p.jitter = cfg.augment.enabled && cfg.augment.jitter;
    p.brightness_max = cfg.augment.brightness;
    p.contrast_range = cfg.augment.contrast;
    return p;
}

detector::AugmentFn augment_fn(const RunConfig& cfg) {
    if (!cfg.augment.enabled) return {};
    const augment::AugmentPolicy policy = policy_for(cfg);
    return [policy](const Tensor& img, Rng& rng) { return augment::random_augment(img, policy, rng); };
}

void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write: " + path);
    os << j.dump(2) << '\n';
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read: " + path);
    return nlohmann::json::parse(is);
}

// deterministic fake-image set from a generator checkpoint
toydata::SplitDataset generate_fakes(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                                     int n_per_class, double guidance, uint64_t seed,
                                     const std::string& split_name, const std::string& source_tag) {
    toydata::SplitDataset ds;
    ds.split_name = split_name;
    ds.seed = seed;
    const int classes = net.cfg().classes;
    const int size = net.cfg().image_size;
    ds.items.resize(static_cast<size_t>(classes) * n_per_class);
    kernels::parallel_for(static_cast<int64_t>(ds.items.size()), [&](int64_t i) {
        const int c = static_cast<int>(i) / n_per_class;
        const int k = static_cast<int>(i) % n_per_class;
        diffusion::SampleRequest req;
        req.class_id = c;
        req.guidance = guidance;
        req.seed = derive_seed(derive_seed(seed, split_name), "fake",
                               static_cast<uint64_t>(c) * 1000003ull + static_cast<uint64_t>(k));
        auto out = diffusion::sample(net, nullptr, sched, req);
        toydata::ToyImage img;
        img.pixels = diffusion::clamp_unit(out.x0.value().reshaped({size, size}));
        img.class_id = c;
        img.label = 1;
        img.source_tag = source_tag;
        ds.items[static_cast<size_t>(i)] = std::move(img);
    });
    return ds;
}

std::vector<eval::ScoredSample> score_mixed(const detector::DetectorNet& det,
                                            const toydata::SplitDataset& reals,
                                            const toydata::SplitDataset& fakes) {
    std::vector<eval::ScoredSample> scored(reals.items.size() + fakes.items.size());
    kernels::parallel_for(static_cast<int64_t>(scored.size()), [&](int64_t i) {
        const auto& item = static_cast<size_t>(i) < reals.items.size()
                               ? reals.items[static_cast<size_t>(i)]
                               : fakes.items[static_cast<size_t>(i) - reals.items.size()];
        eval::ScoredSample s;
        s.score = det.predict_patched(item.pixels);
        s.label = item.label;
        s.source_tag = item.source_tag;
        scored[static_cast<size_t>(i)] = std::move(s);
    });
    return scored;
}

double mean_fake_score(std::span<const eval::ScoredSample> scored) {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& s : scored)
        if (s.label == 1) {
            sum += s.score;
            ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
}

// --- stage bodies ---------------------------------------------------------

void stage_gen_data(const RunConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "gen-data");
    fs::create_directories(dir);
    const toydata::DataConfig dc = data_config(cfg);
    toydata::save_dataset((dir / "real_train.ptar").string(),
                          toydata::make_split(cfg.data.n_train_per_class, cfg.io.seed, "real-train", dc));
    toydata::save_dataset((dir / "real_test.ptar").string(),
                          toydata::make_split(cfg.data.n_test_per_class, cfg.io.seed, "real-test", dc));
    toydata::save_dataset((dir / "real_pair.ptar").string(),
                          toydata::make_split(cfg.data.n_pair_per_class, cfg.io.seed, "real-pair", dc));
    update_manifest(cfg, "gen-data", {"real_train.ptar", "real_test.ptar", "real_pair.ptar"});
}

void train_generator_stage(const RunConfig& cfg, bool variant) {
    const std::string stage = variant ? "pretrain-variant-generator" : "pretrain-generator";
    const fs::path dir = stage_dir(cfg, stage);
    fs::create_directories(dir);
    auto real = toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_train.ptar").string());

    diffusion::DenoiserConfig nc;
    nc.image_size = cfg.data.image_size;
    nc.classes = cfg.data.classes;
    nc.hidden = variant ? cfg.generator_variant.hidden : cfg.generator.hidden;
    nc.time_freqs = cfg.generator.time_freqs;
    nc.dtype = cfg.dtype();
    diffusion::DenoiserNet net =
        diffusion::DenoiserNet::init(nc, derive_seed(cfg.io.seed, variant ? "gen-variant" : "gen-base"));

    const diffusion::NoiseSchedule sched = schedule_for(cfg, variant);
    diffusion::TrainConfig tc;
    tc.steps = variant ? cfg.generator_variant.train_steps : cfg.generator.train_steps;
    tc.lr = variant ? cfg.generator_variant.lr : cfg.generator.lr;
    tc.batch = variant ? cfg.generator_variant.batch : cfg.generator.batch;
    tc.cond_drop = variant ? cfg.generator_variant.cond_drop : cfg.generator.cond_drop;
    tc.seed = derive_seed(cfg.io.seed, variant ? "gen-variant-train" : "gen-base-train");

    std::vector<Tensor> images;
    std::vector<int> class_ids;
    for (const auto& item : real.items) {
        images.push_back(item.pixels);
        class_ids.push_back(item.class_id);
    }
    auto log = diffusion::train_denoiser(net, images, class_ids, sched, tc);
    net.save((dir / "generator.ptar").string());

    nlohmann::json jlog = nlohmann::json::array();
    for (const auto& row : log) jlog.push_back({{"step", row.step}, {"loss", row.loss}});
    write_json((dir / "train_log.json").string(),
               {{"loss", jlog},
                {"T", sched.T},
                {"beta_start", sched.beta_start},
                {"beta_end", sched.beta_end},
                {"eta", sched.eta},
                {"guidance", cfg.generator.guidance},
                {"image_size", cfg.data.image_size},
                {"classes", cfg.data.classes}});
    update_manifest(cfg, stage, {"generator.ptar", "train_log.json"});
}

void stage_pretrain_detector(const RunConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "pretrain-detector");
    fs::create_directories(dir);
    auto real = toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_train.ptar").string());
    auto gen = diffusion::DenoiserNet::load(
        (fs::path(stage_dir(cfg, "pretrain-generator")) / "generator.ptar").string());
    const auto sched = schedule_for(cfg, false);

    auto fakes = generate_fakes(gen, sched, cfg.detector.n_fake_per_class, cfg.generator.guidance,
                                derive_seed(cfg.io.seed, "detector-fakes"), "fake-train", "gen_base");
    toydata::save_dataset((dir / "fakes_train.ptar").string(), fakes);

    detector::DetectorConfig nc;
    nc.input_size = cfg.data.image_size;
    nc.dtype = cfg.dtype();
    detector::PretrainConfig pc;
    pc.lr = cfg.detector.lr;
    pc.batch = cfg.detector.batch;
    pc.max_epochs = cfg.detector.max_epochs;
    pc.patience = cfg.detector.patience;
    pc.val_fraction = cfg.detector.val_fraction;
    pc.seed = derive_seed(cfg.io.seed, "detector-pretrain");

    auto out = detector::pretrain(real, fakes, pc, nc, augment_fn(cfg));
    out.net.save((dir / "detector.ptar").string());
    nlohmann::json jlog = nlohmann::json::array();
    for (const auto& row : out.log)
        jlog.push_back({{"epoch", row.epoch}, {"train_loss", row.train_loss}, {"val_bacc", row.val_bacc}});
    write_json((dir / "train_log.json").string(), {{"epochs", jlog}});
    update_manifest(cfg, "pretrain-detector", {"detector.ptar", "fakes_train.ptar", "train_log.json"});
}

probe::ProbeConfig probe_config(const RunConfig& cfg, uint64_t seed) {
    probe::ProbeConfig pc;
    pc.lambda = cfg.probe.lambda;
    pc.lr = cfg.probe.lr;
    pc.momentum = cfg.probe.momentum;
    pc.batch = cfg.probe.batch;
    pc.n_prompts = cfg.probe.n_prompts;
    pc.K = cfg.probe.K;
    pc.t_s = cfg.probe.t_s;
    pc.t_s_mode = cfg.probe.t_s_mode == "random" ? probe::TsMode::RandomPerBatch : probe::TsMode::Fixed;
    pc.step_count = cfg.probe.step_count == "k" ? probe::StepCount::K : probe::StepCount::KPlusOne;
    pc.rounds = cfg.probe.rounds;
    pc.rank = cfg.probe.rank;
    pc.guidance = cfg.generator.guidance;
    pc.seed = seed;
    return pc;
}

std::string round_suffix(int round) { return round <= 1 ? "" : "-round" + std::to_string(round); }

// critic checkpoint for a probing round: the freshest detector available
std::string critic_path(const RunConfig& cfg, int round) {
    if (round > 1) {
        const fs::path prev = fs::path(stage_dir(cfg, "finetune-detector" + round_suffix(round - 1))) /
                              "detector.ptar";
        if (!fs::exists(prev))
            throw DependencyError("probe round " + std::to_string(round) +
                                  " needs finetune-detector" + round_suffix(round - 1));
        return prev.string();
    }
    return (fs::path(stage_dir(cfg, "pretrain-detector")) / "detector.ptar").string();
}

void stage_probe(const RunConfig& cfg, int round) {
    const std::string stage = "probe" + round_suffix(round);
    const fs::path dir = stage_dir(cfg, stage);
    fs::create_directories(dir);
    auto gen = diffusion::DenoiserNet::load(
        (fs::path(stage_dir(cfg, "pretrain-generator")) / "generator.ptar").string());
    auto det = detector::DetectorNet::load(critic_path(cfg, round));
    const auto sched = schedule_for(cfg, false);
    auto gamma = probe::PerceptualExtractor::init(cfg.data.image_size, cfg.dtype(),
                                                  derive_seed(cfg.io.seed, "perceptual"));

    auto result = probe::run_probe(gen, sched, det, gamma,
                                   probe_config(cfg, derive_seed(cfg.io.seed, "probe-round",
                                                                 static_cast<uint64_t>(round))));

    result.lora.save((dir / "lora.ptar").string());
    toydata::save_dataset((dir / "train_samples.ptar").string(), result.train_samples);
    nlohmann::json jreq = nlohmann::json::array();
    for (const auto& r : result.requests) jreq.push_back({{"seed", r.seed}, {"class_id", r.class_id}});
    write_json((dir / "requests.json").string(), {{"requests", jreq}});
    nlohmann::json jlog = nlohmann::json::array();
    for (const auto& row : result.log)
        jlog.push_back({{"step", row.step}, {"probe", row.probe}, {"perc", row.perc}, {"total", row.total}});
    write_json((dir / "probe_log.json").string(), {{"steps", jlog}});
    update_manifest(cfg, stage, {"lora.ptar", "train_samples.ptar", "requests.json", "probe_log.json"});

    if (result.diverged_at_step)
        throw NumericError("probe loss became non-finite at step " +
                           std::to_string(*result.diverged_at_step) +
                           "; last finite adapter checkpoint saved to " + (dir / "lora.ptar").string());
}

void stage_export_samples(const RunConfig& cfg, int round) {
    const std::string stage = "export-samples" + round_suffix(round);
    const std::string probe_stage = "probe" + round_suffix(round);
    const fs::path dir = stage_dir(cfg, stage);
    fs::create_directories(dir);
    auto gen = diffusion::DenoiserNet::load(
        (fs::path(stage_dir(cfg, "pretrain-generator")) / "generator.ptar").string());
    auto det = detector::DetectorNet::load(critic_path(cfg, round));
    auto lp = lora::LoraParams::load((fs::path(stage_dir(cfg, probe_stage)) / "lora.ptar").string());
    const auto sched = schedule_for(cfg, false);
    gen.params().freeze_all();

    const nlohmann::json jreq = read_json((fs::path(stage_dir(cfg, probe_stage)) / "requests.json").string());
    std::vector<probe::ProbeRequestInfo> requests;
    for (const auto& r : jreq.at("requests"))
        requests.push_back({r.at("seed").get<uint64_t>(), r.at("class_id").get<int>()});

    auto samples = probe::regenerate_probe_samples(gen, sched, &lp, requests, cfg.generator.guidance, "probe");
    toydata::save_dataset((dir / "probe_samples.ptar").string(), samples);

    // export-time detector scores, one per sample
    std::vector<double> scores(samples.items.size());
    kernels::parallel_for(static_cast<int64_t>(samples.items.size()),
                          [&](int64_t i) { scores[static_cast<size_t>(i)] = det.predict(samples.items[static_cast<size_t>(i)].pixels); });
    nlohmann::json jmeta = nlohmann::json::array();
    for (size_t i = 0; i < samples.items.size(); ++i)
        jmeta.push_back({{"seed", requests[i].seed},
                         {"class_id", requests[i].class_id},
                         {"detector_score", scores[i]}});
    write_json((dir / "export_manifest.json").string(), {{"samples", jmeta}});
    update_manifest(cfg, stage, {"probe_samples.ptar", "export_manifest.json"});
}

void stage_finetune_detector(const RunConfig& cfg, int round) {
    const std::string stage = "finetune-detector" + round_suffix(round);
    const fs::path dir = stage_dir(cfg, stage);
    fs::create_directories(dir);
    auto det = detector::DetectorNet::load(critic_path(cfg, round));
    auto real_train =
        toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_train.ptar").string());
    auto real_pair = toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_pair.ptar").string());
    auto fakes_train = toydata::load_dataset(
        (fs::path(stage_dir(cfg, "pretrain-detector")) / "fakes_train.ptar").string());

    // probe-sample sources: this round's export plus configured extras
    std::vector<toydata::SplitDataset> sources;
    sources.push_back(toydata::load_dataset(
        (fs::path(stage_dir(cfg, "export-samples" + round_suffix(round))) / "probe_samples.ptar").string()));
    if (!cfg.detector.probe_archives.empty()) {
        std::istringstream is(cfg.detector.probe_archives);
        std::string path;
        while (std::getline(is, path, ',')) {
            if (!path.empty()) sources.push_back(toydata::load_dataset(path));
        }
    }
    auto probe_fakes = aggregate_samples(sources, cfg.detector.n_probe_samples,
                                         derive_seed(cfg.io.seed, "aggregate", static_cast<uint64_t>(round)));

    // pair with an equal number of fresh reals, drawn from a split never used
    // by pretraining
    if (real_pair.items.size() < probe_fakes.items.size())
        throw ContractError("finetune-detector: real_pair split smaller than the probe sample count");
    toydata::SplitDataset paired;
    paired.split_name = "probe_paired";
    paired.seed = cfg.io.seed;
    paired.items = probe_fakes.items;
    for (size_t i = 0; i < probe_fakes.items.size(); ++i) paired.items.push_back(real_pair.items[i]);

    detector::MixConfig mc;
    mc.w = cfg.detector.w;
    mc.lr = cfg.detector.finetune_lr;
    mc.batch = cfg.detector.finetune_batch;
    mc.max_epochs = cfg.detector.finetune_epochs;
    mc.patience = cfg.detector.finetune_patience;
    mc.val_fraction = cfg.detector.val_fraction;
    mc.seed = derive_seed(cfg.io.seed, "detector-finetune", static_cast<uint64_t>(round));

    auto out = detector::finetune_mixed(det, real_train, fakes_train, paired, mc, augment_fn(cfg));
    out.net.save((dir / "detector.ptar").string());
    nlohmann::json jlog = nlohmann::json::array();
    for (const auto& row : out.log)
        jlog.push_back({{"epoch", row.epoch}, {"train_loss", row.train_loss}, {"val_bacc", row.val_bacc}});
    write_json((dir / "train_log.json").string(), {{"epochs", jlog}});
    update_manifest(cfg, stage, {"detector.ptar", "train_log.json"});
}

// final fine-tuned checkpoint if any round produced one
std::string latest_detector_path(const RunConfig& cfg, std::string* stage_label) {
    for (int round = cfg.probe.rounds; round >= 1; --round) {
        const fs::path p = fs::path(stage_dir(cfg, "finetune-detector" + round_suffix(round))) / "detector.ptar";
        if (fs::exists(p)) {
            *stage_label = "finetune";
            return p.string();
        }
    }
    *stage_label = "pretrain";
    return (fs::path(stage_dir(cfg, "pretrain-detector")) / "detector.ptar").string();
}

void stage_evaluate(const RunConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "evaluate");
    fs::create_directories(dir);
    const std::string run_id = cfg.resolved_run_id();
    auto real_test = toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_test.ptar").string());
    auto gen_base = diffusion::DenoiserNet::load(
        (fs::path(stage_dir(cfg, "pretrain-generator")) / "generator.ptar").string());
    auto gen_variant = diffusion::DenoiserNet::load(
        (fs::path(stage_dir(cfg, "pretrain-variant-generator")) / "generator.ptar").string());

    auto fakes_base = generate_fakes(gen_base, schedule_for(cfg, false), cfg.eval.n_eval_per_class,
                                     cfg.generator.guidance, derive_seed(cfg.io.seed, "eval-fakes-base"),
                                     "eval-fake-base", "gen_base");
    auto fakes_variant = generate_fakes(gen_variant, schedule_for(cfg, true), cfg.eval.n_eval_per_class,
                                        cfg.generator.guidance, derive_seed(cfg.io.seed, "eval-fakes-variant"),
                                        "eval-fake-variant", "gen_variant");
    toydata::save_dataset((dir / "fakes_base.ptar").string(), fakes_base);
    toydata::save_dataset((dir / "fakes_variant.ptar").string(), fakes_variant);

    std::vector<std::pair<std::string, std::string>> checkpoints;
    checkpoints.emplace_back("pretrain",
                             (fs::path(stage_dir(cfg, "pretrain-detector")) / "detector.ptar").string());
    {
        std::string label;
        const std::string latest = latest_detector_path(cfg, &label);
        if (label == "finetune") checkpoints.emplace_back("finetune", latest);
    }

    std::vector<eval::ReportRow> rows;
    for (const auto& [stage_label, path] : checkpoints) {
        auto det = detector::DetectorNet::load(path);
        for (const auto* fakes : {&fakes_base, &fakes_variant}) {
            auto scored = score_mixed(det, real_test, *fakes);
            const std::string tag = fakes->items.front().source_tag;
            rows.push_back({run_id, stage_label, "test", tag, "bacc", eval::balanced_accuracy(scored),
                            cfg.io.seed, ""});
            rows.push_back({run_id, stage_label, "test", tag, "ap", eval::average_precision(scored),
                            cfg.io.seed, ""});
            rows.push_back({run_id, stage_label, "test", tag, "score_mean", mean_fake_score(scored),
                            cfg.io.seed, ""});
        }
    }

    // adversarial baselines, scored with the freshest detector
    if (cfg.eval.n_pgd > 0) {
        std::string stage_label;
        auto det = detector::DetectorNet::load(latest_detector_path(cfg, &stage_label));
        const auto sched = schedule_for(cfg, false);
        augment::PgdConfig pgd;
        pgd.eps = cfg.augment.pgd_eps;
        pgd.alpha = cfg.augment.pgd_alpha;
        pgd.steps = cfg.augment.pgd_steps;
        const int n = std::min<int>(cfg.eval.n_pgd, static_cast<int>(fakes_base.items.size()));

        std::vector<double> pixel_scores(static_cast<size_t>(n)), latent_scores(static_cast<size_t>(n));
        kernels::parallel_for(n, [&](int64_t i) {
            Tensor adv = augment::pgd_pixel(fakes_base.items[static_cast<size_t>(i)].pixels, det, pgd);
            pixel_scores[static_cast<size_t>(i)] = det.predict(adv);
            diffusion::SampleRequest req;
            req.class_id = static_cast<int>(i) % cfg.data.classes;
            req.guidance = cfg.generator.guidance;
            req.seed = derive_seed(cfg.io.seed, "pgd-latent", static_cast<uint64_t>(i));
            Tensor adv_latent = augment::pgd_latent(gen_base, sched, det, req, pgd);
            latent_scores[static_cast<size_t>(i)] = det.predict(adv_latent);
        });
        auto mean = [](const std::vector<double>& v) {
            return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        };
        std::ostringstream param;
        param << "eps:" << pgd.eps << ";steps:" << pgd.steps;
        rows.push_back({run_id, stage_label, "test", "pgd_pixel", "score_mean", mean(pixel_scores),
                        cfg.io.seed, param.str()});
        rows.push_back({run_id, stage_label, "test", "pgd_latent", "score_mean", mean(latent_scores),
                        cfg.io.seed, param.str()});
    }

    eval::write_report_csv((dir / "report.csv").string(), rows);
    eval::write_report_jsonl((dir / "report.jsonl").string(), rows);
    update_manifest(cfg, "evaluate",
                    {"report.csv", "report.jsonl", "fakes_base.ptar", "fakes_variant.ptar"});
}

void stage_sweep_robustness(const RunConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "sweep-robustness");
    fs::create_directories(dir);
    std::string stage_label;
    auto det = detector::DetectorNet::load(latest_detector_path(cfg, &stage_label));
    auto real_test = toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_test.ptar").string());
    auto fakes_base =
        toydata::load_dataset((fs::path(stage_dir(cfg, "evaluate")) / "fakes_base.ptar").string());

    toydata::SplitDataset mixed;
    mixed.split_name = "robustness";
    mixed.seed = cfg.io.seed;
    mixed.items = real_test.items;
    mixed.items.insert(mixed.items.end(), fakes_base.items.begin(), fakes_base.items.end());

    auto rows = eval::robustness_sweep(det, mixed, eval::default_sweep_grid(), cfg.resolved_run_id(),
                                       stage_label, "gen_base", cfg.io.seed);
    eval::write_report_csv((dir / "robustness.csv").string(), rows);
    eval::write_report_jsonl((dir / "robustness.jsonl").string(), rows);
    update_manifest(cfg, "sweep-robustness", {"robustness.csv", "robustness.jsonl"});
}

void stage_analyze_spectrum(const RunConfig& cfg) {
    const fs::path dir = stage_dir(cfg, "analyze-spectrum");
    fs::create_directories(dir);
    auto gen = diffusion::DenoiserNet::load(
        (fs::path(stage_dir(cfg, "pretrain-generator")) / "generator.ptar").string());
    const auto sched = schedule_for(cfg, false);

    auto take = [&](toydata::SplitDataset ds) {
        if (static_cast<int>(ds.items.size()) > cfg.eval.spectrum_images)
            ds.items.resize(static_cast<size_t>(cfg.eval.spectrum_images));
        return ds;
    };
    const auto real = take(
        toydata::load_dataset((fs::path(stage_dir(cfg, "gen-data")) / "real_test.ptar").string()));
    const auto base = take(
        toydata::load_dataset((fs::path(stage_dir(cfg, "evaluate")) / "fakes_base.ptar").string()));
    const auto variant = take(
        toydata::load_dataset((fs::path(stage_dir(cfg, "evaluate")) / "fakes_variant.ptar").string()));
    const auto probe_samples = take(toydata::load_dataset(
        (fs::path(stage_dir(cfg, "export-samples" + round_suffix(cfg.probe.rounds))) / "probe_samples.ptar")
            .string()));

    const std::vector<std::pair<std::string, const toydata::SplitDataset*>> sets = {
        {"real", &real}, {"gen_base", &base}, {"gen_variant", &variant}, {"probe", &probe_samples}};
    std::vector<std::string> artifacts;
    for (const auto& [tag, ds] : sets) {
        auto profile = eval::residual_spectrum(gen, sched, ds->items, cfg.eval.spectrum_t_probe);
        const std::string name = "spectrum_" + tag + ".csv";
        eval::write_profile_csv((dir / name).string(), profile);
        artifacts.push_back(name);
    }
    update_manifest(cfg, "analyze-spectrum", artifacts);
}

}  // namespace

toydata::SplitDataset aggregate_samples(const std::vector<toydata::SplitDataset>& sources, int n_total,
                                        uint64_t seed) {
    if (sources.empty()) throw ContractError("aggregate_samples: no sources");
    if (n_total < 1) throw ContractError("aggregate_samples: n_total must be >= 1");
    const int n_sources = static_cast<int>(sources.size());
    toydata::SplitDataset out;
    out.split_name = "aggregate";
    out.seed = seed;
    for (int s = 0; s < n_sources; ++s) {
        // equal shares; the remainder goes to the earlier sources
        int quota = n_total / n_sources + (s < n_total % n_sources ? 1 : 0);
        const auto& src = sources[static_cast<size_t>(s)];
        if (static_cast<int>(src.items.size()) < quota)
            throw ContractError("aggregate_samples: source " + std::to_string(s) + " has " +
                                std::to_string(src.items.size()) + " samples, needs " + std::to_string(quota));
        // seeded subsample without replacement
        std::vector<size_t> order(src.items.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng = Rng::seeded(derive_seed(seed, "source", static_cast<uint64_t>(s)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
        for (int k = 0; k < quota; ++k) out.items.push_back(src.items[order[static_cast<size_t>(k)]]);
    }
    // seeded shuffle of the union
    Rng rng = Rng::seeded(derive_seed(seed, "shuffle"));
    for (size_t i = out.items.size(); i > 1; --i)
        std::swap(out.items[i - 1], out.items[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    return out;
}

void run_stage(const RunConfig& cfg, const std::string& stage) {
    cfg.validate();
    if (!is_stage_name(stage)) throw ConfigError("unknown stage: " + stage);
    fs::create_directories(run_dir(cfg));
    check_run_id_consistency(cfg);

    if (stage == "run-all") {
        run_stage(cfg, "gen-data");
        run_stage(cfg, "pretrain-generator");
        run_stage(cfg, "pretrain-variant-generator");
        run_stage(cfg, "pretrain-detector");
        for (int round = 1; round <= cfg.probe.rounds; ++round) {
            stage_probe(cfg, round);
            stage_export_samples(cfg, round);
            stage_finetune_detector(cfg, round);
        }
        run_stage(cfg, "evaluate");
        run_stage(cfg, "sweep-robustness");
        run_stage(cfg, "analyze-spectrum");
        return;
    }

    check_deps(cfg, stage);
    if (stage == "gen-data")
        stage_gen_data(cfg);
    else if (stage == "pretrain-generator")
        train_generator_stage(cfg, false);
    else if (stage == "pretrain-variant-generator")
        train_generator_stage(cfg, true);
    else if (stage == "pretrain-detector")
        stage_pretrain_detector(cfg);
    else if (stage == "probe")
        stage_probe(cfg, 1);
    else if (stage == "export-samples")
        stage_export_samples(cfg, 1);
    else if (stage == "finetune-detector")
        stage_finetune_detector(cfg, 1);
    else if (stage == "evaluate")
        stage_evaluate(cfg);
    else if (stage == "sweep-robustness")
        stage_sweep_robustness(cfg);
    else if (stage == "analyze-spectrum")
        stage_analyze_spectrum(cfg);
}

}  // namespace probekit::pipeline
