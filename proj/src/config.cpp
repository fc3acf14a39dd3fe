#include "probekit/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace probekit::config {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int parse_int(const std::string& v, const std::string& where) {
    try {
        size_t pos = 0;
        const int r = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("invalid integer for " + where + ": '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& v, const std::string& where) {
    try {
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("invalid unsigned integer for " + where + ": '" + v + "'");
    }
}

double parse_double(const std::string& v, const std::string& where) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size() || !std::isfinite(r)) throw std::invalid_argument("");
        return r;
    } catch (...) {
        throw ConfigError("invalid number for " + where + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& v, const std::string& where) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("invalid boolean for " + where + ": '" + v + "'");
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct KeyDef {
    std::string section, key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

std::vector<KeyDef> key_table() {
    std::vector<KeyDef> t;

    // data
    t.push_back({"data", "image_size", [](const RunConfig& c) { return std::to_string(c.data.image_size); },
                 [](RunConfig& c, const std::string& v) { c.data.image_size = parse_int(v, "data.image_size"); }});
    t.push_back({"data", "classes", [](const RunConfig& c) { return std::to_string(c.data.classes); },
                 [](RunConfig& c, const std::string& v) { c.data.classes = parse_int(v, "data.classes"); }});
    t.push_back({"data", "noise_std", [](const RunConfig& c) { return fmt_double(c.data.noise_std); },
                 [](RunConfig& c, const std::string& v) { c.data.noise_std = parse_double(v, "data.noise_std"); }});
    t.push_back({"data", "n_train_per_class",
                 [](const RunConfig& c) { return std::to_string(c.data.n_train_per_class); },
                 [](RunConfig& c, const std::string& v) {
                     c.data.n_train_per_class = parse_int(v, "data.n_train_per_class");
                 }});
    t.push_back({"data", "n_test_per_class",
                 [](const RunConfig& c) { return std::to_string(c.data.n_test_per_class); },
                 [](RunConfig& c, const std::string& v) {
                     c.data.n_test_per_class = parse_int(v, "data.n_test_per_class");
                 }});
    t.push_back({"data", "n_pair_per_class",
                 [](const RunConfig& c) { return std::to_string(c.data.n_pair_per_class); },
                 [](RunConfig& c, const std::string& v) {
                     c.data.n_pair_per_class = parse_int(v, "data.n_pair_per_class");
                 }});

    // generator
    t.push_back({"generator", "T", [](const RunConfig& c) { return std::to_string(c.generator.T); },
                 [](RunConfig& c, const std::string& v) { c.generator.T = parse_int(v, "generator.T"); }});
    t.push_back({"generator", "beta_start", [](const RunConfig& c) { return fmt_double(c.generator.beta_start); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator.beta_start = parse_double(v, "generator.beta_start");
                 }});
    t.push_back({"generator", "beta_end", [](const RunConfig& c) { return fmt_double(c.generator.beta_end); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator.beta_end = parse_double(v, "generator.beta_end");
                 }});
    t.push_back({"generator", "eta", [](const RunConfig& c) { return fmt_double(c.generator.eta); },
                 [](RunConfig& c, const std::string& v) { c.generator.eta = parse_double(v, "generator.eta"); }});
    t.push_back({"generator", "guidance", [](const RunConfig& c) { return fmt_double(c.generator.guidance); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator.guidance = parse_double(v, "generator.guidance");
                 }});
    t.push_back({"generator", "hidden", [](const RunConfig& c) { return std::to_string(c.generator.hidden); },
                 [](RunConfig& c, const std::string& v) { c.generator.hidden = parse_int(v, "generator.hidden"); }});
    t.push_back({"generator", "time_freqs",
                 [](const RunConfig& c) { return std::to_string(c.generator.time_freqs); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator.time_freqs = parse_int(v, "generator.time_freqs");
                 }});
    t.push_back({"generator", "train_steps",
                 [](const RunConfig& c) { return std::to_string(c.generator.train_steps); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator.train_steps = parse_int(v, "generator.train_steps");
                 }});
    t.push_back({"generator", "lr", [](const RunConfig& c) { return fmt_double(c.generator.lr); },
                 [](RunConfig& c, const std::string& v) { c.generator.lr = parse_double(v, "generator.lr"); }});
    t.push_back({"generator", "batch", [](const RunConfig& c) { return std::to_string(c.generator.batch); },
                 [](RunConfig& c, const std::string& v) { c.generator.batch = parse_int(v, "generator.batch"); }});
    t.push_back({"generator", "cond_drop", [](const RunConfig& c) { return fmt_double(c.generator.cond_drop); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator.cond_drop = parse_double(v, "generator.cond_drop");
                 }});

    // generator_variant
    t.push_back({"generator_variant", "hidden",
                 [](const RunConfig& c) { return std::to_string(c.generator_variant.hidden); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator_variant.hidden = parse_int(v, "generator_variant.hidden");
                 }});
    t.push_back({"generator_variant", "beta_end",
                 [](const RunConfig& c) { return fmt_double(c.generator_variant.beta_end); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator_variant.beta_end = parse_double(v, "generator_variant.beta_end");
                 }});
    t.push_back({"generator_variant", "train_steps",
                 [](const RunConfig& c) { return std::to_string(c.generator_variant.train_steps); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator_variant.train_steps = parse_int(v, "generator_variant.train_steps");
                 }});
    t.push_back({"generator_variant", "lr",
                 [](const RunConfig& c) { return fmt_double(c.generator_variant.lr); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator_variant.lr = parse_double(v, "generator_variant.lr");
                 }});
    t.push_back({"generator_variant", "batch",
                 [](const RunConfig& c) { return std::to_string(c.generator_variant.batch); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator_variant.batch = parse_int(v, "generator_variant.batch");
                 }});
    t.push_back({"generator_variant", "cond_drop",
                 [](const RunConfig& c) { return fmt_double(c.generator_variant.cond_drop); },
                 [](RunConfig& c, const std::string& v) {
                     c.generator_variant.cond_drop = parse_double(v, "generator_variant.cond_drop");
                 }});

    // detector
    t.push_back({"detector", "lr", [](const RunConfig& c) { return fmt_double(c.detector.lr); },
                 [](RunConfig& c, const std::string& v) { c.detector.lr = parse_double(v, "detector.lr"); }});
    t.push_back({"detector", "batch", [](const RunConfig& c) { return std::to_string(c.detector.batch); },
                 [](RunConfig& c, const std::string& v) { c.detector.batch = parse_int(v, "detector.batch"); }});
    t.push_back({"detector", "max_epochs", [](const RunConfig& c) { return std::to_string(c.detector.max_epochs); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.max_epochs = parse_int(v, "detector.max_epochs");
                 }});
    t.push_back({"detector", "patience", [](const RunConfig& c) { return std::to_string(c.detector.patience); },
                 [](RunConfig& c, const std::string& v) { c.detector.patience = parse_int(v, "detector.patience"); }});
    t.push_back({"detector", "val_fraction", [](const RunConfig& c) { return fmt_double(c.detector.val_fraction); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.val_fraction = parse_double(v, "detector.val_fraction");
                 }});
    t.push_back({"detector", "n_fake_per_class",
                 [](const RunConfig& c) { return std::to_string(c.detector.n_fake_per_class); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.n_fake_per_class = parse_int(v, "detector.n_fake_per_class");
                 }});
    t.push_back({"detector", "w", [](const RunConfig& c) { return fmt_double(c.detector.w); },
                 [](RunConfig& c, const std::string& v) { c.detector.w = parse_double(v, "detector.w"); }});
    t.push_back({"detector", "finetune_lr", [](const RunConfig& c) { return fmt_double(c.detector.finetune_lr); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.finetune_lr = parse_double(v, "detector.finetune_lr");
                 }});
    t.push_back({"detector", "finetune_batch",
                 [](const RunConfig& c) { return std::to_string(c.detector.finetune_batch); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.finetune_batch = parse_int(v, "detector.finetune_batch");
                 }});
    t.push_back({"detector", "finetune_epochs",
                 [](const RunConfig& c) { return std::to_string(c.detector.finetune_epochs); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.finetune_epochs = parse_int(v, "detector.finetune_epochs");
                 }});
    t.push_back({"detector", "finetune_patience",
                 [](const RunConfig& c) { return std::to_string(c.detector.finetune_patience); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.finetune_patience = parse_int(v, "detector.finetune_patience");
                 }});
    t.push_back({"detector", "n_probe_samples",
                 [](const RunConfig& c) { return std::to_string(c.detector.n_probe_samples); },
                 [](RunConfig& c, const std::string& v) {
                     c.detector.n_probe_samples = parse_int(v, "detector.n_probe_samples");
                 }});
    t.push_back({"detector", "probe_archives", [](const RunConfig& c) { return c.detector.probe_archives; },
                 [](RunConfig& c, const std::string& v) { c.detector.probe_archives = v; }});

    // probe
    t.push_back({"probe", "lambda", [](const RunConfig& c) { return fmt_double(c.probe.lambda); },
                 [](RunConfig& c, const std::string& v) { c.probe.lambda = parse_double(v, "probe.lambda"); }});
    t.push_back({"probe", "lr", [](const RunConfig& c) { return fmt_double(c.probe.lr); },
                 [](RunConfig& c, const std::string& v) { c.probe.lr = parse_double(v, "probe.lr"); }});
    t.push_back({"probe", "momentum", [](const RunConfig& c) { return fmt_double(c.probe.momentum); },
                 [](RunConfig& c, const std::string& v) { c.probe.momentum = parse_double(v, "probe.momentum"); }});
    t.push_back({"probe", "batch", [](const RunConfig& c) { return std::to_string(c.probe.batch); },
                 [](RunConfig& c, const std::string& v) { c.probe.batch = parse_int(v, "probe.batch"); }});
    t.push_back({"probe", "n_prompts", [](const RunConfig& c) { return std::to_string(c.probe.n_prompts); },
                 [](RunConfig& c, const std::string& v) { c.probe.n_prompts = parse_int(v, "probe.n_prompts"); }});
    t.push_back({"probe", "K", [](const RunConfig& c) { return std::to_string(c.probe.K); },
                 [](RunConfig& c, const std::string& v) { c.probe.K = parse_int(v, "probe.K"); }});
    t.push_back({"probe", "t_s", [](const RunConfig& c) { return std::to_string(c.probe.t_s); },
                 [](RunConfig& c, const std::string& v) { c.probe.t_s = parse_int(v, "probe.t_s"); }});
    t.push_back({"probe", "t_s_mode", [](const RunConfig& c) { return c.probe.t_s_mode; },
                 [](RunConfig& c, const std::string& v) { c.probe.t_s_mode = v; }});
    t.push_back({"probe", "step_count", [](const RunConfig& c) { return c.probe.step_count; },
                 [](RunConfig& c, const std::string& v) { c.probe.step_count = v; }});
    t.push_back({"probe", "rounds", [](const RunConfig& c) { return std::to_string(c.probe.rounds); },
                 [](RunConfig& c, const std::string& v) { c.probe.rounds = parse_int(v, "probe.rounds"); }});
    t.push_back({"probe", "rank", [](const RunConfig& c) { return std::to_string(c.probe.rank); },
                 [](RunConfig& c, const std::string& v) { c.probe.rank = parse_int(v, "probe.rank"); }});

    // augment
    t.push_back({"augment", "enabled", [](const RunConfig& c) { return c.augment.enabled ? "true" : "false"; },
                 [](RunConfig& c, const std::string& v) { c.augment.enabled = parse_bool(v, "augment.enabled"); }});
    t.push_back({"augment", "compress_min", [](const RunConfig& c) { return std::to_string(c.augment.compress_min); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.compress_min = parse_int(v, "augment.compress_min");
                 }});
    t.push_back({"augment", "compress_max", [](const RunConfig& c) { return std::to_string(c.augment.compress_max); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.compress_max = parse_int(v, "augment.compress_max");
                 }});
    t.push_back({"augment", "blur_min", [](const RunConfig& c) { return fmt_double(c.augment.blur_min); },
                 [](RunConfig& c, const std::string& v) { c.augment.blur_min = parse_double(v, "augment.blur_min"); }});
    t.push_back({"augment", "blur_max", [](const RunConfig& c) { return fmt_double(c.augment.blur_max); },
                 [](RunConfig& c, const std::string& v) { c.augment.blur_max = parse_double(v, "augment.blur_max"); }});
    t.push_back({"augment", "noise_min", [](const RunConfig& c) { return fmt_double(c.augment.noise_min); },
                 [](RunConfig& c, const std::string& v) { c.augment.noise_min = parse_double(v, "augment.noise_min"); }});
    t.push_back({"augment", "noise_max", [](const RunConfig& c) { return fmt_double(c.augment.noise_max); },
                 [](RunConfig& c, const std::string& v) { c.augment.noise_max = parse_double(v, "augment.noise_max"); }});
    t.push_back({"augment", "resize_min", [](const RunConfig& c) { return fmt_double(c.augment.resize_min); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.resize_min = parse_double(v, "augment.resize_min");
                 }});
    t.push_back({"augment", "resize_max", [](const RunConfig& c) { return fmt_double(c.augment.resize_max); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.resize_max = parse_double(v, "augment.resize_max");
                 }});
    t.push_back({"augment", "flip", [](const RunConfig& c) { return c.augment.flip ? "true" : "false"; },
                 [](RunConfig& c, const std::string& v) { c.augment.flip = parse_bool(v, "augment.flip"); }});
    t.push_back({"augment", "rotate", [](const RunConfig& c) { return c.augment.rotate ? "true" : "false"; },
                 [](RunConfig& c, const std::string& v) { c.augment.rotate = parse_bool(v, "augment.rotate"); }});
    t.push_back({"augment", "crop", [](const RunConfig& c) { return c.augment.crop ? "true" : "false"; },
                 [](RunConfig& c, const std::string& v) { c.augment.crop = parse_bool(v, "augment.crop"); }});
    t.push_back({"augment", "jitter", [](const RunConfig& c) { return c.augment.jitter ? "true" : "false"; },
                 [](RunConfig& c, const std::string& v) { c.augment.jitter = parse_bool(v, "augment.jitter"); }});
    t.push_back({"augment", "crop_min_frac", [](const RunConfig& c) { return fmt_double(c.augment.crop_min_frac); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.crop_min_frac = parse_double(v, "augment.crop_min_frac");
                 }});
    t.push_back({"augment", "brightness", [](const RunConfig& c) { return fmt_double(c.augment.brightness); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.brightness = parse_double(v, "augment.brightness");
                 }});
    t.push_back({"augment", "contrast", [](const RunConfig& c) { return fmt_double(c.augment.contrast); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.contrast = parse_double(v, "augment.contrast");
                 }});
    t.push_back({"augment", "pgd_eps", [](const RunConfig& c) { return fmt_double(c.augment.pgd_eps); },
                 [](RunConfig& c, const std::string& v) { c.augment.pgd_eps = parse_double(v, "augment.pgd_eps"); }});
    t.push_back({"augment", "pgd_alpha", [](const RunConfig& c) { return fmt_double(c.augment.pgd_alpha); },
                 [](RunConfig& c, const std::string& v) {
                     c.augment.pgd_alpha = parse_double(v, "augment.pgd_alpha");
                 }});
    t.push_back({"augment", "pgd_steps", [](const RunConfig& c) { return std::to_string(c.augment.pgd_steps); },
                 [](RunConfig& c, const std::string& v) { c.augment.pgd_steps = parse_int(v, "augment.pgd_steps"); }});

    // eval
    t.push_back({"eval", "n_eval_per_class",
                 [](const RunConfig& c) { return std::to_string(c.eval.n_eval_per_class); },
                 [](RunConfig& c, const std::string& v) {
                     c.eval.n_eval_per_class = parse_int(v, "eval.n_eval_per_class");
                 }});
    t.push_back({"eval", "n_pgd", [](const RunConfig& c) { return std::to_string(c.eval.n_pgd); },
                 [](RunConfig& c, const std::string& v) { c.eval.n_pgd = parse_int(v, "eval.n_pgd"); }});
    t.push_back({"eval", "spectrum_t_probe",
                 [](const RunConfig& c) { return std::to_string(c.eval.spectrum_t_probe); },
                 [](RunConfig& c, const std::string& v) {
                     c.eval.spectrum_t_probe = parse_int(v, "eval.spectrum_t_probe");
                 }});
    t.push_back({"eval", "spectrum_images",
                 [](const RunConfig& c) { return std::to_string(c.eval.spectrum_images); },
                 [](RunConfig& c, const std::string& v) {
                     c.eval.spectrum_images = parse_int(v, "eval.spectrum_images");
                 }});

    // io
    t.push_back({"io", "out_dir", [](const RunConfig& c) { return c.io.out_dir; },
                 [](RunConfig& c, const std::string& v) { c.io.out_dir = v; }});
    t.push_back({"io", "run_id", [](const RunConfig& c) { return c.io.run_id; },
                 [](RunConfig& c, const std::string& v) { c.io.run_id = v; }});
    t.push_back({"io", "precision", [](const RunConfig& c) { return c.io.precision; },
                 [](RunConfig& c, const std::string& v) { c.io.precision = v; }});
    t.push_back({"io", "seed", [](const RunConfig& c) { return std::to_string(c.io.seed); },
                 [](RunConfig& c, const std::string& v) { c.io.seed = parse_u64(v, "io.seed"); }});
    return t;
}

const std::vector<KeyDef>& table() {
    static const std::vector<KeyDef> t = key_table();
    return t;
}

}  // namespace

RunConfig parse_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& def : table()) known |= def.section == section;
            if (!known) throw ConfigError("line " + std::to_string(lineno) + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside any [section]");
        bool found = false;
        for (const auto& def : table()) {
            if (def.section == section && def.key == key) {
                def.set(cfg, value);
                found = true;
                break;
            }
        }
        if (!found)
            throw ConfigError("line " + std::to_string(lineno) + ": unknown key " + section + "." + key);
    }
    return cfg;
}

RunConfig parse_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_text(buf.str());
}

std::string to_text(const RunConfig& cfg) {
    std::ostringstream os;
    std::string current;
    for (const auto& def : table()) {
        if (def.section != current) {
            if (!current.empty()) os << '\n';
            os << '[' << def.section << "]\n";
            current = def.section;
        }
        os << def.key << " = " << def.get(cfg) << '\n';
    }
    return os.str();
}

void RunConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError("config: " + what);
    };
    require(data.image_size >= 8 && data.image_size % 4 == 0, "data.image_size must be >= 8 and divisible by 4");
    require(data.classes >= 1 && data.classes <= 4, "data.classes must be in [1,4]");
    require(data.noise_std >= 0, "data.noise_std must be >= 0");
    require(data.n_train_per_class >= 1 && data.n_test_per_class >= 1 && data.n_pair_per_class >= 1,
            "data counts must be >= 1");
    require(generator.T >= 1, "generator.T must be >= 1");
    require(generator.beta_start > 0 && generator.beta_start <= generator.beta_end && generator.beta_end < 1,
            "generator betas must satisfy 0 < start <= end < 1");
    require(generator.eta >= 0, "generator.eta must be >= 0");
    require(generator.guidance >= 0, "generator.guidance must be >= 0");
    require(generator.hidden >= 8 && generator_variant.hidden >= 8, "hidden widths must be >= 8");
    require(generator.time_freqs >= 2, "generator.time_freqs must be >= 2");
    require(generator.train_steps >= 1 && generator_variant.train_steps >= 1, "train_steps must be >= 1");
    require(generator.batch >= 1 && generator_variant.batch >= 1, "generator batches must be >= 1");
    require(generator.cond_drop >= 0 && generator.cond_drop <= 1, "generator.cond_drop must be in [0,1]");
    require(generator_variant.beta_end > generator.beta_start && generator_variant.beta_end < 1,
            "generator_variant.beta_end out of range");
    require(detector.w >= 0 && detector.w <= 1, "detector.w must be in [0,1]");
    require(detector.val_fraction > 0 && detector.val_fraction < 0.5, "detector.val_fraction must be in (0,0.5)");
    require(detector.batch >= 2 && detector.finetune_batch >= 1, "detector batches too small");
    require(detector.max_epochs >= 1 && detector.finetune_epochs >= 1, "detector epochs must be >= 1");
    require(detector.patience >= 1 && detector.finetune_patience >= 1, "detector patience must be >= 1");
    require(detector.n_fake_per_class >= 1, "detector.n_fake_per_class must be >= 1");
    require(detector.n_probe_samples >= 1, "detector.n_probe_samples must be >= 1");
    require(probe.lambda >= 0, "probe.lambda must be >= 0");
    require(probe.rounds >= 1, "probe.rounds must be >= 1");
    require(probe.K >= 1 && probe.K <= generator.T, "probe.K must be in [1, T]");
    require(probe.rank >= 1, "probe.rank must be >= 1");
    require(probe.batch >= 1 && probe.n_prompts >= 1, "probe batch/n_prompts must be >= 1");
    require(probe.t_s_mode == "fixed" || probe.t_s_mode == "random", "probe.t_s_mode must be fixed|random");
    require(probe.step_count == "kplus1" || probe.step_count == "k", "probe.step_count must be kplus1|k");
    if (probe.t_s_mode == "fixed") {
        const int stride = generator.T / probe.K;
        require(probe.t_s >= 1 && probe.t_s + (probe.K - 1) * stride <= generator.T,
                "probe.t_s places a required step outside [1, T]");
    }
    require(augment.compress_min >= 1 && augment.compress_max <= 100 &&
                augment.compress_min <= augment.compress_max,
            "augment compress range invalid");
    require(augment.blur_min >= 0 && augment.blur_min <= augment.blur_max, "augment blur range invalid");
    require(augment.noise_min >= 0 && augment.noise_min <= augment.noise_max, "augment noise range invalid");
    require(augment.resize_min > 0 && augment.resize_min <= augment.resize_max, "augment resize range invalid");
    require(augment.crop_min_frac > 0 && augment.crop_min_frac <= 1, "augment.crop_min_frac must be in (0,1]");
    require(augment.pgd_eps >= 0 && augment.pgd_steps >= 1, "augment pgd settings invalid");
    if (augment.pgd_eps > 0)
        require(augment.pgd_alpha > 0 && augment.pgd_alpha <= augment.pgd_eps,
                "augment pgd_alpha must be in (0, pgd_eps]");
    require(eval.n_eval_per_class >= 1, "eval.n_eval_per_class must be >= 1");
    require(eval.n_pgd >= 0, "eval.n_pgd must be >= 0");
    require(eval.spectrum_t_probe >= 1 && eval.spectrum_t_probe <= generator.T,
            "eval.spectrum_t_probe must be in [1, T]");
    require(eval.spectrum_images >= 1, "eval.spectrum_images must be >= 1");
    require(io.precision == "f32" || io.precision == "f64", "io.precision must be f32|f64");
    require(!io.out_dir.empty(), "io.out_dir must not be empty");
}

uint64_t RunConfig::semantic_hash() const {
    uint64_t h = 0xCBF29CE484222325ull;
    auto feed = [&h](const std::string& s) {
        for (const char c : s) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ull;
        }
    };
    for (const auto& def : table()) {
        if (def.section == "io" && (def.key == "out_dir" || def.key == "run_id")) continue;
        feed(def.section);
        feed(".");
        feed(def.key);
        feed("=");
        feed(def.get(*this));
        feed("\n");
    }
    return h;
}

std::string RunConfig::resolved_run_id() const {
    if (!io.run_id.empty()) return io.run_id;
    std::ostringstream os;
    os << std::hex << semantic_hash();
    return "r" + os.str();
}

}  // namespace probekit::config
