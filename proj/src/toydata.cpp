#include "probekit/toydata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"

namespace probekit::toydata {

namespace {
constexpr double kTau = 6.283185307179586476925286766559;
}

ClassAttrs draw_attrs(int class_id, Rng& rng) {
    ClassAttrs a;
    switch (class_id) {
        case 0:  // blob
            a.center_x = rng.uniform(-0.4, 0.4);
            a.center_y = rng.uniform(-0.4, 0.4);
            a.sigma = rng.uniform(0.15, 0.35);
            a.amplitude = rng.uniform(0.6, 1.0);
            a.baseline = rng.uniform(0.3, 0.7);
            break;
        case 1:  // gradient
            a.angle = rng.uniform(0.0, kTau);
            a.amplitude = rng.uniform(0.5, 1.0);
            break;
        case 2:  // stripes
            a.angle = rng.uniform(0.0, kTau);
            a.frequency = rng.uniform(1.5, 4.0);
            a.phase = rng.uniform(0.0, kTau);
            a.amplitude = rng.uniform(0.5, 1.0);
            break;
        case 3:  // checker
            a.frequency = rng.uniform(1.0, 2.5);
            a.phase = rng.uniform(0.0, kTau);
            a.phase2 = rng.uniform(0.0, kTau);
            a.amplitude = rng.uniform(0.5, 1.0);
            break;
        default:
            throw ContractError("class_id out of range");
    }
    return a;
}

Tensor render_class(int class_id, const ClassAttrs& at, int size, DType dt) {
    if (class_id < 0 || class_id >= kNumClasses) throw ContractError("class_id out of range");
    Tensor img({size, size}, dt);
    auto coord = [size](int i) { return -1.0 + 2.0 * (i + 0.5) / size; };  // [-1, 1] grid
    for (int r = 0; r < size; ++r) {
        const double y = coord(r);
        for (int c = 0; c < size; ++c) {
            const double x = coord(c);
            double v = 0.0;
            switch (class_id) {
                case 0: {
                    const double dx = x - at.center_x, dy = y - at.center_y;
                    const double g = std::exp(-(dx * dx + dy * dy) / (2.0 * at.sigma * at.sigma));
                    v = -at.baseline + (at.amplitude + at.baseline) * g;
                    break;
                }
                case 1: {
                    const double t = std::cos(at.angle) * x + std::sin(at.angle) * y;
                    v = at.amplitude * t / std::sqrt(2.0);
                    break;
                }
                case 2: {
                    const double t = std::cos(at.angle) * x + std::sin(at.angle) * y;
                    v = at.amplitude * std::sin(kTau * at.frequency * t / 2.0 + at.phase);
                    break;
                }
                case 3: {
                    const double sx = std::sin(kTau * at.frequency * x / 2.0 + at.phase);
                    const double sy = std::sin(kTau * at.frequency * y / 2.0 + at.phase2);
                    v = at.amplitude * std::tanh(4.0 * sx * sy);
                    break;
                }
            }
            img.set1(static_cast<int64_t>(r) * size + c, v);
        }
    }
    return img;
}

ToyImage sample_real(int class_id, uint64_t item_seed, const DataConfig& cfg) {
    if (class_id < 0 || class_id >= cfg.classes) throw ContractError("class_id out of range");
    Rng rng = Rng::seeded(item_seed);
    const ClassAttrs at = draw_attrs(class_id, rng);
    Tensor img = render_class(class_id, at, cfg.image_size, cfg.dtype);
    for (int64_t i = 0; i < img.numel(); ++i) {
        double v = img.get(i) + cfg.noise_std * rng.normal();
        img.set1(i, std::clamp(v, -1.0, 1.0));
    }
    ToyImage out;
    out.pixels = std::move(img);
    out.class_id = class_id;
    out.label = 0;
    out.source_tag = "real";
    return out;
}

SplitDataset make_split(int n_per_class, uint64_t seed, const std::string& split_name, const DataConfig& cfg) {
    if (n_per_class < 1) throw ContractError("n_per_class must be >= 1");
    SplitDataset ds;
    ds.split_name = split_name;
    ds.seed = seed;
    ds.items.reserve(static_cast<size_t>(cfg.classes) * n_per_class);
    const uint64_t split_seed = derive_seed(seed, split_name);
    for (int c = 0; c < cfg.classes; ++c) {
        const uint64_t class_seed = derive_seed(split_seed, "class", static_cast<uint64_t>(c));
        for (int i = 0; i < n_per_class; ++i)
            ds.items.push_back(sample_real(c, derive_seed(class_seed, "item", static_cast<uint64_t>(i)), cfg));
    }
    return ds;
}

void save_dataset(const std::string& ptar_path, const SplitDataset& ds) {
    std::vector<ArchiveEntry> entries;
    entries.reserve(ds.items.size());
    nlohmann::json meta;
    meta["split_name"] = ds.split_name;
    meta["seed"] = ds.seed;
    auto& items = meta["items"];
    items = nlohmann::json::array();
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const auto& it = ds.items[i];
        entries.push_back({"img/" + std::to_string(i), it.pixels});
        items.push_back({{"class_id", it.class_id}, {"label", it.label}, {"source_tag", it.source_tag}});
    }
    save_ptar(ptar_path, entries);
    std::ofstream os(ptar_path + ".json");
    if (!os) throw IoError("cannot write manifest: " + ptar_path + ".json");
    os << meta.dump(2) << "\n";
}

SplitDataset load_dataset(const std::string& ptar_path) {
    auto entries = load_ptar(ptar_path);
    std::ifstream is(ptar_path + ".json");
    if (!is) throw IoError("missing dataset manifest: " + ptar_path + ".json");
    nlohmann::json meta = nlohmann::json::parse(is);
    SplitDataset ds;
    ds.split_name = meta.value("split_name", "");
    ds.seed = meta.value("seed", 0ull);
    const auto& items = meta.at("items");
    if (items.size() != entries.size()) throw IoError("dataset manifest/archive size mismatch");
    ds.items.resize(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        ds.items[i].pixels = std::move(entries[i].tensor);
        ds.items[i].class_id = items[i].at("class_id").get<int>();
        ds.items[i].label = items[i].at("label").get<int>();
        ds.items[i].source_tag = items[i].at("source_tag").get<std::string>();
    }
    return ds;
}

}  // namespace probekit::toydata
