#include "probekit/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "probekit/nn.hpp"

namespace probekit::detector {

DetectorNet DetectorNet::init(const DetectorConfig& cfg, uint64_t seed) {
    if (cfg.input_size % 4 != 0) throw ConfigError("detector: input_size must be divisible by 4");
    DetectorNet net;
    net.cfg_ = cfg;
    Rng rng = Rng::seeded(derive_seed(seed, "detector-init"));
    const DType dt = cfg.dtype;
    auto conv_init = [&](int64_t f, int64_t c, int64_t k) {
        Tensor w({f, c, k, k}, dt);
        const double std = std::sqrt(2.0 / static_cast<double>(c * k * k));
        for (int64_t i = 0; i < w.numel(); ++i) w.set1(i, std * rng.normal());
        return w;
    };
    auto& ps = net.params_;
    ps.add("conv1.w", conv_init(cfg.c1, 1, 3));
    ps.add("conv1.b", Tensor::zeros({cfg.c1}, dt));
    ps.add("conv2.w", conv_init(cfg.c2, cfg.c1, 3));
    ps.add("conv2.b", Tensor::zeros({cfg.c2}, dt));
    const int64_t flat = static_cast<int64_t>(cfg.c2) * (cfg.input_size / 4) * (cfg.input_size / 4);
    ps.add("head.w", nn::kaiming_init(1, flat, dt, rng));
    ps.add("head.b", Tensor::zeros({1}, dt));
    return net;
}

ad::Var DetectorNet::logits(const ad::Var& x) const {
    const auto& ps = params_;
    if (x.value().rank() != 4 || x.value().dim(1) != 1 || x.value().dim(2) != cfg_.input_size ||
        x.value().dim(3) != cfg_.input_size)
        throw ShapeError("detector: expected [N,1,S,S] input");
    ad::Var h1 = ad::relu(ad::add(ad::conv2d(x, nn::param(ps, "conv1.w"), 2, 1), nn::param(ps, "conv1.b")));
    ad::Var h2 = ad::relu(ad::add(ad::conv2d(h1, nn::param(ps, "conv2.w"), 2, 1), nn::param(ps, "conv2.b")));
    const int64_t n = x.value().dim(0);
    ad::Var flat = ad::reshape(h2, {n, h2.value().numel() / n});
    return nn::linear(flat, nn::param(ps, "head.w"), nn::param(ps, "head.b"));
}

namespace {

double stable_sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// reflect index into [0, n)
int64_t reflect(int64_t i, int64_t n) {
    if (n == 1) return 0;
    const int64_t period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

}  // namespace

Tensor fit_to_size(const Tensor& image, int size, Rng* crop_rng) {
    if (image.rank() != 2) throw ShapeError("fit_to_size: expected [H,W]");
    const int64_t h = image.dim(0), w = image.dim(1);
    if (h == size && w == size) return image;
    Tensor out({size, size}, image.dtype());
    int64_t off_h = 0, off_w = 0;
    if (h > size) off_h = crop_rng ? crop_rng->uniform_int(0, h - size) : (h - size) / 2;
    if (w > size) off_w = crop_rng ? crop_rng->uniform_int(0, w - size) : (w - size) / 2;
    for (int64_t r = 0; r < size; ++r) {
        const int64_t sr = h > size ? off_h + r : reflect(r, h);
        for (int64_t c = 0; c < size; ++c) {
            const int64_t sc = w > size ? off_w + c : reflect(c, w);
            out.set1(r * size + c, image.get(sr * w + sc));
        }
    }
    return out;
}

double DetectorNet::predict(const Tensor& image) const {
    if (image.rank() != 2 || image.dim(0) != cfg_.input_size || image.dim(1) != cfg_.input_size)
        throw ShapeError("predict: image must match input_size");
    ad::NoGradGuard ng;
    Tensor x = image.astype(cfg_.dtype).reshaped({1, 1, cfg_.input_size, cfg_.input_size});
    ad::Var z = logits(ad::constant(std::move(x)));
    return stable_sigmoid(z.value().get(0));
}

double DetectorNet::predict_patched(const Tensor& image) const {
    if (image.rank() != 2) throw ShapeError("predict_patched: expected [H,W]");
    const int s = cfg_.input_size;
    const int64_t h = image.dim(0), w = image.dim(1);
    // reflect-pad up to whole patches
    const int64_t ph = std::max<int64_t>(1, (h + s - 1) / s);
    const int64_t pw = std::max<int64_t>(1, (w + s - 1) / s);
    Tensor padded({ph * s, pw * s}, image.dtype());
    for (int64_t r = 0; r < ph * s; ++r)
        for (int64_t c = 0; c < pw * s; ++c)
            padded.set1(r * pw * s + c, image.get(reflect(r, h) * w + reflect(c, w)));

    ad::NoGradGuard ng;
    double logit_sum = 0.0;
    for (int64_t br = 0; br < ph; ++br) {
        for (int64_t bc = 0; bc < pw; ++bc) {
            Tensor patch({s, s}, image.dtype());
            for (int64_t r = 0; r < s; ++r)
                for (int64_t c = 0; c < s; ++c)
                    patch.set1(r * s + c, padded.get((br * s + r) * pw * s + bc * s + c));
            Tensor x = patch.astype(cfg_.dtype).reshaped({1, 1, s, s});
            logit_sum += logits(ad::constant(std::move(x))).value().get(0);
        }
    }
    return stable_sigmoid(logit_sum / static_cast<double>(ph * pw));
}

void DetectorNet::save(const std::string& path) const {
    params_.save(path);
    nlohmann::json meta;
    meta["input_size"] = cfg_.input_size;
    meta["c1"] = cfg_.c1;
    meta["c2"] = cfg_.c2;
    meta["dtype"] = dtype_name(cfg_.dtype);
    meta["logit_convention"] = "positive=fake";
    std::ofstream os(path + ".json");
    if (!os) throw IoError("cannot write manifest: " + path + ".json");
    os << meta.dump(2) << "\n";
}

DetectorNet DetectorNet::load(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw IoError("missing manifest: " + path + ".json");
    nlohmann::json meta = nlohmann::json::parse(is);
    DetectorNet net;
    net.cfg_.input_size = meta.at("input_size").get<int>();
    net.cfg_.c1 = meta.at("c1").get<int>();
    net.cfg_.c2 = meta.at("c2").get<int>();
    net.cfg_.dtype = meta.at("dtype").get<std::string>() == "f64" ? DType::F64 : DType::F32;
    net.params_ = ParamStore::load(path);
    return net;
}

// --- training ----------------------------------------------------------------

namespace {

struct LabeledPool {
    std::vector<const Tensor*> images;
    std::vector<double> labels;
};

Tensor make_batch(const LabeledPool& pool, std::span<const size_t> idx, int size, DType dt,
                  const AugmentFn& augment, Rng& aug_rng, Tensor* labels_out) {
    const int64_t n = static_cast<int64_t>(idx.size());
    Tensor x({n, 1, size, size}, dt);
    Tensor y({n, 1}, dt);
    for (int64_t r = 0; r < n; ++r) {
        Tensor img = *pool.images[idx[static_cast<size_t>(r)]];
        if (augment) img = augment(img, aug_rng);
        img = fit_to_size(img, size, &aug_rng);
        for (int64_t i = 0; i < size * size; ++i) x.set1(r * size * size + i, img.get(i));
        y.set1(r, pool.labels[idx[static_cast<size_t>(r)]]);
    }
    *labels_out = std::move(y);
    return x;
}

double validation_bacc(const DetectorNet& net, const LabeledPool& val) {
    int64_t tp = 0, p = 0, tn = 0, nneg = 0;
    for (size_t i = 0; i < val.images.size(); ++i) {
        const double score = net.predict(*val.images[i]);
        if (val.labels[i] > 0.5) {
            ++p;
            if (score > 0.5) ++tp;
        } else {
            ++nneg;
            if (score <= 0.5) ++tn;
        }
    }
    if (p == 0 || nneg == 0) throw ContractError("validation pool needs both classes");
    return 0.5 * (static_cast<double>(tp) / p + static_cast<double>(tn) / nneg);
}

// deterministic seeded split of indices into train/validation
void split_indices(size_t n, double val_fraction, uint64_t seed, std::vector<size_t>* train,
                   std::vector<size_t>* val) {
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng::seeded(seed);
    for (size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    const size_t n_val = std::max<size_t>(1, static_cast<size_t>(static_cast<double>(n) * val_fraction));
    val->assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    train->assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
}

}  // namespace

PretrainOut pretrain(const toydata::SplitDataset& real, const toydata::SplitDataset& fake,
                     const PretrainConfig& cfg, const DetectorConfig& net_cfg, const AugmentFn& augment) {
    if (real.items.empty() || fake.items.empty()) throw ContractError("pretrain: empty dataset");
    DetectorNet net = DetectorNet::init(net_cfg, derive_seed(cfg.seed, "detector-pretrain"));

    LabeledPool train_pool, val_pool;
    auto add_split = [&](const toydata::SplitDataset& ds, double label, const char* tag) {
        std::vector<size_t> tr, va;
        split_indices(ds.items.size(), cfg.val_fraction, derive_seed(cfg.seed, tag), &tr, &va);
        for (const size_t i : tr) {
            train_pool.images.push_back(&ds.items[i].pixels);
            train_pool.labels.push_back(label);
        }
        for (const size_t i : va) {
            val_pool.images.push_back(&ds.items[i].pixels);
            val_pool.labels.push_back(label);
        }
    };
    add_split(real, 0.0, "val-split-real");
    add_split(fake, 1.0, "val-split-fake");

    // balanced batches: half real, half fake
    std::vector<size_t> real_idx, fake_idx;
    for (size_t i = 0; i < train_pool.images.size(); ++i)
        (train_pool.labels[i] > 0.5 ? fake_idx : real_idx).push_back(i);

    nn::Adam opt(cfg.lr);
    Rng order_rng = Rng::seeded(derive_seed(cfg.seed, "batch-order"));
    Rng aug_rng = Rng::seeded(derive_seed(cfg.seed, "augment"));

    PretrainOut out{std::move(net), {}};
    ParamStore best = out.net.params().clone();
    double best_bacc = -1.0;
    int best_epoch = -1;
    const int half = std::max(1, cfg.batch / 2);
    const int iters = static_cast<int>((real_idx.size() + fake_idx.size()) / static_cast<size_t>(2 * half));

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int it = 0; it < std::max(1, iters); ++it) {
            std::vector<size_t> idx;
            idx.reserve(static_cast<size_t>(2 * half));
            for (int r = 0; r < half; ++r)
                idx.push_back(real_idx[static_cast<size_t>(order_rng.uniform_int(0, static_cast<int64_t>(real_idx.size()) - 1))]);
            for (int r = 0; r < half; ++r)
                idx.push_back(fake_idx[static_cast<size_t>(order_rng.uniform_int(0, static_cast<int64_t>(fake_idx.size()) - 1))]);
            Tensor labels;
            Tensor x = make_batch(train_pool, idx, net_cfg.input_size, net_cfg.dtype, augment, aug_rng, &labels);
            ad::Var z = out.net.logits(ad::constant(std::move(x)));
            ad::Var loss = ad::bce_with_logits(z, ad::constant(labels.astype(net_cfg.dtype)));
            const double lv = loss.value().get(0);
            if (!std::isfinite(lv)) throw NumericError("detector pretraining diverged");
            loss_sum += lv;
            GradMap grads = ad::backward(loss);
            opt.step(out.net.params(), grads);
        }
        const double bacc = validation_bacc(out.net, val_pool);
        out.log.push_back({epoch, loss_sum / std::max(1, iters), bacc});
        if (bacc > best_bacc) {
            best_bacc = bacc;
            best = out.net.params().clone();
            best_epoch = epoch;
        }
        if (epoch - best_epoch >= cfg.patience) break;
    }
    out.net.params() = std::move(best);
    return out;
}

PretrainOut finetune_mixed(const DetectorNet& base, const toydata::SplitDataset& pre_real,
                           const toydata::SplitDataset& pre_fake, const toydata::SplitDataset& probe_paired,
                           const MixConfig& cfg, const AugmentFn& augment) {
    if (probe_paired.items.empty()) throw ContractError("finetune_mixed: empty probe-paired dataset");
    if (cfg.w < 0.0 || cfg.w > 1.0) throw ConfigError("finetune_mixed: w must be in [0,1]");

    PretrainOut out{DetectorNet::init(base.cfg(), 0), {}};
    out.net.params() = base.params().clone();
    const DetectorConfig& net_cfg = base.cfg();

    LabeledPool pre_pool, probe_pool, val_pool;
    auto add_split = [&](const toydata::SplitDataset& ds, double label, LabeledPool& pool, const char* tag) {
        std::vector<size_t> tr, va;
        split_indices(ds.items.size(), cfg.val_fraction, derive_seed(cfg.seed, tag), &tr, &va);
        for (const size_t i : tr) {
            pool.images.push_back(&ds.items[i].pixels);
            pool.labels.push_back(label);
        }
        for (const size_t i : va) {
            val_pool.images.push_back(&ds.items[i].pixels);
            val_pool.labels.push_back(label);
        }
    };
    add_split(pre_real, 0.0, pre_pool, "ft-val-real");
    add_split(pre_fake, 1.0, pre_pool, "ft-val-fake");
    for (const auto& item : probe_paired.items) {
        // probe-paired pool carries its own labels (fakes + fresh reals)
        probe_pool.images.push_back(&item.pixels);
        probe_pool.labels.push_back(item.label);
    }
    {
        std::vector<size_t> tr, va;
        split_indices(probe_pool.images.size(), cfg.val_fraction, derive_seed(cfg.seed, "ft-val-probe"), &tr, &va);
        LabeledPool probe_train;
        for (const size_t i : tr) {
            probe_train.images.push_back(probe_pool.images[i]);
            probe_train.labels.push_back(probe_pool.labels[i]);
        }
        for (const size_t i : va) {
            val_pool.images.push_back(probe_pool.images[i]);
            val_pool.labels.push_back(probe_pool.labels[i]);
        }
        probe_pool = std::move(probe_train);
    }

    nn::Adam opt(cfg.lr);
    Rng pre_rng = Rng::seeded(derive_seed(cfg.seed, "ft-pre-batches"));
    Rng probe_rng = Rng::seeded(derive_seed(cfg.seed, "ft-probe-batches"));
    Rng pre_aug_rng = Rng::seeded(derive_seed(cfg.seed, "ft-pre-augment"));
    Rng probe_aug_rng = Rng::seeded(derive_seed(cfg.seed, "ft-probe-augment"));

    ParamStore best = out.net.params().clone();
    double best_bacc = -1.0;
    int best_epoch = -1;
    const int iters =
        std::max(1, static_cast<int>(probe_pool.images.size() / static_cast<size_t>(std::max(1, cfg.batch))));

    auto draw = [&](const LabeledPool& pool, Rng& rng) {
        std::vector<size_t> idx(static_cast<size_t>(cfg.batch));
        for (auto& i : idx) i = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.images.size()) - 1));
        return idx;
    };

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int it = 0; it < iters; ++it) {
            std::optional<ad::Var> total;
            // zero-weight sides are skipped outright so w=0 / w=1 runs are
            // update-for-update identical to single-pool training
            if (cfg.w < 1.0) {
                Tensor labels;
                Tensor x = make_batch(pre_pool, draw(pre_pool, pre_rng), net_cfg.input_size, net_cfg.dtype,
                                      augment, pre_aug_rng, &labels);
                ad::Var l = ad::bce_with_logits(out.net.logits(ad::constant(std::move(x))),
                                                ad::constant(labels.astype(net_cfg.dtype)));
                total = cfg.w == 0.0 ? l : ad::scale(l, 1.0 - cfg.w);
            }
            if (cfg.w > 0.0) {
                Tensor labels;
                Tensor x = make_batch(probe_pool, draw(probe_pool, probe_rng), net_cfg.input_size,
                                      net_cfg.dtype, augment, probe_aug_rng, &labels);
                ad::Var l = ad::bce_with_logits(out.net.logits(ad::constant(std::move(x))),
                                                ad::constant(labels.astype(net_cfg.dtype)));
                ad::Var term = cfg.w == 1.0 ? l : ad::scale(l, cfg.w);
                total = total ? ad::add(*total, term) : term;
            }
            const double lv = total->value().get(0);
            if (!std::isfinite(lv)) throw NumericError("detector fine-tuning diverged");
            loss_sum += lv;
            GradMap grads = ad::backward(*total);
            opt.step(out.net.params(), grads);
        }
        const double bacc = validation_bacc(out.net, val_pool);
        out.log.push_back({epoch, loss_sum / iters, bacc});
        if (bacc > best_bacc) {
            best_bacc = bacc;
            best = out.net.params().clone();
            best_epoch = epoch;
        }
        if (epoch - best_epoch >= cfg.patience) break;
    }
    out.net.params() = std::move(best);
    return out;
}

}  // namespace probekit::detector
