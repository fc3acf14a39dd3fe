#include "probekit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "probekit/augment.hpp"
#include "probekit/kernels.hpp"

namespace probekit::eval {

double balanced_accuracy(std::span<const ScoredSample> samples, double threshold) {
    int64_t tp = 0, p = 0, tn = 0, n = 0;
    for (const auto& s : samples) {
        if (!std::isfinite(s.score)) throw NumericError("balanced_accuracy: non-finite score");
        if (s.label == 1) {
            ++p;
            if (s.score > threshold) ++tp;
        } else {
            ++n;
            if (s.score <= threshold) ++tn;
        }
    }
    if (p == 0 || n == 0) throw ContractError("balanced_accuracy: need both classes");
    return 0.5 * (static_cast<double>(tp) / p + static_cast<double>(tn) / n);
}

double average_precision(std::span<const ScoredSample> samples) {
    int64_t positives = 0;
    for (const auto& s : samples) positives += s.label == 1;
    if (positives == 0) throw ContractError("average_precision: no positives");

    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return samples[a].score > samples[b].score; });

    double ap = 0.0;
    int64_t hits = 0;
    for (size_t k = 0; k < order.size(); ++k) {
        if (samples[order[k]].label != 1) continue;
        ++hits;
        const double precision = static_cast<double>(hits) / static_cast<double>(k + 1);
        ap += precision / static_cast<double>(positives);  // recall increment is 1/P per hit
    }
    return ap;
}

void write_report_csv(const std::string& path, std::span<const ReportRow> rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write: " + path);
    os << "run_id,stage,split,generator_tag,metric,value,seed,param\n";
    for (const auto& r : rows) {
        std::ostringstream v;
        v.precision(12);
        v << r.value;
        os << r.run_id << ',' << r.stage << ',' << r.split << ',' << r.generator_tag << ',' << r.metric
           << ',' << v.str() << ',' << r.seed << ',' << r.param << '\n';
    }
}

void write_report_jsonl(const std::string& path, std::span<const ReportRow> rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write: " + path);
    for (const auto& r : rows) {
        nlohmann::json j{{"run_id", r.run_id}, {"stage", r.stage},   {"split", r.split},
                         {"generator_tag", r.generator_tag}, {"metric", r.metric}, {"value", r.value},
                         {"seed", r.seed},   {"param", r.param}};
        os << j.dump() << '\n';
    }
}

std::vector<SweepPoint> default_sweep_grid() {
    std::vector<SweepPoint> grid;
    for (const double s : {0.0, 0.5, 1.0, 1.5, 2.0}) grid.push_back({"blur", s});
    for (const double q : {95.0, 85.0, 75.0, 65.0}) grid.push_back({"compress", q});
    for (const double s : {0.5, 0.75, 1.0, 1.25, 1.5}) grid.push_back({"resize", s});
    return grid;
}

std::vector<ReportRow> robustness_sweep(const detector::DetectorNet& det,
                                        const toydata::SplitDataset& dataset,
                                        std::span<const SweepPoint> grid, const std::string& run_id,
                                        const std::string& stage, const std::string& generator_tag,
                                        uint64_t seed) {
    std::vector<ReportRow> rows;
    for (const auto& point : grid)
        if (point.op != "blur" && point.op != "compress" && point.op != "resize" && point.op != "identity")
            throw ContractError("robustness_sweep: unknown op " + point.op);
    for (const auto& point : grid) {
        std::vector<ScoredSample> scored(dataset.items.size());
        kernels::parallel_for(static_cast<int64_t>(dataset.items.size()), [&](int64_t i) {
            const auto& item = dataset.items[static_cast<size_t>(i)];
            Tensor img = item.pixels;
            if (point.op == "blur")
                img = augment::gaussian_blur(img, point.strength);
            else if (point.op == "compress")
                img = augment::compress_blockdct(img, static_cast<int>(point.strength));
            else if (point.op == "resize")
                img = augment::resize(img, point.strength);
            ScoredSample s;
            s.score = det.predict_patched(img);
            s.label = item.label;
            s.source_tag = item.source_tag;
            s.augment_desc = point.op + ":" + std::to_string(point.strength);
            scored[static_cast<size_t>(i)] = std::move(s);
        });
        std::ostringstream param;
        param << point.op << ':' << point.strength;
        rows.push_back({run_id, stage, "robustness", generator_tag, "bacc", balanced_accuracy(scored),
                        seed, param.str()});
    }
    return rows;
}

// --- spectra -------------------------------------------------------------------

RadialProfile radial_energy_profile(std::span<const Tensor> images) {
    if (images.empty()) throw ContractError("radial_energy_profile: empty image set");
    const int64_t h = images[0].dim(0), w = images[0].dim(1);
    const int64_t max_r = static_cast<int64_t>(
        std::llround(std::sqrt(static_cast<double>((h / 2) * (h / 2) + (w / 2) * (w / 2)))));
    RadialProfile prof;
    prof.energy.assign(static_cast<size_t>(max_r) + 1, 0.0);
    prof.count.assign(static_cast<size_t>(max_r) + 1, 0);

    std::vector<double> re(static_cast<size_t>(h * w)), im(static_cast<size_t>(h * w));
    bool counted = false;
    for (const Tensor& img : images) {
        if (img.dim(0) != h || img.dim(1) != w) throw ShapeError("radial_energy_profile: mixed sizes");
        // direct 2-D DFT; images are tiny
        for (int64_t fy = 0; fy < h; ++fy) {
            for (int64_t fx = 0; fx < w; ++fx) {
                std::complex<double> acc{0.0, 0.0};
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < w; ++x) {
                        const double phase = -2.0 * 3.14159265358979323846 *
                                             (static_cast<double>(fy * y) / h + static_cast<double>(fx * x) / w);
                        acc += img.get(y * w + x) * std::complex<double>(std::cos(phase), std::sin(phase));
                    }
                re[static_cast<size_t>(fy * w + fx)] = acc.real();
                im[static_cast<size_t>(fy * w + fx)] = acc.imag();
            }
        }
        for (int64_t fy = 0; fy < h; ++fy) {
            const int64_t cy = std::min(fy, h - fy);
            for (int64_t fx = 0; fx < w; ++fx) {
                const int64_t cx = std::min(fx, w - fx);
                const int64_t r = static_cast<int64_t>(
                    std::llround(std::sqrt(static_cast<double>(cy * cy + cx * cx))));
                const double e = (re[static_cast<size_t>(fy * w + fx)] * re[static_cast<size_t>(fy * w + fx)] +
                                  im[static_cast<size_t>(fy * w + fx)] * im[static_cast<size_t>(fy * w + fx)]) /
                                 static_cast<double>(h * w);
                prof.energy[static_cast<size_t>(r)] += e;
                if (!counted) ++prof.count[static_cast<size_t>(r)];
            }
        }
        counted = true;
        for (int64_t i = 0; i < h * w; ++i) prof.total_spatial += img.get(i) * img.get(i);
    }
    // averaged over the image set; Parseval then ties the profile total to the
    // mean spatial energy
    const double inv = 1.0 / static_cast<double>(images.size());
    for (auto& e : prof.energy) e *= inv;
    prof.total_spatial *= inv;
    return prof;
}

RadialProfile residual_spectrum(const diffusion::DenoiserNet& net, const diffusion::NoiseSchedule& sched,
                                std::span<const toydata::ToyImage> images, int t_probe) {
    if (images.empty()) throw ContractError("residual_spectrum: empty image set");
    if (t_probe < 1 || t_probe > sched.T) throw ContractError("residual_spectrum: t_probe out of range");
    const int size = net.cfg().image_size;
    const double ab = sched.alpha_bar[static_cast<size_t>(t_probe)];
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);

    std::vector<Tensor> residuals(images.size());
    kernels::parallel_for(static_cast<int64_t>(images.size()), [&](int64_t i) {
        const auto& item = images[static_cast<size_t>(i)];
        ad::NoGradGuard ng;
        Tensor row = item.pixels.astype(net.cfg().dtype).reshaped({1, static_cast<int64_t>(size) * size});
        const int ts[1] = {t_probe};
        const int cids[1] = {-1};
        ad::Var eps_hat = net.forward(ad::constant(row), ts, cids, nullptr);
        // one-step estimate: x_hat = (x - sqrt(1-abar) eps_hat) / sqrt(abar)
        Tensor r({size, size}, DType::F64);
        for (int64_t p = 0; p < r.numel(); ++p) {
            const double x = item.pixels.get(p);
            const double xhat = (x - sb * eps_hat.value().get(p)) / sa;
            r.set1(p, x - xhat);
        }
        residuals[static_cast<size_t>(i)] = std::move(r);
    });
    return radial_energy_profile(residuals);
}

void write_profile_csv(const std::string& path, const RadialProfile& profile) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write: " + path);
    os << "radius,energy\n";
    os.precision(12);
    for (size_t r = 0; r < profile.energy.size(); ++r) os << r << ',' << profile.energy[r] << '\n';
}

}  // namespace probekit::eval
