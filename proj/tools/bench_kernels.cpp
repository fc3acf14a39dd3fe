// Wall-clock comparison of the serial reference kernels against the OpenMP
// versions, plus a bit-identity check on every timed case.
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>

#include "probekit/augment.hpp"
#include "probekit/kernels.hpp"
#include "probekit/rng.hpp"
#include "probekit/tensor.hpp"

using namespace probekit;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double omp_ms, bool identical, double gflop = 0.0) {
    std::printf("%-28s serial %8.3f ms   omp %8.3f ms   speedup %5.2fx   bitwise %s", name, serial_ms,
                omp_ms, serial_ms / omp_ms, identical ? "OK" : "MISMATCH");
    if (gflop > 0.0) std::printf("   (%.2f GFLOP/s omp)", gflop / (omp_ms * 1e-3) * 1e-9);
    std::printf("\n");
}

}  // namespace

int main() {
    kernels::init_from_env();
    Rng rng = Rng::seeded(7);

    {
        const int64_t m = 256, k = 256, n = 256;
        Tensor a = Tensor::randn({m, k}, DType::F32, rng);
        Tensor b = Tensor::randn({k, n}, DType::F32, rng);
        Tensor cs, cp;
        const double serial = time_ms([&] { kernels::serial::matmul(a, b, cs, false, false); }, 20);
        const double omp = time_ms([&] { kernels::omp::matmul(a, b, cp, false, false); }, 20);
        report("matmul 256x256x256 f32", serial, omp, cs.bits_equal(cp),
               2.0 * static_cast<double>(m) * k * n);
    }
    {
        const int64_t m = 128, k = 512, n = 128;
        Tensor a = Tensor::randn({k, m}, DType::F64, rng);
        Tensor b = Tensor::randn({n, k}, DType::F64, rng);
        Tensor cs, cp;
        const double serial = time_ms([&] { kernels::serial::matmul(a, b, cs, true, true); }, 20);
        const double omp = time_ms([&] { kernels::omp::matmul(a, b, cp, true, true); }, 20);
        report("matmul 128x512x128 f64 t/t", serial, omp, cs.bits_equal(cp),
               2.0 * static_cast<double>(m) * k * n);
    }
    {
        Tensor x = Tensor::randn({64, 8, 32, 32}, DType::F32, rng);
        Tensor w = Tensor::randn({16, 8, 3, 3}, DType::F32, rng);
        Tensor ys, yp;
        const double serial = time_ms([&] { kernels::serial::conv2d_forward(x, w, ys, 2, 1); }, 10);
        const double omp = time_ms([&] { kernels::omp::conv2d_forward(x, w, yp, 2, 1); }, 10);
        report("conv2d 64x8x32x32 s2", serial, omp, ys.bits_equal(yp));
    }
    {
        Tensor x = Tensor::randn({64, 8, 32, 32}, DType::F32, rng);
        Tensor w = Tensor::randn({16, 8, 3, 3}, DType::F32, rng);
        Tensor y;
        kernels::serial::conv2d_forward(x, w, y, 2, 1);
        Tensor gxs({64, 8, 32, 32}, DType::F32), gxp({64, 8, 32, 32}, DType::F32);
        const double serial = time_ms([&] { kernels::serial::conv2d_dgrad(y, w, gxs, 2, 1); }, 10);
        const double omp = time_ms([&] { kernels::omp::conv2d_dgrad(y, w, gxp, 2, 1); }, 10);
        report("conv2d dgrad", serial, omp, gxs.bits_equal(gxp));
    }
    {
        // per-sample augmentation throughput via the shared parallel-for
        Rng img_rng = Rng::seeded(11);
        std::vector<Tensor> images;
        for (int i = 0; i < 256; ++i) images.push_back(Tensor::randn({16, 16}, DType::F32, img_rng));
        std::vector<Tensor> out_serial(images.size()), out_omp(images.size());
        auto body = [&](std::vector<Tensor>& out) {
            return [&images, &out](int64_t i) {
                Rng r = Rng::seeded(derive_seed(3, "bench-aug", static_cast<uint64_t>(i)));
                out[static_cast<size_t>(i)] =
                    augment::gaussian_blur(augment::compress_blockdct(images[static_cast<size_t>(i)], 80), 1.0);
                (void)r;
            };
        };
        kernels::set_backend(kernels::Backend::Serial);
        const double serial =
            time_ms([&] { kernels::parallel_for(static_cast<int64_t>(images.size()), body(out_serial)); }, 5);
        kernels::set_backend(kernels::Backend::OpenMP);
        const double omp =
            time_ms([&] { kernels::parallel_for(static_cast<int64_t>(images.size()), body(out_omp)); }, 5);
        bool same = true;
        for (size_t i = 0; i < images.size(); ++i) same &= out_serial[i].bits_equal(out_omp[i]);
        report("augment 256 images", serial, omp, same);
    }
    std::printf("threads: %d\n", kernels::max_threads());
    return 0;
}
