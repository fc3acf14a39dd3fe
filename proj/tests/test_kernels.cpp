#include "doctest.h"
#include "probekit/kernels.hpp"

using namespace probekit;

TEST_SUITE("kernels") {
    TEST_CASE("serial and omp matmul agree bitwise on random shapes") {
        Rng rng = Rng::seeded(21);
        for (int trial = 0; trial < 12; ++trial) {
            const int64_t m = 1 + rng.uniform_int(0, 32);
            const int64_t k = 1 + rng.uniform_int(0, 32);
            const int64_t n = 1 + rng.uniform_int(0, 32);
            const bool ta = rng.bernoulli(0.5), tb = rng.bernoulli(0.5);
            const DType dt = rng.bernoulli(0.5) ? DType::F32 : DType::F64;
            Tensor a = ta ? Tensor::randn({k, m}, dt, rng) : Tensor::randn({m, k}, dt, rng);
            Tensor b = tb ? Tensor::randn({n, k}, dt, rng) : Tensor::randn({k, n}, dt, rng);
            Tensor cs, cp;
            kernels::serial::matmul(a, b, cs, ta, tb);
            kernels::omp::matmul(a, b, cp, ta, tb);
            CHECK(cs.bits_equal(cp));
        }
    }

    TEST_CASE("serial and omp conv2d agree bitwise") {
        Rng rng = Rng::seeded(22);
        for (int trial = 0; trial < 6; ++trial) {
            const int64_t n = 1 + rng.uniform_int(0, 3);
            const int64_t c = 1 + rng.uniform_int(0, 3);
            const int64_t f = 1 + rng.uniform_int(0, 4);
            const int64_t hw = 6 + 2 * rng.uniform_int(0, 5);
            const int stride = 1 + static_cast<int>(rng.uniform_int(0, 1));
            Tensor x = Tensor::randn({n, c, hw, hw}, DType::F32, rng);
            Tensor w = Tensor::randn({f, c, 3, 3}, DType::F32, rng);
            Tensor ys, yp;
            kernels::serial::conv2d_forward(x, w, ys, stride, 1);
            kernels::omp::conv2d_forward(x, w, yp, stride, 1);
            CHECK(ys.bits_equal(yp));

            Tensor gxs({n, c, hw, hw}, DType::F32), gxp({n, c, hw, hw}, DType::F32);
            kernels::serial::conv2d_dgrad(ys, w, gxs, stride, 1);
            kernels::omp::conv2d_dgrad(yp, w, gxp, stride, 1);
            CHECK(gxs.bits_equal(gxp));

            Tensor gws({f, c, 3, 3}, DType::F32), gwp({f, c, 3, 3}, DType::F32);
            kernels::serial::conv2d_wgrad(x, ys, gws, stride, 1);
            kernels::omp::conv2d_wgrad(x, yp, gwp, stride, 1);
            CHECK(gws.bits_equal(gwp));
        }
    }

    TEST_CASE("matmul shape errors") {
        Tensor a({2, 3}, DType::F32), b({4, 5}, DType::F32), c;
        CHECK_THROWS_AS(kernels::matmul(a, b, c, false, false), ShapeError);
        Tensor d({2, 3}, DType::F64);
        CHECK_THROWS_AS(kernels::matmul(a, d, c, false, false), ShapeError);
    }

    TEST_CASE("parallel_for writes disjoint slots identically") {
        std::vector<int64_t> serial_out(64), omp_out(64);
        kernels::set_backend(kernels::Backend::Serial);
        kernels::parallel_for(64, [&](int64_t i) { serial_out[static_cast<size_t>(i)] = i * i; });
        kernels::set_backend(kernels::Backend::OpenMP);
        kernels::parallel_for(64, [&](int64_t i) { omp_out[static_cast<size_t>(i)] = i * i; });
        CHECK(serial_out == omp_out);
    }
}
