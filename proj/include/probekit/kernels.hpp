#pragma once

#include <cstdint>
#include <functional>

#include "probekit/tensor.hpp"

namespace probekit::kernels {

// Parallel kernels assign disjoint output elements to threads and keep the
// per-element accumulation order identical to the serial reference, so both
// backends produce bit-identical results at any thread count.
enum class Backend { Serial, OpenMP };

Backend backend();
void set_backend(Backend b);
int max_threads();
// Reads PROBEKIT_THREADS (optional worker cap) and configures OpenMP.
void init_from_env();

// C = op(A) * op(B); A is [m,k] ([k,m] when ta), B is [k,n] ([n,k] when tb).
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb);

// x [N,C,H,W], w [F,C,kh,kw] -> y [N,F,Ho,Wo]; zero padding.
void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad);
void conv2d_dgrad(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad);
void conv2d_wgrad(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad);

// Sample-level parallelism; the body must write only to its own slot.
void parallel_for(int64_t n, const std::function<void(int64_t)>& body);

namespace serial {
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb);
void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad);
void conv2d_dgrad(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad);
void conv2d_wgrad(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad);
}  // namespace serial

namespace omp {
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb);
void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad);
void conv2d_dgrad(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad);
void conv2d_wgrad(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad);
}  // namespace omp

}  // namespace probekit::kernels
