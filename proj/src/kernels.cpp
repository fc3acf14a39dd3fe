#include "probekit/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>

namespace probekit::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::OpenMP};
std::atomic<int> g_threads{0};  // 0 = OpenMP default

struct MatShape {
    int64_t m, n, k;
};

MatShape matmul_shape(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
    if (a.dtype() != b.dtype()) throw ShapeError("matmul: dtype mismatch");
    const int64_t m = ta ? a.dim(1) : a.dim(0);
    const int64_t ka = ta ? a.dim(0) : a.dim(1);
    const int64_t kb = tb ? b.dim(1) : b.dim(0);
    const int64_t n = tb ? b.dim(0) : b.dim(1);
    if (ka != kb) throw ShapeError("matmul: inner dimension mismatch");
    return {m, n, ka};
}

// Per (i,j) the k-loop order is ascending in every variant below, which keeps
// serial and parallel results bit-identical.
template <typename T>
void matmul_rows(const T* a, const T* b, T* c, const MatShape& s, bool ta, bool tb, int64_t i0, int64_t i1) {
    const int64_t m = s.m, n = s.n, k = s.k;
    for (int64_t i = i0; i < i1; ++i) {
        T* crow = c + i * n;
        std::fill(crow, crow + n, T(0));
        if (!ta && !tb) {
            const T* arow = a + i * k;
            for (int64_t p = 0; p < k; ++p) {
                const T av = arow[p];
                const T* brow = b + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else if (!ta && tb) {
            const T* arow = a + i * k;
            for (int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc(0);
                for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] = acc;
            }
        } else if (ta && !tb) {
            for (int64_t p = 0; p < k; ++p) {
                const T av = a[p * m + i];
                const T* brow = b + p * n;
                for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        } else {
            for (int64_t j = 0; j < n; ++j) {
                T acc(0);
                for (int64_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
                crow[j] = acc;
            }
        }
    }
}

template <typename T>
void matmul_impl(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb, bool parallel) {
    const MatShape s = matmul_shape(a, b, ta, tb);
    if (!c.defined() || c.dims() != std::vector<int64_t>{s.m, s.n} || c.dtype() != a.dtype())
        c = Tensor({s.m, s.n}, a.dtype());
    const T* ap = a.data<T>();
    const T* bp = b.data<T>();
    T* cp = c.mut<T>();
    if (parallel && s.m > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < s.m; ++i) matmul_rows(ap, bp, cp, s, ta, tb, i, i + 1);
    } else {
        matmul_rows(ap, bp, cp, s, ta, tb, 0, s.m);
    }
}

struct ConvShape {
    int64_t n, c, h, w, f, kh, kw, ho, wo;
};

ConvShape conv_shape(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: operands must be rank 4");
    if (x.dtype() != w.dtype()) throw ShapeError("conv2d: dtype mismatch");
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
    ConvShape s{};
    s.n = x.dim(0);
    s.c = x.dim(1);
    s.h = x.dim(2);
    s.w = x.dim(3);
    s.f = w.dim(0);
    s.kh = w.dim(2);
    s.kw = w.dim(3);
    if (w.dim(1) != s.c) throw ShapeError("conv2d: channel mismatch");
    s.ho = (s.h + 2 * pad - s.kh) / stride + 1;
    s.wo = (s.w + 2 * pad - s.kw) / stride + 1;
    if (s.ho < 1 || s.wo < 1) throw ShapeError("conv2d: empty output");
    return s;
}

template <typename T>
void conv_fwd_one(const T* x, const T* w, T* y, const ConvShape& s, int stride, int pad, int64_t nf) {
    const int64_t n = nf / s.f, f = nf % s.f;
    const T* xn = x + n * s.c * s.h * s.w;
    const T* wf = w + f * s.c * s.kh * s.kw;
    T* yo = y + nf * s.ho * s.wo;
    for (int64_t oh = 0; oh < s.ho; ++oh) {
        for (int64_t ow = 0; ow < s.wo; ++ow) {
            T acc(0);
            for (int64_t c = 0; c < s.c; ++c) {
                const T* xc = xn + c * s.h * s.w;
                const T* wc = wf + c * s.kh * s.kw;
                for (int64_t kh = 0; kh < s.kh; ++kh) {
                    const int64_t ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= s.h) continue;
                    for (int64_t kw = 0; kw < s.kw; ++kw) {
                        const int64_t iw = ow * stride - pad + kw;
                        if (iw < 0 || iw >= s.w) continue;
                        acc += xc[ih * s.w + iw] * wc[kh * s.kw + kw];
                    }
                }
            }
            yo[oh * s.wo + ow] = acc;
        }
    }
}

// gather form: each input element sums its contributing outputs
template <typename T>
void conv_dgrad_one(const T* gy, const T* w, T* gx, const ConvShape& s, int stride, int pad, int64_t nc) {
    const int64_t n = nc / s.c, c = nc % s.c;
    const T* gyn = gy + n * s.f * s.ho * s.wo;
    T* gxo = gx + nc * s.h * s.w;
    for (int64_t ih = 0; ih < s.h; ++ih) {
        for (int64_t iw = 0; iw < s.w; ++iw) {
            T acc(0);
            for (int64_t f = 0; f < s.f; ++f) {
                const T* gyf = gyn + f * s.ho * s.wo;
                const T* wf = w + (f * s.c + c) * s.kh * s.kw;
                for (int64_t kh = 0; kh < s.kh; ++kh) {
                    const int64_t num_h = ih + pad - kh;
                    if (num_h < 0 || num_h % stride != 0) continue;
                    const int64_t oh = num_h / stride;
                    if (oh >= s.ho) continue;
                    for (int64_t kw = 0; kw < s.kw; ++kw) {
                        const int64_t num_w = iw + pad - kw;
                        if (num_w < 0 || num_w % stride != 0) continue;
                        const int64_t ow = num_w / stride;
                        if (ow >= s.wo) continue;
                        acc += gyf[oh * s.wo + ow] * wf[kh * s.kw + kw];
                    }
                }
            }
            gxo[ih * s.w + iw] = acc;
        }
    }
}

template <typename T>
void conv_wgrad_one(const T* x, const T* gy, T* gw, const ConvShape& s, int stride, int pad, int64_t fc) {
    const int64_t f = fc / s.c, c = fc % s.c;
    T* gwo = gw + fc * s.kh * s.kw;
    for (int64_t kh = 0; kh < s.kh; ++kh) {
        for (int64_t kw = 0; kw < s.kw; ++kw) {
            T acc(0);
            for (int64_t n = 0; n < s.n; ++n) {
                const T* xc = x + (n * s.c + c) * s.h * s.w;
                const T* gyf = gy + (n * s.f + f) * s.ho * s.wo;
                for (int64_t oh = 0; oh < s.ho; ++oh) {
                    const int64_t ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= s.h) continue;
                    for (int64_t ow = 0; ow < s.wo; ++ow) {
                        const int64_t iw = ow * stride - pad + kw;
                        if (iw < 0 || iw >= s.w) continue;
                        acc += xc[ih * s.w + iw] * gyf[oh * s.wo + ow];
                    }
                }
            }
            gwo[kh * s.kw + kw] = acc;
        }
    }
}

template <typename T>
void conv_fwd_impl(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad, bool parallel) {
    const ConvShape s = conv_shape(x, w, stride, pad);
    if (!y.defined() || y.dims() != std::vector<int64_t>{s.n, s.f, s.ho, s.wo} || y.dtype() != x.dtype())
        y = Tensor({s.n, s.f, s.ho, s.wo}, x.dtype());
    const T* xp = x.data<T>();
    const T* wp = w.data<T>();
    T* yp = y.mut<T>();
    const int64_t total = s.n * s.f;
    if (parallel && total > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < total; ++i) conv_fwd_one(xp, wp, yp, s, stride, pad, i);
    } else {
        for (int64_t i = 0; i < total; ++i) conv_fwd_one(xp, wp, yp, s, stride, pad, i);
    }
}

template <typename T>
void conv_dgrad_impl(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad, bool parallel) {
    // gx must be pre-shaped to the input dims
    ConvShape s{};
    s.n = gx.dim(0);
    s.c = gx.dim(1);
    s.h = gx.dim(2);
    s.w = gx.dim(3);
    s.f = w.dim(0);
    s.kh = w.dim(2);
    s.kw = w.dim(3);
    s.ho = gy.dim(2);
    s.wo = gy.dim(3);
    const T* gyp = gy.data<T>();
    const T* wp = w.data<T>();
    T* gxp = gx.mut<T>();
    const int64_t total = s.n * s.c;
    if (parallel && total > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < total; ++i) conv_dgrad_one(gyp, wp, gxp, s, stride, pad, i);
    } else {
        for (int64_t i = 0; i < total; ++i) conv_dgrad_one(gyp, wp, gxp, s, stride, pad, i);
    }
}

template <typename T>
void conv_wgrad_impl(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad, bool parallel) {
    ConvShape s{};
    s.n = x.dim(0);
    s.c = x.dim(1);
    s.h = x.dim(2);
    s.w = x.dim(3);
    s.f = gw.dim(0);
    s.kh = gw.dim(2);
    s.kw = gw.dim(3);
    s.ho = gy.dim(2);
    s.wo = gy.dim(3);
    const T* xp = x.data<T>();
    const T* gyp = gy.data<T>();
    T* gwp = gw.mut<T>();
    const int64_t total = s.f * s.c;
    if (parallel && total > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < total; ++i) conv_wgrad_one(xp, gyp, gwp, s, stride, pad, i);
    } else {
        for (int64_t i = 0; i < total; ++i) conv_wgrad_one(xp, gyp, gwp, s, stride, pad, i);
    }
}

template <typename Fn>
void dispatch(DType dt, Fn&& fn) {
    if (dt == DType::F32)
        fn.template operator()<float>();
    else
        fn.template operator()<double>();
}

}  // namespace

Backend backend() { return g_backend.load(); }
void set_backend(Backend b) { g_backend.store(b); }

int max_threads() {
    const int cap = g_threads.load();
    const int hw = omp_get_max_threads();
    return cap > 0 ? std::min(cap, hw) : hw;
}

void init_from_env() {
    if (const char* env = std::getenv("PROBEKIT_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            g_threads.store(n);
            omp_set_num_threads(n);
        }
    }
    omp_set_nested(0);
}

#define PK_DISPATCH(dt, call)                  \
    dispatch(dt, [&]<typename T>() { call; })

void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb) {
    const bool par = backend() == Backend::OpenMP && !omp_in_parallel();
    PK_DISPATCH(a.dtype(), (matmul_impl<T>(a, b, c, ta, tb, par)));
}
void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad) {
    const bool par = backend() == Backend::OpenMP && !omp_in_parallel();
    PK_DISPATCH(x.dtype(), (conv_fwd_impl<T>(x, w, y, stride, pad, par)));
}
void conv2d_dgrad(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad) {
    const bool par = backend() == Backend::OpenMP && !omp_in_parallel();
    PK_DISPATCH(gy.dtype(), (conv_dgrad_impl<T>(gy, w, gx, stride, pad, par)));
}
void conv2d_wgrad(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad) {
    const bool par = backend() == Backend::OpenMP && !omp_in_parallel();
    PK_DISPATCH(x.dtype(), (conv_wgrad_impl<T>(x, gy, gw, stride, pad, par)));
}

void parallel_for(int64_t n, const std::function<void(int64_t)>& body) {
    if (backend() == Backend::OpenMP && !omp_in_parallel() && n > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) body(i);
    } else {
        for (int64_t i = 0; i < n; ++i) body(i);
    }
}

namespace serial {
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb) {
    PK_DISPATCH(a.dtype(), (matmul_impl<T>(a, b, c, ta, tb, false)));
}
void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad) {
    PK_DISPATCH(x.dtype(), (conv_fwd_impl<T>(x, w, y, stride, pad, false)));
}
void conv2d_dgrad(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad) {
    PK_DISPATCH(gy.dtype(), (conv_dgrad_impl<T>(gy, w, gx, stride, pad, false)));
}
void conv2d_wgrad(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad) {
    PK_DISPATCH(x.dtype(), (conv_wgrad_impl<T>(x, gy, gw, stride, pad, false)));
}
}  // namespace serial

namespace omp {
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool ta, bool tb) {
    PK_DISPATCH(a.dtype(), (matmul_impl<T>(a, b, c, ta, tb, true)));
}
void conv2d_forward(const Tensor& x, const Tensor& w, Tensor& y, int stride, int pad) {
    PK_DISPATCH(x.dtype(), (conv_fwd_impl<T>(x, w, y, stride, pad, true)));
}
void conv2d_dgrad(const Tensor& gy, const Tensor& w, Tensor& gx, int stride, int pad) {
    PK_DISPATCH(gy.dtype(), (conv_dgrad_impl<T>(gy, w, gx, stride, pad, true)));
}
void conv2d_wgrad(const Tensor& x, const Tensor& gy, Tensor& gw, int stride, int pad) {
    PK_DISPATCH(x.dtype(), (conv_wgrad_impl<T>(x, gy, gw, stride, pad, true)));
}
}  // namespace omp

#undef PK_DISPATCH

}  // namespace probekit::kernels
