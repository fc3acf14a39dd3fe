#include "probekit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "probekit/kernels.hpp"

namespace probekit::ad {

namespace {

thread_local bool t_grad_enabled = true;

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <typename Fn>
void dispatch(DType dt, Fn&& fn) {
    if (dt == DType::F32)
        fn.template operator()<float>();
    else
        fn.template operator()<double>();
}

template <typename F>
Tensor unary_map(const Tensor& x, F&& f) {
    Tensor out(x.dims(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
        const T* xp = x.data<T>();
        T* op = out.mut<T>();
        for (int64_t i = 0; i < x.numel(); ++i) op[i] = f(xp[i]);
    });
    return out;
}

Var make_result(OpKind op, Tensor value, std::vector<Var> inputs, OpAttrs attrs = {}) {
    bool rg = false;
    if (t_grad_enabled)
        for (const auto& v : inputs)
            if (v.requires_grad()) {
                rg = true;
                break;
            }
    auto n = std::make_shared<Node>();
    n->op = rg ? op : OpKind::Leaf;
    n->value = std::move(value);
    n->requires_grad = rg;
    if (rg) {
        n->inputs.reserve(inputs.size());
        for (auto& v : inputs) n->inputs.push_back(v.node());
        n->attrs = std::move(attrs);
    }
    return Var::wrap(std::move(n));
}

void check_defined(const Var& v, const char* who) {
    if (!v.defined()) throw ContractError(std::string(who) + ": undefined operand");
}

void check_same_dtype(const Var& a, const Var& b, const char* who) {
    if (a.value().dtype() != b.value().dtype()) throw ShapeError(std::string(who) + ": dtype mismatch");
}

enum class BroadcastKind { None, Scalar, LastDim, Channel };

BroadcastKind add_broadcast_kind(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return BroadcastKind::None;
    if (b.numel() == 1) return BroadcastKind::Scalar;
    if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.dims().back()) return BroadcastKind::LastDim;
    if (b.rank() == 1 && a.rank() == 4 && b.dim(0) == a.dim(1)) return BroadcastKind::Channel;
    throw ShapeError("add: incompatible shapes");
}

void accumulate_into(Tensor& acc, const Tensor& g, const std::vector<int64_t>& dims, DType dt) {
    if (!acc.defined()) acc = Tensor::zeros(dims, dt);
    dispatch(dt, [&]<typename T>() {
        T* a = acc.mut<T>();
        const T* b = g.data<T>();
        for (int64_t i = 0; i < acc.numel(); ++i) a[i] += b[i];
    });
}

void accumulate_grad(const std::shared_ptr<Node>& n, const Tensor& g) {
    if (!n->requires_grad) return;
    if (g.numel() != n->value.numel()) throw ShapeError("gradient/value element count mismatch");
    accumulate_into(n->grad, g.numel() == n->value.numel() && g.dims() != n->value.dims()
                                 ? g.reshaped(n->value.dims())
                                 : g,
                    n->value.dims(), n->value.dtype());
}

}  // namespace

Var::Var(Tensor value, bool requires_grad, std::string name) {
    node_ = std::make_shared<Node>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad && t_grad_enabled;
    node_->name = std::move(name);
}

const Tensor& Var::value() const {
    if (!node_) throw ContractError("value() on undefined Var");
    return node_->value;
}

const Tensor& Var::grad() const {
    if (!node_) throw ContractError("grad() on undefined Var");
    if (!node_->grad.defined()) throw ContractError("grad() before backward()");
    return node_->grad;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

Var Var::wrap(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

Var constant(Tensor value) { return Var(std::move(value), false); }

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    Tensor c;
    kernels::matmul(a.value(), b.value(), c, ta, tb);
    OpAttrs at;
    at.ta = ta;
    at.tb = tb;
    return make_result(OpKind::Matmul, std::move(c), {a, b}, std::move(at));
}

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
    check_defined(x, "conv2d");
    check_defined(w, "conv2d");
    Tensor y;
    kernels::conv2d_forward(x.value(), w.value(), y, stride, pad);
    OpAttrs at;
    at.stride = stride;
    at.pad = pad;
    return make_result(OpKind::Conv2d, std::move(y), {x, w}, std::move(at));
}

Var add(const Var& a, const Var& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_dtype(a, b, "add");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const BroadcastKind bk = add_broadcast_kind(av, bv);
    Tensor out(av.dims(), av.dtype());
    dispatch(av.dtype(), [&]<typename T>() {
        const T* ap = av.data<T>();
        const T* bp = bv.data<T>();
        T* op = out.mut<T>();
        const int64_t n = av.numel();
        switch (bk) {
            case BroadcastKind::None:
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
                break;
            case BroadcastKind::Scalar: {
                const T s = bp[0];
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + s;
                break;
            }
            case BroadcastKind::LastDim: {
                const int64_t last = av.dims().back();
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i % last];
                break;
            }
            case BroadcastKind::Channel: {
                const int64_t c = av.dim(1), hw = av.dim(2) * av.dim(3);
                for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[(i / hw) % c];
                break;
            }
        }
    });
    return make_result(OpKind::Add, std::move(out), {a, b});
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_dtype(a, b, "mul");
    if (!a.value().same_shape(b.value())) throw ShapeError("mul: shape mismatch");
    Tensor out(a.value().dims(), a.value().dtype());
    dispatch(out.dtype(), [&]<typename T>() {
        const T* ap = a.value().data<T>();
        const T* bp = b.value().data<T>();
        T* op = out.mut<T>();
        for (int64_t i = 0; i < out.numel(); ++i) op[i] = ap[i] * bp[i];
    });
    return make_result(OpKind::Mul, std::move(out), {a, b});
}

Var scale(const Var& x, double s) {
    check_defined(x, "scale");
    Tensor out(x.value().dims(), x.value().dtype());
    dispatch(out.dtype(), [&]<typename T>() {
        const T* xp = x.value().data<T>();
        T* op = out.mut<T>();
        const T ts = static_cast<T>(s);
        for (int64_t i = 0; i < out.numel(); ++i) op[i] = xp[i] * ts;
    });
    OpAttrs at;
    at.scalar = s;
    return make_result(OpKind::Scale, std::move(out), {x}, std::move(at));
}

Var sigmoid(const Var& x) {
    check_defined(x, "sigmoid");
    Tensor out;
    dispatch(x.value().dtype(), [&]<typename T>() { out = unary_map(x.value(), [](T v) { return stable_sigmoid(v); }); });
    return make_result(OpKind::Sigmoid, std::move(out), {x});
}

Var softplus(const Var& x) {
    check_defined(x, "softplus");
    Tensor out;
    dispatch(x.value().dtype(), [&]<typename T>() { out = unary_map(x.value(), [](T v) { return stable_softplus(v); }); });
    return make_result(OpKind::Softplus, std::move(out), {x});
}

Var relu(const Var& x) {
    check_defined(x, "relu");
    Tensor out;
    dispatch(x.value().dtype(), [&]<typename T>() { out = unary_map(x.value(), [](T v) { return v > T(0) ? v : T(0); }); });
    return make_result(OpKind::Relu, std::move(out), {x});
}

Var silu(const Var& x) {
    check_defined(x, "silu");
    Tensor out;
    dispatch(x.value().dtype(), [&]<typename T>() { out = unary_map(x.value(), [](T v) { return v * stable_sigmoid(v); }); });
    return make_result(OpKind::Silu, std::move(out), {x});
}

Var mean(const Var& x) {
    check_defined(x, "mean");
    Tensor out({1}, x.value().dtype());
    dispatch(out.dtype(), [&]<typename T>() {
        const T* xp = x.value().data<T>();
        T acc(0);
        for (int64_t i = 0; i < x.value().numel(); ++i) acc += xp[i];
        out.mut<T>()[0] = acc / static_cast<T>(x.value().numel());
    });
    return make_result(OpKind::Mean, std::move(out), {x});
}

Var sum(const Var& x) {
    check_defined(x, "sum");
    Tensor out({1}, x.value().dtype());
    dispatch(out.dtype(), [&]<typename T>() {
        const T* xp = x.value().data<T>();
        T acc(0);
        for (int64_t i = 0; i < x.value().numel(); ++i) acc += xp[i];
        out.mut<T>()[0] = acc;
    });
    return make_result(OpKind::Sum, std::move(out), {x});
}

Var mse(const Var& a, const Var& b) {
    check_defined(a, "mse");
    check_defined(b, "mse");
    check_same_dtype(a, b, "mse");
    if (!a.value().same_shape(b.value())) throw ShapeError("mse: shape mismatch");
    Tensor out({1}, a.value().dtype());
    dispatch(out.dtype(), [&]<typename T>() {
        const T* ap = a.value().data<T>();
        const T* bp = b.value().data<T>();
        T acc(0);
        for (int64_t i = 0; i < a.value().numel(); ++i) {
            const T d = ap[i] - bp[i];
            acc += d * d;
        }
        out.mut<T>()[0] = acc / static_cast<T>(a.value().numel());
    });
    return make_result(OpKind::Mse, std::move(out), {a, b});
}

Var bce_with_logits(const Var& logits, const Var& targets) {
    check_defined(logits, "bce_with_logits");
    check_defined(targets, "bce_with_logits");
    check_same_dtype(logits, targets, "bce_with_logits");
    if (!logits.value().same_shape(targets.value())) throw ShapeError("bce_with_logits: shape mismatch");
    Tensor out({1}, logits.value().dtype());
    dispatch(out.dtype(), [&]<typename T>() {
        const T* zp = logits.value().data<T>();
        const T* yp = targets.value().data<T>();
        T acc(0);
        for (int64_t i = 0; i < logits.value().numel(); ++i) acc += stable_softplus(zp[i]) - zp[i] * yp[i];
        out.mut<T>()[0] = acc / static_cast<T>(logits.value().numel());
    });
    return make_result(OpKind::BceWithLogits, std::move(out), {logits, targets});
}

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw ContractError("concat: no inputs");
    for (const auto& x : xs) check_defined(x, "concat");
    const Tensor& first = xs[0].value();
    if (axis < 0 || axis >= first.rank()) throw ShapeError("concat: bad axis");
    std::vector<int64_t> out_dims = first.dims();
    for (size_t i = 1; i < xs.size(); ++i) {
        const Tensor& t = xs[i].value();
        if (t.rank() != first.rank() || t.dtype() != first.dtype()) throw ShapeError("concat: mismatched inputs");
        for (int d = 0; d < first.rank(); ++d)
            if (d != axis && t.dim(d) != first.dim(d)) throw ShapeError("concat: mismatched dims");
        out_dims[static_cast<size_t>(axis)] += t.dim(axis);
    }
    Tensor out(out_dims, first.dtype());
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= first.dim(d);
    for (int d = axis + 1; d < first.rank(); ++d) inner *= first.dim(d);
    const int64_t out_axis = out_dims[static_cast<size_t>(axis)];
    dispatch(first.dtype(), [&]<typename T>() {
        T* op = out.mut<T>();
        int64_t offset = 0;
        for (const auto& x : xs) {
            const Tensor& t = x.value();
            const T* tp = t.data<T>();
            const int64_t ax = t.dim(axis);
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t a = 0; a < ax; ++a)
                    std::copy(tp + (o * ax + a) * inner, tp + (o * ax + a + 1) * inner,
                              op + (o * out_axis + offset + a) * inner);
            offset += ax;
        }
    });
    OpAttrs at;
    at.axis = axis;
    return make_result(OpKind::Concat, std::move(out), xs, std::move(at));
}

Var reshape(const Var& x, std::vector<int64_t> dims) {
    check_defined(x, "reshape");
    Tensor out = x.value().reshaped(dims);
    OpAttrs at;
    at.dims = std::move(dims);
    return make_result(OpKind::Reshape, std::move(out), {x}, std::move(at));
}

Var embed_lookup(const Var& table, std::vector<int64_t> indices) {
    check_defined(table, "embed_lookup");
    const Tensor& t = table.value();
    if (t.rank() != 2) throw ShapeError("embed_lookup: table must be rank 2");
    const int64_t v = t.dim(0), d = t.dim(1);
    for (const int64_t idx : indices)
        if (idx < 0 || idx >= v) throw ShapeError("embed_lookup: index out of range");
    Tensor out({static_cast<int64_t>(indices.size()), d}, t.dtype());
    dispatch(t.dtype(), [&]<typename T>() {
        const T* tp = t.data<T>();
        T* op = out.mut<T>();
        for (size_t r = 0; r < indices.size(); ++r)
            std::copy(tp + indices[r] * d, tp + (indices[r] + 1) * d, op + static_cast<int64_t>(r) * d);
    });
    OpAttrs at;
    at.indices = std::move(indices);
    return make_result(OpKind::EmbedLookup, std::move(out), {table}, std::move(at));
}

Var stop_grad(const Var& x) {
    check_defined(x, "stop_grad");
    return Var(x.value(), false);
}

Var forward_op(OpKind kind, const std::vector<Var>& inputs, const OpAttrs& attrs) {
    for (const auto& v : inputs) {
        check_defined(v, "forward_op");
        if (!v.value().all_finite()) throw NumericError("forward_op: non-finite input");
    }
    auto need = [&](size_t n) {
        if (inputs.size() != n) throw ContractError("forward_op: wrong input count");
    };
    switch (kind) {
        case OpKind::Matmul:
            need(2);
            return matmul(inputs[0], inputs[1], attrs.ta, attrs.tb);
        case OpKind::Conv2d:
            need(2);
            return conv2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
        case OpKind::Add:
            need(2);
            return add(inputs[0], inputs[1]);
        case OpKind::Mul:
            need(2);
            return mul(inputs[0], inputs[1]);
        case OpKind::Scale:
            need(1);
            return scale(inputs[0], attrs.scalar);
        case OpKind::Sigmoid:
            need(1);
            return sigmoid(inputs[0]);
        case OpKind::Softplus:
            need(1);
            return softplus(inputs[0]);
        case OpKind::Relu:
            need(1);
            return relu(inputs[0]);
        case OpKind::Silu:
            need(1);
            return silu(inputs[0]);
        case OpKind::Mean:
            need(1);
            return mean(inputs[0]);
        case OpKind::Sum:
            need(1);
            return sum(inputs[0]);
        case OpKind::Mse:
            need(2);
            return mse(inputs[0], inputs[1]);
        case OpKind::BceWithLogits:
            need(2);
            return bce_with_logits(inputs[0], inputs[1]);
        case OpKind::Concat:
            return concat(inputs, attrs.axis);
        case OpKind::Reshape:
            need(1);
            return reshape(inputs[0], attrs.dims);
        case OpKind::EmbedLookup:
            need(1);
            return embed_lookup(inputs[0], attrs.indices);
        case OpKind::StopGrad:
            need(1);
            return stop_grad(inputs[0]);
        case OpKind::Leaf:
            break;
    }
    throw ContractError("forward_op: unsupported kind");
}

// --- backward ----------------------------------------------------------------

namespace {

Tensor ones_like_scalar(DType dt) { return Tensor::full({1}, 1.0, dt); }

template <typename T>
void axpy(const T* src, T* dst, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

void backward_node(const std::shared_ptr<Node>& n) {
    const Tensor& g = n->grad;
    const DType dt = n->value.dtype();
    switch (n->op) {
        case OpKind::Leaf:
            return;
        case OpKind::Matmul: {
            const auto& a = n->inputs[0];
            const auto& b = n->inputs[1];
            const bool ta = n->attrs.ta, tb = n->attrs.tb;
            if (a->requires_grad) {
                Tensor da;
                if (!ta)
                    kernels::matmul(g, b->value, da, false, !tb);
                else
                    kernels::matmul(b->value, g, da, tb, true);
                accumulate_grad(a, da);
            }
            if (b->requires_grad) {
                Tensor db;
                if (!tb)
                    kernels::matmul(a->value, g, db, !ta, false);
                else
                    kernels::matmul(g, a->value, db, true, ta);
                accumulate_grad(b, db);
            }
            return;
        }
        case OpKind::Conv2d: {
            const auto& x = n->inputs[0];
            const auto& w = n->inputs[1];
            if (x->requires_grad) {
                Tensor gx(x->value.dims(), dt);
                kernels::conv2d_dgrad(g, w->value, gx, n->attrs.stride, n->attrs.pad);
                accumulate_grad(x, gx);
            }
            if (w->requires_grad) {
                Tensor gw(w->value.dims(), dt);
                kernels::conv2d_wgrad(x->value, g, gw, n->attrs.stride, n->attrs.pad);
                accumulate_grad(w, gw);
            }
            return;
        }
        case OpKind::Add: {
            const auto& a = n->inputs[0];
            const auto& b = n->inputs[1];
            if (a->requires_grad) accumulate_grad(a, g);
            if (b->requires_grad) {
                const BroadcastKind bk = add_broadcast_kind(a->value, b->value);
                if (bk == BroadcastKind::None) {
                    accumulate_grad(b, g);
                } else {
                    Tensor gb(b->value.dims(), dt);
                    dispatch(dt, [&]<typename T>() {
                        const T* gp = g.data<T>();
                        T* bp = gb.mut<T>();
                        const int64_t total = g.numel();
                        if (bk == BroadcastKind::Scalar) {
                            T acc(0);
                            for (int64_t i = 0; i < total; ++i) acc += gp[i];
                            bp[0] = acc;
                        } else if (bk == BroadcastKind::LastDim) {
                            const int64_t last = a->value.dims().back();
                            for (int64_t i = 0; i < total; ++i) bp[i % last] += gp[i];
                        } else {
                            const int64_t c = a->value.dim(1), hw = a->value.dim(2) * a->value.dim(3);
                            for (int64_t i = 0; i < total; ++i) bp[(i / hw) % c] += gp[i];
                        }
                    });
                    accumulate_grad(b, gb);
                }
            }
            return;
        }
        case OpKind::Mul: {
            const auto& a = n->inputs[0];
            const auto& b = n->inputs[1];
            auto scaled = [&](const Tensor& other) {
                Tensor out(g.dims(), dt);
                dispatch(dt, [&]<typename T>() {
                    const T* gp = g.data<T>();
                    const T* op = other.data<T>();
                    T* rp = out.mut<T>();
                    for (int64_t i = 0; i < g.numel(); ++i) rp[i] = gp[i] * op[i];
                });
                return out;
            };
            if (a->requires_grad) accumulate_grad(a, scaled(b->value));
            if (b->requires_grad) accumulate_grad(b, scaled(a->value));
            return;
        }
        case OpKind::Scale: {
            const auto& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(g.dims(), dt);
            dispatch(dt, [&]<typename T>() {
                const T* gp = g.data<T>();
                T* rp = gx.mut<T>();
                const T s = static_cast<T>(n->attrs.scalar);
                for (int64_t i = 0; i < g.numel(); ++i) rp[i] = gp[i] * s;
            });
            accumulate_grad(x, gx);
            return;
        }
        case OpKind::Sigmoid:
        case OpKind::Softplus:
        case OpKind::Relu:
        case OpKind::Silu: {
            const auto& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(g.dims(), dt);
            dispatch(dt, [&]<typename T>() {
                const T* gp = g.data<T>();
                const T* xp = x->value.data<T>();
                const T* yp = n->value.data<T>();
                T* rp = gx.mut<T>();
                for (int64_t i = 0; i < g.numel(); ++i) {
                    T d;
                    switch (n->op) {
                        case OpKind::Sigmoid:
                            d = yp[i] * (T(1) - yp[i]);
                            break;
                        case OpKind::Softplus:
                            d = stable_sigmoid(xp[i]);
                            break;
                        case OpKind::Relu:
                            d = xp[i] > T(0) ? T(1) : T(0);
                            break;
                        default: {  // Silu
                            const T s = stable_sigmoid(xp[i]);
                            d = s * (T(1) + xp[i] * (T(1) - s));
                            break;
                        }
                    }
                    rp[i] = gp[i] * d;
                }
            });
            accumulate_grad(x, gx);
            return;
        }
        case OpKind::Mean:
        case OpKind::Sum: {
            const auto& x = n->inputs[0];
            if (!x->requires_grad) return;
            Tensor gx(x->value.dims(), dt);
            dispatch(dt, [&]<typename T>() {
                const T gv = g.data<T>()[0];
                const T s = n->op == OpKind::Mean ? gv / static_cast<T>(x->value.numel()) : gv;
                T* rp = gx.mut<T>();
                std::fill(rp, rp + gx.numel(), s);
            });
            accumulate_grad(x, gx);
            return;
        }
        case OpKind::Mse: {
            const auto& a = n->inputs[0];
            const auto& b = n->inputs[1];
            const int64_t count = a->value.numel();
            auto grad_for = [&](bool first) {
                Tensor out(a->value.dims(), dt);
                dispatch(dt, [&]<typename T>() {
                    const T gv = g.data<T>()[0];
                    const T* ap = a->value.data<T>();
                    const T* bp = b->value.data<T>();
                    T* rp = out.mut<T>();
                    const T c = T(2) * gv / static_cast<T>(count);
                    for (int64_t i = 0; i < count; ++i) {
                        const T d = c * (ap[i] - bp[i]);
                        rp[i] = first ? d : -d;
                    }
                });
                return out;
            };
            if (a->requires_grad) accumulate_grad(a, grad_for(true));
            if (b->requires_grad) accumulate_grad(b, grad_for(false));
            return;
        }
        case OpKind::BceWithLogits: {
            const auto& z = n->inputs[0];
            const auto& y = n->inputs[1];
            const int64_t count = z->value.numel();
            if (z->requires_grad) {
                Tensor gz(z->value.dims(), dt);
                dispatch(dt, [&]<typename T>() {
                    const T gv = g.data<T>()[0];
                    const T* zp = z->value.data<T>();
                    const T* yp = y->value.data<T>();
                    T* rp = gz.mut<T>();
                    for (int64_t i = 0; i < count; ++i)
                        rp[i] = gv * (stable_sigmoid(zp[i]) - yp[i]) / static_cast<T>(count);
                });
                accumulate_grad(z, gz);
            }
            if (y->requires_grad) {
                Tensor gy(y->value.dims(), dt);
                dispatch(dt, [&]<typename T>() {
                    const T gv = g.data<T>()[0];
                    const T* zp = z->value.data<T>();
                    T* rp = gy.mut<T>();
                    for (int64_t i = 0; i < count; ++i) rp[i] = -gv * zp[i] / static_cast<T>(count);
                });
                accumulate_grad(y, gy);
            }
            return;
        }
        case OpKind::Concat: {
            const int axis = n->attrs.axis;
            int64_t outer = 1, inner = 1;
            for (int d = 0; d < axis; ++d) outer *= n->value.dim(d);
            for (int d = axis + 1; d < n->value.rank(); ++d) inner *= n->value.dim(d);
            const int64_t out_axis = n->value.dim(axis);
            int64_t offset = 0;
            for (const auto& x : n->inputs) {
                const int64_t ax = x->value.dim(axis);
                if (x->requires_grad) {
                    Tensor gx(x->value.dims(), dt);
                    dispatch(dt, [&]<typename T>() {
                        const T* gp = g.data<T>();
                        T* rp = gx.mut<T>();
                        for (int64_t o = 0; o < outer; ++o)
                            for (int64_t a = 0; a < ax; ++a)
                                std::copy(gp + (o * out_axis + offset + a) * inner,
                                          gp + (o * out_axis + offset + a + 1) * inner,
                                          rp + (o * ax + a) * inner);
                    });
                    accumulate_grad(x, gx);
                }
                offset += ax;
            }
            return;
        }
        case OpKind::Reshape: {
            const auto& x = n->inputs[0];
            if (x->requires_grad) accumulate_grad(x, g.reshaped(x->value.dims()));
            return;
        }
        case OpKind::EmbedLookup: {
            const auto& table = n->inputs[0];
            if (!table->requires_grad) return;
            Tensor gt(table->value.dims(), dt);
            const int64_t d = table->value.dim(1);
            dispatch(dt, [&]<typename T>() {
                const T* gp = g.data<T>();
                T* rp = gt.mut<T>();
                for (size_t r = 0; r < n->attrs.indices.size(); ++r)
                    axpy(gp + static_cast<int64_t>(r) * d, rp + n->attrs.indices[r] * d, d);
            });
            accumulate_grad(table, gt);
            return;
        }
        case OpKind::StopGrad:
            return;
    }
}

}  // namespace

GradMap backward(const Var& loss, const ParamStore* zero_fill) {
    if (!loss.defined()) throw ContractError("backward: undefined loss");
    if (loss.value().numel() != 1) throw ContractError("backward: loss must be scalar");

    // iterative post-order over grad-requiring nodes
    std::vector<std::shared_ptr<Node>> topo;
    if (loss.requires_grad()) {
        std::unordered_set<Node*> visited;
        std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack;
        stack.emplace_back(loss.node(), 0);
        visited.insert(loss.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            bool descended = false;
            while (next < node->inputs.size()) {
                const auto& in = node->inputs[next++];
                if (in->requires_grad && !visited.count(in.get())) {
                    visited.insert(in.get());
                    stack.emplace_back(in, 0);
                    descended = true;
                    break;
                }
            }
            if (!descended && next >= stack.back().first->inputs.size()) {
                topo.push_back(stack.back().first);
                stack.pop_back();
            }
        }

        loss.node()->grad = ones_like_scalar(loss.value().dtype());
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if (!(*it)->grad.defined()) continue;  // pruned branch
            backward_node(*it);
        }
    }

    GradMap gm;
    for (const auto& node : topo)
        if (node->op == OpKind::Leaf && !node->name.empty() && node->grad.defined())
            gm.accumulate(node->name, node->grad);
    if (zero_fill)
        for (const auto& name : zero_fill->names())
            if (!zero_fill->is_frozen(name) && !gm.has(name))
                gm.set(name, Tensor::zeros(zero_fill->get(name).dims(), zero_fill->get(name).dtype()));
    return gm;
}

double finite_diff_check(const LossFn& fn, ParamStore& params, double eps) {
    if (eps <= 0) throw ContractError("finite_diff_check: eps must be positive");

    Var base = fn(params);
    {
        Var again = fn(params);
        if (!base.value().bits_equal(again.value()))
            throw ContractError("finite_diff_check: fn is not deterministic at the base point");
    }
    GradMap analytic = backward(base, &params);

    auto eval = [&]() {
        NoGradGuard ng;
        return fn(params).value().get(0);
    };

    double worst = 0.0;
    for (const auto& name : params.names()) {
        if (params.is_frozen(name)) continue;
        Tensor original = params.get(name);
        const Tensor& ga = analytic.get(name);
        for (int64_t i = 0; i < original.numel(); ++i) {
            const double v = original.get(i);
            Tensor plus = original.clone();
            plus.set1(i, v + eps);
            params.set(name, plus);
            const double up = eval();
            Tensor minus = original.clone();
            minus.set1(i, v - eps);
            params.set(name, minus);
            const double down = eval();
            params.set(name, original);
            const double numeric = (up - down) / (2.0 * eps);
            const double a = ga.get(i);
            worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12}));
        }
    }
    return worst;
}

}  // namespace probekit::ad
