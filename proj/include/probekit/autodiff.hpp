#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "probekit/tensor.hpp"

namespace probekit::ad {

enum class OpKind {
    Leaf,
    Matmul,
    Conv2d,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Softplus,
    Relu,
    Silu,
    Mean,
    Sum,
    Mse,
    BceWithLogits,
    Concat,
    Reshape,
    EmbedLookup,
    StopGrad,
};

struct OpAttrs {
    int stride = 1;
    int pad = 0;
    bool ta = false;
    bool tb = false;
    double scalar = 1.0;
    int axis = 0;
    std::vector<int64_t> dims;     // reshape target
    std::vector<int64_t> indices;  // embed_lookup rows
};

struct Node {
    OpKind op = OpKind::Leaf;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string name;  // non-empty for named parameter leaves
    std::vector<std::shared_ptr<Node>> inputs;
    OpAttrs attrs;
};

// Handle to a node in an eagerly evaluated computation graph. Graphs are
// confined to one thread; independent graphs may run concurrently.
class Var {
  public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false, std::string name = {});

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const;
    const Tensor& grad() const;  // valid after backward()
    bool requires_grad() const;
    const std::shared_ptr<Node>& node() const { return node_; }

    static Var wrap(std::shared_ptr<Node> n);

  private:
    std::shared_ptr<Node> node_;
};

// Thread-local gradient mode. Ops executed while disabled produce detached
// constants, so fully no-grad passes never retain a graph.
bool grad_enabled();
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

Var constant(Tensor value);

Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false);
Var conv2d(const Var& x, const Var& w, int stride, int pad);
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var sub(const Var& a, const Var& b);  // add(a, scale(b, -1))
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var relu(const Var& x);
Var silu(const Var& x);
Var mean(const Var& x);
Var sum(const Var& x);
Var mse(const Var& a, const Var& b);
Var bce_with_logits(const Var& logits, const Var& targets);
Var concat(const std::vector<Var>& xs, int axis);
Var reshape(const Var& x, std::vector<int64_t> dims);
Var embed_lookup(const Var& table, std::vector<int64_t> indices);
Var stop_grad(const Var& x);

// Generic entry point; validates input finiteness before dispatching.
Var forward_op(OpKind kind, const std::vector<Var>& inputs, const OpAttrs& attrs = {});

// Reverse-mode sweep from a scalar loss. Populates .grad() on every
// grad-requiring node and returns gradients keyed by parameter-leaf name.
// When `zero_fill` is given, its non-frozen entries missing from the result
// receive explicit zeros.
GradMap backward(const Var& loss, const ParamStore* zero_fill = nullptr);

// Central-difference oracle: max over all non-frozen parameter elements of the
// relative error between backward() and (f(p+eps)-f(p-eps))/(2 eps).
using LossFn = std::function<Var(ParamStore&)>;
double finite_diff_check(const LossFn& fn, ParamStore& params, double eps);

}  // namespace probekit::ad
