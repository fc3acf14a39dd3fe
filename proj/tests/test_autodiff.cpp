#include <cmath>

#include "doctest.h"
#include "probekit/autodiff.hpp"
#include "probekit/nn.hpp"

using namespace probekit;
using ad::Var;

namespace {

Tensor t2x2(double a, double b, double c, double d) {
    const double vals[4] = {a, b, c, d};
    return Tensor::from_values({2, 2}, vals, DType::F64);
}

}  // namespace

TEST_SUITE("autodiff") {
    TEST_CASE("matmul forward matches hand arithmetic") {
        const double av[4] = {1, 2, 3, 4};
        const double bv[2] = {1, 1};
        Var a(Tensor::from_values({2, 2}, av, DType::F64));
        Var b(Tensor::from_values({2, 1}, bv, DType::F64));
        Var c = ad::matmul(a, b);
        CHECK(c.value().get(0) == doctest::Approx(3.0));
        CHECK(c.value().get(1) == doctest::Approx(7.0));
    }

    TEST_CASE("sigmoid(0) is exactly one half") {
        Var z(Tensor::scalar(0.0, DType::F64));
        CHECK(ad::sigmoid(z).value().get(0) == 0.5);
    }

    TEST_CASE("softplus equals -log(1-sigmoid) to 1e-10") {
        for (const double z : {-5.0, 0.0, 5.0}) {
            Var v(Tensor::scalar(z, DType::F64));
            const double sp = ad::softplus(v).value().get(0);
            const double ref = -std::log1p(-1.0 / (1.0 + std::exp(-z)));
            CHECK(rel_err(sp, ref) < 1e-10);
        }
    }

    TEST_CASE("stop_grad keeps values and kills gradients") {
        // d/dx [sg(x) * x] at x=2 is 2, not 4
        Var x(Tensor::scalar(2.0, DType::F64), true, "x");
        Var y = ad::sum(ad::mul(ad::stop_grad(x), x));
        GradMap g = ad::backward(y);
        CHECK(g.get("x").get(0) == doctest::Approx(2.0));

        // fully detached graph gives empty/zero grads
        Var x2(Tensor::scalar(3.0, DType::F64), true, "x2");
        Var y2 = ad::sum(ad::stop_grad(ad::mul(x2, x2)));
        GradMap g2 = ad::backward(y2);
        CHECK(!g2.has("x2"));

        // identity on values
        Rng rng = Rng::seeded(1);
        Tensor r = Tensor::randn({5}, DType::F64, rng);
        Var v(r, true);
        CHECK(ad::stop_grad(v).value().bits_equal(r));
    }

    TEST_CASE("backward of linear loss returns the data") {
        const double wv[3] = {0.5, -1.0, 2.0};
        const double xv[3] = {3.0, 4.0, 5.0};
        Var w(Tensor::from_values({3}, wv, DType::F64), true, "w");
        Var x(Tensor::from_values({3}, xv, DType::F64));
        GradMap g = ad::backward(ad::sum(ad::mul(w, x)));
        for (int i = 0; i < 3; ++i) CHECK(g.get("w").get(i) == doctest::Approx(xv[i]));
    }

    TEST_CASE("backward requires scalar loss") {
        Var w(Tensor::full({2}, 1.0, DType::F64), true, "w");
        CHECK_THROWS_AS(ad::backward(ad::mul(w, w)), ContractError);
    }

    TEST_CASE("backward is linear in the loss") {
        Rng rng = Rng::seeded(2);
        ParamStore ps;
        ps.add("w", Tensor::randn({4}, DType::F64, rng));
        Var wv = nn::param(ps, "w");
        Var x(Tensor::randn({4}, DType::F64, rng));
        Var l1 = ad::sum(ad::mul(wv, x));
        Var l2 = ad::mse(wv, x);
        const double alpha = 0.7, beta = -1.3;
        GradMap combined = ad::backward(ad::add(ad::scale(l1, alpha), ad::scale(l2, beta)));

        Var wv1 = nn::param(ps, "w");
        GradMap g1 = ad::backward(ad::sum(ad::mul(wv1, x)));
        Var wv2 = nn::param(ps, "w");
        GradMap g2 = ad::backward(ad::mse(wv2, x));
        for (int i = 0; i < 4; ++i)
            CHECK(combined.get("w").get(i) ==
                  doctest::Approx(alpha * g1.get("w").get(i) + beta * g2.get("w").get(i)).epsilon(1e-12));
    }

    TEST_CASE("finite differences: every differentiable op kind") {
        Rng rng = Rng::seeded(3);
        // two-layer perceptron with BCE head
        ParamStore ps;
        ps.add("w1", nn::kaiming_init(8, 6, DType::F64, rng));
        ps.add("b1", Tensor::randn({8}, DType::F64, rng));
        ps.add("w2", nn::kaiming_init(1, 8, DType::F64, rng));
        ps.add("b2", Tensor::randn({1}, DType::F64, rng));
        Tensor x = Tensor::randn({4, 6}, DType::F64, rng);
        Tensor y({4, 1}, DType::F64);
        for (int i = 0; i < 4; ++i) y.set1(i, i % 2);
        const double err = ad::finite_diff_check(
            [&](ParamStore& p) {
                Var h = ad::silu(nn::linear(ad::constant(x), nn::param(p, "w1"), nn::param(p, "b1")));
                Var z = nn::linear(h, nn::param(p, "w2"), nn::param(p, "b2"));
                return ad::bce_with_logits(z, ad::constant(y));
            },
            ps, 1e-5);
        CHECK(err < 1e-4);

        // quadratic form has a closed-form gradient; the oracle must be tight
        ParamStore q;
        q.add("v", Tensor::randn({5}, DType::F64, rng));
        const double qerr = ad::finite_diff_check(
            [&](ParamStore& p) {
                Var v = nn::param(p, "v");
                return ad::sum(ad::mul(v, v));
            },
            q, 1e-5);
        CHECK(qerr < 1e-7);

        // constant function: analytic and numeric both at the floor
        ParamStore c;
        c.add("v", Tensor::randn({3}, DType::F64, rng));
        const double cerr = ad::finite_diff_check(
            [&](ParamStore& p) {
                Var v = nn::param(p, "v");
                return ad::sum(ad::scale(ad::stop_grad(v), 0.0));
            },
            c, 1e-5);
        CHECK(cerr < 1e-6);

        // a stop_grad path that still moves the value: the check documents the
        // deliberate analytic/numeric gap instead of hiding it
        ParamStore d;
        d.add("v", Tensor::randn({3}, DType::F64, rng));
        const double derr = ad::finite_diff_check(
            [&](ParamStore& p) {
                Var v = nn::param(p, "v");
                return ad::sum(ad::stop_grad(v));
            },
            d, 1e-5);
        CHECK(derr == doctest::Approx(1.0).epsilon(1e-3));
    }

    TEST_CASE("finite differences across remaining op kinds") {
        Rng rng = Rng::seeded(4);
        ParamStore ps;
        ps.add("w", Tensor::randn({2, 8}, DType::F64, rng));
        ps.add("table", Tensor::randn({5, 4}, DType::F64, rng));
        ps.add("kern", Tensor::randn({2, 1, 3, 3}, DType::F64, rng));
        Tensor img = Tensor::randn({1, 1, 6, 6}, DType::F64, rng);
        const double err = ad::finite_diff_check(
            [&](ParamStore& p) {
                Var w = nn::param(p, "w");
                Var parts = ad::concat({ad::relu(w), ad::sigmoid(ad::scale(w, 0.5))}, 0);
                Var emb = ad::embed_lookup(nn::param(p, "table"), {1, 3, 3});
                Var conv = ad::conv2d(ad::constant(img), nn::param(p, "kern"), 2, 1);
                Var flat = ad::reshape(conv, {1, conv.value().numel()});
                return ad::add(ad::add(ad::mean(parts), ad::mean(emb)), ad::mean(ad::softplus(flat)));
            },
            ps, 1e-5);
        CHECK(err < 1e-4);
    }

    TEST_CASE("finite diff detects nondeterministic functions") {
        Rng rng = Rng::seeded(5);
        ParamStore ps;
        ps.add("v", Tensor::randn({2}, DType::F64, rng));
        int calls = 0;
        CHECK_THROWS_AS(ad::finite_diff_check(
                            [&](ParamStore& p) {
                                ++calls;
                                Var v = nn::param(p, "v");
                                return ad::scale(ad::sum(v), 1.0 + 0.1 * calls);
                            },
                            ps, 1e-5),
                        ContractError);
    }

    TEST_CASE("detachment documented by oracle comparison") {
        // gradient through a stop_grad path is exactly zero while the
        // non-detached variant is not
        Rng rng = Rng::seeded(6);
        ParamStore ps;
        ps.add("v", Tensor::randn({3}, DType::F64, rng));
        Var v1 = nn::param(ps, "v");
        GradMap detached = ad::backward(ad::sum(ad::mul(ad::stop_grad(v1), v1)), &ps);
        Var v2 = nn::param(ps, "v");
        GradMap full = ad::backward(ad::sum(ad::mul(v2, v2)), &ps);
        for (int i = 0; i < 3; ++i) {
            CHECK(detached.get("v").get(i) == doctest::Approx(ps.get("v").get(i)));
            CHECK(full.get("v").get(i) == doctest::Approx(2.0 * ps.get("v").get(i)));
        }
    }

    TEST_CASE("frozen params never receive gradient") {
        Rng rng = Rng::seeded(7);
        ParamStore ps;
        ps.add("free", Tensor::randn({2}, DType::F64, rng));
        ps.add("ice", Tensor::randn({2}, DType::F64, rng), /*frozen=*/true);
        Var loss = ad::sum(ad::mul(nn::param(ps, "free"), nn::param(ps, "ice")));
        GradMap g = ad::backward(loss, &ps);
        CHECK(g.has("free"));
        CHECK(!g.has("ice"));
    }

    TEST_CASE("forward_op dispatch and error contracts") {
        Var a(Tensor::full({2, 2}, 1.0, DType::F64));
        Var b(Tensor::full({2, 2}, 2.0, DType::F64));
        Var s = ad::forward_op(ad::OpKind::Add, {a, b});
        CHECK(s.value().get(0) == 3.0);

        Var bad(Tensor::full({2, 3}, 1.0, DType::F64));
        CHECK_THROWS_AS(ad::forward_op(ad::OpKind::Mul, {a, bad}), ShapeError);

        Tensor nan = Tensor::full({1}, std::nan(""), DType::F64);
        CHECK_THROWS_AS(ad::forward_op(ad::OpKind::Sigmoid, {Var(nan)}), NumericError);
    }

    TEST_CASE("deterministic forward values") {
        Rng rng = Rng::seeded(8);
        Tensor a = Tensor::randn({3, 3}, DType::F32, rng);
        Tensor b = Tensor::randn({3, 3}, DType::F32, rng);
        Var r1 = ad::matmul(ad::constant(a), ad::constant(b));
        Var r2 = ad::matmul(ad::constant(a), ad::constant(b));
        CHECK(r1.value().bits_equal(r2.value()));
    }

    TEST_CASE("randomized finite-difference sweep across shapes") {
        Rng rng = Rng::seeded(9);
        for (int trial = 0; trial < 8; ++trial) {
            std::vector<int64_t> dims;
            const int rank = 1 + static_cast<int>(rng.uniform_int(0, 3));
            for (int d = 0; d < rank; ++d) dims.push_back(1 + rng.uniform_int(0, 2));
            ParamStore ps;
            ps.add("p", Tensor::randn(dims, DType::F64, rng));
            Tensor other = Tensor::randn(dims, DType::F64, rng);
            const double err = ad::finite_diff_check(
                [&](ParamStore& p) {
                    Var v = nn::param(p, "p");
                    return ad::mean(ad::mul(ad::silu(v), ad::add(v, ad::constant(other))));
                },
                ps, 1e-5);
            CHECK(err < 1e-4);
        }
    }
}
