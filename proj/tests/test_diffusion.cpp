#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "probekit/diffusion.hpp"
#include "probekit/lora.hpp"
#include "probekit/toydata.hpp"

using namespace probekit;
using diffusion::make_schedule;

TEST_SUITE("diffusion") {
    TEST_CASE("schedule construction and validation") {
        CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.05, 0.0), ConfigError);
        CHECK_THROWS_AS(make_schedule(10, 0.0, 0.05, 0.0), ConfigError);
        CHECK_THROWS_AS(make_schedule(10, 0.06, 0.05, 0.0), ConfigError);
        CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0, 0.0), ConfigError);

        auto s = make_schedule(35, 1e-4, 0.05, 0.0);
        CHECK(s.alpha_bar[0] == 1.0);
        for (int t = 1; t <= 35; ++t) {
            CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            CHECK(s.alpha_bar[t] > 0.0);
        }
        CHECK(s.alpha_bar[35] < 0.5);
    }

    TEST_CASE("eta zero kills the stochastic coefficient") {
        auto s = make_schedule(20, 1e-4, 0.05, 0.0);
        for (int t = 1; t <= 20; ++t) CHECK(s.ddim_coeffs(t).c == 0.0);
        CHECK_THROWS_AS(s.ddim_coeffs(0), ContractError);
        CHECK_THROWS_AS(s.ddim_coeffs(21), ContractError);
    }

    TEST_CASE("coefficient identities") {
        auto s = make_schedule(35, 1e-4, 0.05, 0.0);
        // a_t sqrt(abar_t) = sqrt(abar_{t-1}) for every t
        for (int t = 1; t <= 35; ++t) {
            const double lhs = s.ddim_coeffs(t).a * std::sqrt(s.alpha_bar[t]);
            CHECK(rel_err(lhs, std::sqrt(s.alpha_bar[t - 1])) < 1e-12);
        }
        // telescoping: prod a_t = sqrt(1 / abar_T)
        double prod = 1.0;
        for (int t = 1; t <= 35; ++t) prod *= s.ddim_coeffs(t).a;
        CHECK(rel_err(prod, std::sqrt(1.0 / s.alpha_bar[35])) < 1e-10);
        CHECK(rel_err(s.a_prod_below(3), s.ddim_coeffs(1).a * s.ddim_coeffs(2).a) < 1e-14);
    }

    TEST_CASE("one-step schedule inverts forward noising") {
        // T=1: abar_0 = 1 so a_1 = 1/sqrt(abar), b_1 = -sqrt((1-abar)/abar)
        auto s = make_schedule(1, 0.3, 0.3, 0.0);
        const double abar = s.alpha_bar[1];
        const auto [a1, b1, c1] = s.ddim_coeffs(1);
        CHECK(rel_err(a1, 1.0 / std::sqrt(abar)) < 1e-12);
        CHECK(rel_err(b1, -std::sqrt((1.0 - abar) / abar)) < 1e-12);
        CHECK(c1 == 0.0);

        Rng rng = Rng::seeded(3);
        Tensor x0 = Tensor::randn({1, 16}, DType::F64, rng);
        Tensor eps = Tensor::randn({1, 16}, DType::F64, rng);
        Tensor x1 = diffusion::q_sample(x0, 1, eps, s);
        Tensor back = diffusion::ddim_step(x1, eps, 1, s);
        CHECK(max_rel_err(back, x0) < 1e-6);
    }

    TEST_CASE("q_sample edge cases") {
        auto s = make_schedule(5, 1e-4, 0.02, 0.0);
        Rng rng = Rng::seeded(4);
        Tensor x0 = Tensor::randn({2, 3}, DType::F64, rng);
        Tensor eps = Tensor::randn({2, 3}, DType::F64, rng);
        // t = 0 has abar = 1
        CHECK(max_rel_err(diffusion::q_sample(x0, 0, eps, s), x0) < 1e-15);
        // eps = 0 scales by sqrt(abar_t)
        Tensor z = Tensor::zeros({2, 3}, DType::F64);
        Tensor xt = diffusion::q_sample(x0, 3, z, s);
        for (int64_t i = 0; i < x0.numel(); ++i)
            CHECK(rel_err(xt.get(i), std::sqrt(s.alpha_bar[3]) * x0.get(i)) < 1e-14);
        Tensor bad = Tensor::zeros({3, 2}, DType::F64);
        CHECK_THROWS_AS(diffusion::q_sample(x0, 1, bad, s), ShapeError);
    }

    TEST_CASE("sampling is deterministic and lora-zero leaves it unchanged") {
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 16;
        nc.time_freqs = 4;
        nc.dtype = DType::F64;
        auto net = diffusion::DenoiserNet::init(nc, 11);
        auto sched = make_schedule(6, 1e-3, 0.04, 0.0);

        diffusion::SampleRequest req;
        req.class_id = 2;
        req.guidance = 2.0;
        req.seed = 99;
        auto a = diffusion::sample(net, nullptr, sched, req);
        auto b = diffusion::sample(net, nullptr, sched, req);
        CHECK(a.x0.value().bits_equal(b.x0.value()));

        auto net2 = net;
        net2.params() = net.params().clone();
        auto lp = lora::attach_lora(net2, 2, diffusion::lora_target_names(), 5);
        auto c = diffusion::sample(net2, &lp, sched, req);
        CHECK(c.x0.value().bits_equal(a.x0.value()));

        diffusion::SampleRequest other = req;
        other.seed = 100;
        CHECK(!diffusion::sample(net, nullptr, sched, other).x0.value().bits_equal(a.x0.value()));
    }

    TEST_CASE("plain sampling builds no graph; routed detachment is total") {
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 16;
        nc.time_freqs = 4;
        nc.dtype = DType::F64;
        auto net = diffusion::DenoiserNet::init(nc, 12);
        auto sched = make_schedule(5, 1e-3, 0.04, 0.0);
        auto lp = lora::attach_lora(net, 2, diffusion::lora_target_names(), 6);

        diffusion::SampleRequest req;
        req.class_id = 0;
        req.guidance = 2.0;
        req.seed = 1;
        req.grad_plan = probe::empty_plan(5);
        auto out = diffusion::sample(net, &lp, sched, req);
        CHECK(!out.x0.requires_grad());
        CHECK(diffusion::last_recorded_net_calls() == 0);
        GradMap g = ad::backward(ad::sum(out.x0), &lp.params);
        CHECK(g.max_abs() == 0.0);

        // recorded activations stay bounded by the plan size
        req.grad_plan = probe::make_train_steps(5, 2, 1);
        auto routed = diffusion::sample(net, &lp, sched, req);
        CHECK(routed.x0.requires_grad());
        CHECK(diffusion::last_recorded_net_calls() ==
              static_cast<int>(req.grad_plan->steps.size()));
    }

    TEST_CASE("trajectory records every x_t") {
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 16;
        nc.time_freqs = 4;
        nc.dtype = DType::F64;
        auto net = diffusion::DenoiserNet::init(nc, 13);
        auto sched = make_schedule(4, 1e-3, 0.04, 0.0);
        diffusion::SampleRequest req;
        req.class_id = 1;
        req.guidance = 0.0;
        req.seed = 5;
        req.record_trajectory = true;
        auto out = diffusion::sample(net, nullptr, sched, req);
        REQUIRE(out.trajectory.has_value());
        REQUIRE(out.trajectory->x.size() == 5);
        for (const auto& x : out.trajectory->x) CHECK(x.defined());
        CHECK(out.trajectory->x[0].bits_equal(out.x0.value()));
    }

    TEST_CASE("grad plan steps outside the horizon are rejected") {
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 16;
        nc.time_freqs = 4;
        auto net = diffusion::DenoiserNet::init(nc, 14);
        auto sched = make_schedule(4, 1e-3, 0.04, 0.0);
        diffusion::SampleRequest req;
        req.class_id = 0;
        req.seed = 2;
        probe::TrainStepPlan plan = probe::empty_plan(4);
        plan.steps = {5};
        req.grad_plan = plan;
        CHECK_THROWS_AS(diffusion::sample(net, nullptr, sched, req), ContractError);
    }

    TEST_CASE("training lowers held-out denoising loss") {
        toydata::DataConfig dc;
        dc.image_size = 8;
        auto data = toydata::make_split(40, 21, "dn-train", dc);
        auto held = toydata::make_split(10, 21, "dn-held", dc);
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 32;
        nc.time_freqs = 8;
        auto sched = make_schedule(8, 1e-3, 0.05, 0.0);

        std::vector<Tensor> images;
        std::vector<int> cids;
        for (const auto& it : data.items) {
            images.push_back(it.pixels);
            cids.push_back(it.class_id);
        }

        auto heldout_loss = [&](const diffusion::DenoiserNet& net) {
            ad::NoGradGuard ng;
            Rng rng = Rng::seeded(77);
            double total = 0.0;
            int count = 0;
            for (const auto& it : held.items) {
                const int t = static_cast<int>(rng.uniform_int(1, sched.T));
                Tensor eps = Tensor::randn({1, 64}, DType::F32, rng);
                Tensor x0 = it.pixels.astype(DType::F32).reshaped({1, 64});
                Tensor xt = diffusion::q_sample(x0, t, eps, sched);
                const int ts[1] = {t};
                const int cs[1] = {it.class_id};
                ad::Var pred = net.forward(ad::constant(xt), ts, cs, nullptr);
                total += ad::mse(pred, ad::constant(eps)).value().get(0);
                ++count;
            }
            return total / count;
        };

        for (const uint64_t seed : {101ull, 102ull, 103ull, 104ull, 105ull}) {
            auto net = diffusion::DenoiserNet::init(nc, seed);
            const double before = heldout_loss(net);
            diffusion::TrainConfig tc;
            tc.steps = 250;
            tc.lr = 2e-3;
            tc.batch = 16;
            tc.seed = seed;
            auto log = diffusion::train_denoiser(net, images, cids, sched, tc);
            CHECK(!log.empty());
            CHECK(heldout_loss(net) < before);
        }
    }

    TEST_CASE("training is deterministic per seed; cond_drop=1 freezes class rows") {
        toydata::DataConfig dc;
        dc.image_size = 8;
        auto data = toydata::make_split(10, 22, "dn-det", dc);
        std::vector<Tensor> images;
        std::vector<int> cids;
        for (const auto& it : data.items) {
            images.push_back(it.pixels);
            cids.push_back(it.class_id);
        }
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 16;
        nc.time_freqs = 4;
        auto sched = make_schedule(5, 1e-3, 0.05, 0.0);
        diffusion::TrainConfig tc;
        tc.steps = 30;
        tc.batch = 8;
        tc.seed = 9;

        auto n1 = diffusion::DenoiserNet::init(nc, 31);
        auto n2 = diffusion::DenoiserNet::init(nc, 31);
        diffusion::train_denoiser(n1, images, cids, sched, tc);
        diffusion::train_denoiser(n2, images, cids, sched, tc);
        CHECK(n1.params().bits_equal(n2.params()));

        // never-conditioned training leaves the non-null class rows untouched
        auto n3 = diffusion::DenoiserNet::init(nc, 31);
        const Tensor table_before = n3.params().get("class.table").clone();
        diffusion::TrainConfig drop = tc;
        drop.cond_drop = 1.0;
        diffusion::train_denoiser(n3, images, cids, sched, drop);
        const Tensor& table_after = n3.params().get("class.table");
        for (int cls = 0; cls < nc.classes; ++cls)
            for (int i = 0; i < nc.hidden; ++i)
                CHECK(table_after.get(cls * nc.hidden + i) == table_before.get(cls * nc.hidden + i));
    }

    TEST_CASE("conditioning separates class statistics at sampling time") {
        toydata::DataConfig dc;
        dc.image_size = 8;
        auto data = toydata::make_split(50, 23, "dn-guide", dc);
        std::vector<Tensor> images;
        std::vector<int> cids;
        for (const auto& it : data.items) {
            images.push_back(it.pixels);
            cids.push_back(it.class_id);
        }
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 48;
        nc.time_freqs = 8;
        auto sched = make_schedule(8, 1e-3, 0.05, 0.0);
        auto net = diffusion::DenoiserNet::init(nc, 41);
        diffusion::TrainConfig tc;
        tc.steps = 600;
        tc.lr = 2e-3;
        tc.batch = 32;
        tc.seed = 41;
        diffusion::train_denoiser(net, images, cids, sched, tc);

        auto mean_abs_pixels = [&](int cls, double g) {
            double m = 0.0;
            const int n = 48;
            for (int i = 0; i < n; ++i) {
                diffusion::SampleRequest req;
                req.class_id = cls;
                req.guidance = g;
                req.seed = derive_seed(500 + cls, "guide", static_cast<uint64_t>(i));
                auto out = diffusion::sample(net, nullptr, sched, req);
                Tensor img = out.x0.value();
                double s = 0;
                for (int64_t p = 0; p < img.numel(); ++p) s += std::abs(img.get(p));
                m += s / static_cast<double>(img.numel());
            }
            return m / n;
        };
        // under conditioning, different classes produce measurably different
        // sample statistics
        const double blob = mean_abs_pixels(0, 1.0);
        const double stripes = mean_abs_pixels(2, 1.0);
        CHECK(std::abs(blob - stripes) > 0.02);
    }

    TEST_CASE("checkpoint round trip") {
        diffusion::DenoiserConfig nc;
        nc.image_size = 8;
        nc.hidden = 16;
        nc.time_freqs = 4;
        auto net = diffusion::DenoiserNet::init(nc, 51);
        const std::string path = (std::filesystem::temp_directory_path() / "pk_gen.ptar").string();
        net.save(path);
        auto back = diffusion::DenoiserNet::load(path);
        CHECK(back.params().bits_equal(net.params()));
        CHECK(back.cfg().hidden == 16);
        std::filesystem::remove(path);
        std::filesystem::remove(path + ".json");
    }
}
