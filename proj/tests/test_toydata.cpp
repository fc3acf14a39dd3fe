#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "probekit/autodiff.hpp"
#include "probekit/nn.hpp"
#include "probekit/toydata.hpp"

using namespace probekit;

namespace {
const toydata::DataConfig kCfg{};
}

TEST_SUITE("toydata") {
    TEST_CASE("gradient class rendered at angle zero has monotone rows") {
        toydata::ClassAttrs at;
        at.angle = 0.0;
        at.amplitude = 1.0;
        Tensor img = toydata::render_class(1, at, 16, DType::F64);
        for (int r = 0; r < 16; ++r)
            for (int c = 0; c + 1 < 16; ++c) CHECK(img.get(r * 16 + c) < img.get(r * 16 + c + 1));
    }

    TEST_CASE("sample_real is deterministic and in range") {
        for (int cls = 0; cls < 4; ++cls) {
            auto a = toydata::sample_real(cls, 77, kCfg);
            auto b = toydata::sample_real(cls, 77, kCfg);
            CHECK(a.pixels.bits_equal(b.pixels));
            CHECK(a.label == 0);
            CHECK(a.source_tag == "real");
            for (int64_t i = 0; i < a.pixels.numel(); ++i) {
                CHECK(a.pixels.get(i) >= -1.0);
                CHECK(a.pixels.get(i) <= 1.0);
            }
        }
        CHECK_THROWS_AS(toydata::sample_real(4, 1, kCfg), ContractError);
        CHECK_THROWS_AS(toydata::sample_real(-1, 1, kCfg), ContractError);
    }

    TEST_CASE("make_split counts and hierarchical seeding") {
        auto ds = toydata::make_split(2, 9, "train", kCfg);
        CHECK(ds.items.size() == 8);

        // same (class, index) item independent of n_per_class
        auto bigger = toydata::make_split(5, 9, "train", kCfg);
        CHECK(ds.items[0].pixels.bits_equal(bigger.items[0].pixels));
        CHECK(ds.items[1].pixels.bits_equal(bigger.items[1].pixels));
        CHECK(ds.items[2].pixels.bits_equal(bigger.items[5].pixels));  // class 1, idx 0

        // split name and seed both move every item
        auto other_split = toydata::make_split(2, 9, "test", kCfg);
        auto other_seed = toydata::make_split(2, 10, "train", kCfg);
        for (size_t i = 0; i < ds.items.size(); ++i) {
            CHECK(!ds.items[i].pixels.bits_equal(other_split.items[i].pixels));
            CHECK(!ds.items[i].pixels.bits_equal(other_seed.items[i].pixels));
        }
    }

    TEST_CASE("train and test splits share no identical image") {
        auto train = toydata::make_split(25, 3, "train", kCfg);
        auto test = toydata::make_split(25, 3, "test", kCfg);
        for (const auto& a : train.items)
            for (const auto& b : test.items) CHECK(!a.pixels.bits_equal(b.pixels));
    }

    TEST_CASE("dataset archive round trip is bit exact") {
        auto ds = toydata::make_split(3, 11, "io", kCfg);
        ds.items[0].source_tag = "gen_base";
        ds.items[0].label = 1;
        const std::string path = (std::filesystem::temp_directory_path() / "pk_ds.ptar").string();
        toydata::save_dataset(path, ds);
        auto back = toydata::load_dataset(path);
        REQUIRE(back.items.size() == ds.items.size());
        CHECK(back.split_name == "io");
        for (size_t i = 0; i < ds.items.size(); ++i) {
            CHECK(back.items[i].pixels.bits_equal(ds.items[i].pixels));
            CHECK(back.items[i].class_id == ds.items[i].class_id);
            CHECK(back.items[i].label == ds.items[i].label);
            CHECK(back.items[i].source_tag == ds.items[i].source_tag);
        }
        // rerun produces byte-identical files
        const std::string path2 = (std::filesystem::temp_directory_path() / "pk_ds2.ptar").string();
        toydata::save_dataset(path2, ds);
        std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
        std::string b1((std::istreambuf_iterator<char>(f1)), {});
        std::string b2((std::istreambuf_iterator<char>(f2)), {});
        CHECK(b1 == b2);
        std::filesystem::remove(path);
        std::filesystem::remove(path + ".json");
        std::filesystem::remove(path2);
        std::filesystem::remove(path2 + ".json");
    }

    TEST_CASE("classes are separable by a small trained classifier") {
        // 2-layer net with 4 one-vs-rest logits; accuracy well above chance
        // establishes the class structure the conditional generator relies on
        auto train = toydata::make_split(60, 5, "cls-train", kCfg);
        auto test = toydata::make_split(25, 5, "cls-test", kCfg);
        Rng rng = Rng::seeded(1);
        ParamStore ps;
        ps.add("w1", nn::kaiming_init(32, 256, DType::F32, rng));
        ps.add("b1", Tensor::zeros({32}, DType::F32));
        ps.add("w2", nn::kaiming_init(4, 32, DType::F32, rng));
        ps.add("b2", Tensor::zeros({4}, DType::F32));
        nn::Adam opt(3e-3);
        Rng order = Rng::seeded(2);
        for (int step = 0; step < 400; ++step) {
            const int B = 32;
            Tensor x({B, 256}, DType::F32), y({B, 4}, DType::F32);
            for (int r = 0; r < B; ++r) {
                const auto& item =
                    train.items[static_cast<size_t>(order.uniform_int(0, static_cast<int64_t>(train.items.size()) - 1))];
                for (int64_t i = 0; i < 256; ++i) x.set1(r * 256 + i, item.pixels.get(i));
                for (int c = 0; c < 4; ++c) y.set1(r * 4 + c, item.class_id == c ? 1.0 : 0.0);
            }
            ad::Var h = ad::relu(nn::linear(ad::constant(x), nn::param(ps, "w1"), nn::param(ps, "b1")));
            ad::Var z = nn::linear(h, nn::param(ps, "w2"), nn::param(ps, "b2"));
            ad::Var loss = ad::bce_with_logits(z, ad::constant(y));
            opt.step(ps, ad::backward(loss));
        }
        int correct = 0;
        for (const auto& item : test.items) {
            ad::NoGradGuard ng;
            Tensor x = item.pixels.astype(DType::F32).reshaped({1, 256});
            ad::Var h = ad::relu(nn::linear(ad::constant(x), nn::param(ps, "w1"), nn::param(ps, "b1")));
            ad::Var z = nn::linear(h, nn::param(ps, "w2"), nn::param(ps, "b2"));
            int best = 0;
            for (int c = 1; c < 4; ++c)
                if (z.value().get(c) > z.value().get(best)) best = c;
            correct += best == item.class_id;
        }
        CHECK(static_cast<double>(correct) / static_cast<double>(test.items.size()) > 0.9);
    }
}
