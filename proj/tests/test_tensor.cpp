#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "probekit/tensor.hpp"

using namespace probekit;

TEST_SUITE("tensor") {
    TEST_CASE("construction and invariants") {
        Tensor t({2, 3}, DType::F32);
        CHECK(t.numel() == 6);
        CHECK(t.rank() == 2);
        CHECK(t.all_finite());
        CHECK_THROWS_AS(Tensor({2, 0}, DType::F32), ShapeError);
        CHECK_THROWS_AS(Tensor({-1}, DType::F64), ShapeError);
    }

    TEST_CASE("copy shares storage, mut copies when shared") {
        Tensor a = Tensor::full({4}, 2.0, DType::F64);
        Tensor b = a;
        b.mut<double>()[0] = 7.0;
        CHECK(a.get(0) == 2.0);
        CHECK(b.get(0) == 7.0);
    }

    TEST_CASE("reshape shares data and checks counts") {
        Rng rng = Rng::seeded(1);
        Tensor a = Tensor::randn({2, 6}, DType::F32, rng);
        Tensor b = a.reshaped({3, 4});
        CHECK(b.dim(0) == 3);
        CHECK(a.get(5) == b.get(5));
        CHECK_THROWS_AS(a.reshaped({5, 2}), ShapeError);
    }

    TEST_CASE("astype round trip widens exactly") {
        Rng rng = Rng::seeded(2);
        Tensor a = Tensor::randn({10}, DType::F32, rng);
        Tensor b = a.astype(DType::F64).astype(DType::F32);
        CHECK(a.bits_equal(b));
    }

    TEST_CASE("ptns round trip is bit exact") {
        Rng rng = Rng::seeded(3);
        for (const DType dt : {DType::F32, DType::F64}) {
            Tensor t = Tensor::randn({3, 4, 2}, dt, rng);
            std::stringstream ss;
            t.save_ptns(ss);
            Tensor back = Tensor::load_ptns(ss);
            CHECK(back.bits_equal(t));
        }
    }

    TEST_CASE("ptns header layout") {
        Tensor t = Tensor::full({2}, 1.5, DType::F32);
        std::stringstream ss;
        t.save_ptns(ss);
        const std::string bytes = ss.str();
        REQUIRE(bytes.size() == 4 + 2 + 1 + 1 + 8 + 2 * 4);
        CHECK(bytes[0] == 'P');
        CHECK(bytes[1] == 'T');
        CHECK(bytes[2] == 'N');
        CHECK(bytes[3] == 'S');
        CHECK(bytes[4] == 1);  // version u16 LE
        CHECK(bytes[5] == 0);
        CHECK(bytes[6] == 0);  // dtype f32
        CHECK(bytes[7] == 1);  // rank
        CHECK(static_cast<unsigned char>(bytes[8]) == 2);  // dim u64 LE
    }

    TEST_CASE("ptar round trip preserves order and names") {
        Rng rng = Rng::seeded(4);
        std::vector<ArchiveEntry> entries;
        entries.push_back({"b/second", Tensor::randn({4}, DType::F32, rng)});
        entries.push_back({"a/first", Tensor::randn({2, 2}, DType::F64, rng)});
        const std::string path = (std::filesystem::temp_directory_path() / "pk_test.ptar").string();
        save_ptar(path, entries);
        auto back = load_ptar(path);
        REQUIRE(back.size() == 2);
        CHECK(back[0].name == "b/second");
        CHECK(back[1].name == "a/first");
        CHECK(back[0].tensor.bits_equal(entries[0].tensor));
        CHECK(back[1].tensor.bits_equal(entries[1].tensor));
        std::filesystem::remove(path);
    }

    TEST_CASE("param store ordering and freezing") {
        ParamStore ps;
        Rng rng = Rng::seeded(5);
        ps.add("w", Tensor::randn({2, 2}, DType::F32, rng));
        ps.add("b", Tensor::randn({2}, DType::F32, rng));
        CHECK(ps.names() == std::vector<std::string>{"w", "b"});
        CHECK_THROWS_AS(ps.add("w", Tensor::zeros({1}, DType::F32)), ContractError);
        ps.freeze("w");
        CHECK(ps.is_frozen("w"));
        CHECK(!ps.is_frozen("b"));
        CHECK_THROWS_AS(ps.get("missing"), ContractError);
    }

    TEST_CASE("rng determinism and stream separation") {
        Rng a = Rng::seeded(42), b = Rng::seeded(42);
        for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
        CHECK(derive_seed(1, "x") != derive_seed(1, "y"));
        CHECK(derive_seed(1, "x", 0) != derive_seed(1, "x", 1));
        CHECK(derive_seed(1, "x") == derive_seed(1, "x"));
    }

    TEST_CASE("normal draws have sane moments") {
        Rng rng = Rng::seeded(6);
        double sum = 0, sq = 0;
        const int n = 20000;
        for (int i = 0; i < n; ++i) {
            const double z = rng.normal();
            sum += z;
            sq += z * z;
        }
        CHECK(std::abs(sum / n) < 0.03);
        CHECK(std::abs(sq / n - 1.0) < 0.05);
    }
}
