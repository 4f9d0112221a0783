#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "kpa/common.hpp"

using namespace kpa;

TEST_CASE("fnv1a64 matches published vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("splitmix64 matches the reference stream") {
    // Outputs of the reference generator seeded with 0; our pure mix of the
    // advancing state reproduces them.
    const std::uint64_t gamma = 0x9e3779b97f4a7c15ULL;
    CHECK(splitmix64(0) == 0xE220A8397B1DCDAFULL);
    CHECK(splitmix64(gamma) == 0x6E789E6AA1B965F4ULL);
    CHECK(splitmix64(2 * gamma) == 0x06C45D188009454FULL);
}

TEST_CASE("derive_seed is deterministic and collision-free over a batch") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 2000; ++i) {
        std::uint64_t s = derive_seed(42, i);
        CHECK(s == derive_seed(42, i));
        CHECK(seen.insert(s).second);
    }
    CHECK(derive_seed(1, 0) != derive_seed(2, 0));
}

TEST_CASE("Rng wraps the standard engine verbatim") {
    // The standard pins the 10000th output of the default-seeded engine.
    Rng rng(5489);
    std::uint64_t v = 0;
    for (int i = 0; i < 10000; ++i) v = rng.next();
    CHECK(v == 9981545732273789042ULL);

    std::mt19937_64 ref(123);
    Rng mine(123);
    for (int i = 0; i < 100; ++i) CHECK(mine.next() == ref());
}

TEST_CASE("Rng uniform helpers stay in range") {
    Rng rng(7);
    for (int i = 0; i < 10000; ++i) {
        double u = rng.unit();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        double o = rng.unit_open();
        CHECK(o > 0.0);
        CHECK(o <= 1.0);
    }
}

TEST_CASE("Rng gauss has roughly standard moments") {
    Rng rng(11);
    const int n = 40000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double g = rng.gauss();
        REQUIRE(std::isfinite(g));
        sum += g;
        sum2 += g * g;
    }
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("Rng below respects bounds and is roughly uniform") {
    Rng rng(13);
    CHECK_THROWS_AS(rng.below(0), std::invalid_argument);
    for (int i = 0; i < 100; ++i) CHECK(rng.below(1) == 0);
    std::size_t counts[4] = {0, 0, 0, 0};
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
        std::size_t v = rng.below(4);
        REQUIRE(v < 4);
        ++counts[v];
    }
    for (std::size_t c : counts) {
        CHECK(c > n / 4 - 600);
        CHECK(c < n / 4 + 600);
    }
}

TEST_CASE("sample_indices returns sorted distinct indices") {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        auto idx = rng.sample_indices(30, 7);
        REQUIRE(idx.size() == 7);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            CHECK(idx[i] < 30);
            if (i) CHECK(idx[i] > idx[i - 1]);
        }
    }
    Rng a(5), b(5);
    CHECK(a.sample_indices(100, 10) == b.sample_indices(100, 10));
    auto all = Rng(3).sample_indices(6, 6);
    CHECK(all == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
    CHECK_THROWS_AS(Rng(0).sample_indices(3, 4), std::invalid_argument);
}

TEST_CASE("sample_indices covers all subsets") {
    // every 2-subset of {0..4} should show up over enough draws
    Rng rng(23);
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (int i = 0; i < 2000; ++i) {
        auto s = rng.sample_indices(5, 2);
        seen.insert({s[0], s[1]});
    }
    CHECK(seen.size() == 10);
}

TEST_CASE("all_finite flags non-finite values") {
    std::vector<float> v{1.0f, -2.5f, 0.0f};
    CHECK(all_finite(v));
    v.push_back(std::numeric_limits<float>::quiet_NaN());
    CHECK_FALSE(all_finite(v));
    v.back() = std::numeric_limits<float>::infinity();
    CHECK_FALSE(all_finite(v));
}

TEST_CASE("string helpers") {
    CHECK(to_lower("Heart-Lung X2") == "heart-lung x2");
    CHECK(trim("  abc\t\n") == "abc");
    CHECK(trim("") == "");
    CHECK(trim("   ") == "");
    CHECK(split("a,b,c", ',') == std::vector<std::string>{"a", "b", "c"});
    CHECK(split("a,,b", ',') == std::vector<std::string>{"a", "", "b"});
    CHECK(split("", ',') == std::vector<std::string>{""});
}

TEST_CASE("little-endian scalar I/O round trips byte-exactly") {
    std::ostringstream os(std::ios::binary);
    put_u16_le(os, 0x1234);
    put_u32_le(os, 0x01020304);
    put_f32_le(os, 1.5f);
    std::string bytes = os.str();
    REQUIRE(bytes.size() == 10);
    CHECK(static_cast<unsigned char>(bytes[0]) == 0x34);
    CHECK(static_cast<unsigned char>(bytes[1]) == 0x12);
    CHECK(static_cast<unsigned char>(bytes[2]) == 0x04);
    CHECK(static_cast<unsigned char>(bytes[3]) == 0x03);
    CHECK(static_cast<unsigned char>(bytes[4]) == 0x02);
    CHECK(static_cast<unsigned char>(bytes[5]) == 0x01);

    std::istringstream is(bytes, std::ios::binary);
    CHECK(get_u16_le(is, "u16") == 0x1234);
    CHECK(get_u32_le(is, "u32") == 0x01020304);
    CHECK(get_f32_le(is, "f32") == 1.5f);

    Rng rng(29);
    std::ostringstream os2(std::ios::binary);
    std::vector<float> vals;
    for (int i = 0; i < 500; ++i) {
        float f = static_cast<float>(rng.gauss());
        vals.push_back(f);
        put_f32_le(os2, f);
    }
    std::istringstream is2(os2.str(), std::ios::binary);
    for (float f : vals) {
        float g = get_f32_le(is2, "f32");
        CHECK(std::memcmp(&f, &g, 4) == 0);
    }
}

TEST_CASE("truncated reads raise named errors") {
    std::istringstream is(std::string("\x01", 1), std::ios::binary);
    CHECK_THROWS_WITH(get_u32_le(is, "count"), Catch::Matchers::ContainsSubstring("count"));
}

TEST_CASE("Matrix rows and equality") {
    Matrix m(2, 3);
    for (std::size_t i = 0; i < 6; ++i) m.data[i] = static_cast<float>(i);
    auto r1 = m.row(1);
    REQUIRE(r1.size() == 3);
    CHECK(r1[0] == 3.0f);
    CHECK(r1[2] == 5.0f);
    Matrix n = m;
    CHECK(m == n);
    n.data[4] = 9.0f;
    CHECK_FALSE(m == n);
}
