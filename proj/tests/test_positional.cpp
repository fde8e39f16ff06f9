#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "peswap/positional.hpp"
#include "peswap/rng.hpp"

using namespace peswap;

TEST_CASE("pe kind strings round-trip and reject junk") {
    for (PEKind k : all_pe_kinds()) CHECK(pe_kind_from_string(pe_kind_name(k)) == k);
    CHECK(!pe_kind_from_string("SINE").has_value());
    CHECK_THROWS_AS(parse_pe_kind("rotary"), std::invalid_argument);
    try {
        parse_pe_kind("rotary");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("rotary") != std::string::npos);
    }
}

TEST_CASE("sinusoid: closed-form rows") {
    SinusoidTable<double> table(64, 4);
    Tensor<double> row0 = table.embed({0});
    CHECK(row0[0] == doctest::Approx(0));
    CHECK(row0[1] == doctest::Approx(1));
    CHECK(row0[2] == doctest::Approx(0));
    CHECK(row0[3] == doctest::Approx(1));

    Tensor<double> row1 = table.embed({1});
    CHECK(row1[0] == doctest::Approx(0.84147).epsilon(1e-5));
    CHECK(row1[1] == doctest::Approx(0.54030).epsilon(1e-5));
    CHECK(row1[2] == doctest::Approx(0.01000).epsilon(1e-4));
    CHECK(row1[3] == doctest::Approx(0.99995).epsilon(1e-5));
}

TEST_CASE("sinusoid: every row satisfies the pythagorean identity") {
    const int64_t d = 16;
    SinusoidTable<double> table(128, d);
    for (int64_t pos = 0; pos < 128; ++pos) {
        const Tensor<double>& t = table.table();
        double sum = 0;
        for (int64_t i = 0; i < d / 2; ++i) {
            const double s = t[pos * d + 2 * i], c = t[pos * d + 2 * i + 1];
            sum += s * s + c * c;
            CHECK(s * s + c * c == doctest::Approx(1.0).epsilon(1e-6));
        }
        CHECK(sum == doctest::Approx(double(d) / 2).epsilon(1e-6));
    }
}

TEST_CASE("sinusoid: position out of range throws") {
    SinusoidTable<float> table(8, 4);
    CHECK_THROWS_AS(table.embed({8}), std::out_of_range);
    CHECK_THROWS_AS(table.embed({-1}), std::out_of_range);
    CHECK_NOTHROW(table.embed({7}));
}

TEST_CASE("rope: zero rotation is bitwise identity") {
    RopeState st(8);
    RngStream rng(1, 1);
    Tensor<double> x(Shape{3, 8});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
    Tensor<double> y = rope_rotate(x, {0, 0, 0}, st);
    CHECK(y.bitwise_equal(x));
}

TEST_CASE("rope: rotations preserve norms") {
    RopeState st(16);
    RngStream rng(2, 1);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<double> x(Shape{1, 16});
        for (int64_t i = 0; i < 16; ++i) x[i] = rng.gaussian();
        const int64_t m = static_cast<int64_t>(rng.below(2048));
        Tensor<double> y = rope_rotate(x, {m}, st);
        double nx = 0, ny = 0;
        for (int64_t i = 0; i < 16; ++i) {
            nx += x[i] * x[i];
            ny += y[i] * y[i];
        }
        CHECK(std::sqrt(ny) == doctest::Approx(std::sqrt(nx)).epsilon(1e-6));
    }
}

TEST_CASE("rope: dot products depend only on relative position") {
    RopeState st(8);
    RngStream rng(3, 1);
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor<double> q(Shape{1, 8}), k(Shape{1, 8});
        for (int64_t i = 0; i < 8; ++i) {
            q[i] = rng.gaussian();
            k[i] = rng.gaussian();
        }
        const int64_t m = static_cast<int64_t>(rng.below(513));
        const int64_t n = static_cast<int64_t>(rng.below(513));
        Tensor<double> qm = rope_rotate(q, {m}, st);
        Tensor<double> kn = rope_rotate(k, {n}, st);
        Tensor<double> qrel = rope_rotate(q, {m - n}, st);
        double lhs = 0, rhs = 0;
        for (int64_t i = 0; i < 8; ++i) {
            lhs += qm[i] * kn[i];
            rhs += qrel[i] * k[i];
        }
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
    }
}

TEST_CASE("rope: angles strictly decreasing; odd head dim rejected") {
    RopeState st(10);
    for (size_t i = 1; i < st.angles.size(); ++i) CHECK(st.angles[i] < st.angles[i - 1]);
    CHECK(st.angles[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(RopeState(7), std::invalid_argument);
}

TEST_CASE("alibi: power-of-two slope tables") {
    const AlibiSlopes s8 = alibi_slopes(8);
    const std::vector<double> want8 = {1 / 2.0,  1 / 4.0,  1 / 8.0,   1 / 16.0,
                                       1 / 32.0, 1 / 64.0, 1 / 128.0, 1 / 256.0};
    REQUIRE(s8.slopes.size() == 8);
    for (size_t i = 0; i < 8; ++i) CHECK(s8.slopes[i] == want8[i]);
    for (size_t i = 1; i < 8; ++i) CHECK(s8.slopes[i] < s8.slopes[i - 1]);

    CHECK(alibi_slopes(1).slopes == std::vector<double>{1 / 256.0});
    CHECK(alibi_slopes(2).slopes == (std::vector<double>{1 / 16.0, 1 / 256.0}));
    CHECK_THROWS_AS(alibi_slopes(0), std::invalid_argument);
}

TEST_CASE("alibi: non-power-of-two interleaves the doubled sequence") {
    // p = 4 gives [2^-2, 2^-4, 2^-6, 2^-8]; the 8-head list interleaved from
    // index 0 contributes [2^-1, 2^-3] for n = 6.
    const AlibiSlopes s6 = alibi_slopes(6);
    const std::vector<double> want = {1 / 4.0, 1 / 16.0, 1 / 64.0, 1 / 256.0, 1 / 2.0, 1 / 8.0};
    REQUIRE(s6.slopes.size() == 6);
    for (size_t i = 0; i < want.size(); ++i) CHECK(s6.slopes[i] == doctest::Approx(want[i]));
}

TEST_CASE("alibi: bias matrices") {
    const AlibiSlopes slopes = alibi_slopes(2);
    const Tensor<double> causal = alibi_bias<double>(slopes, 4, 4, true);
    const Tensor<double> both = alibi_bias<double>(slopes, 4, 4, false);

    for (int64_t h = 0; h < 2; ++h)
        for (int64_t i = 0; i < 4; ++i) {
            CHECK(causal[(h * 4 + i) * 4 + i] == 0.0);
            CHECK(both[(h * 4 + i) * 4 + i] == 0.0);
        }
    // causal, slope 1/2 fixture: i=3, j=1 -> -(1/2)*2
    const AlibiSlopes half{1, {0.5}};
    const Tensor<double> c = alibi_bias<double>(half, 4, 4, true);
    CHECK(c[3 * 4 + 1] == doctest::Approx(-1.0));

    // bidirectional bias is symmetric; rows decay monotonically with distance
    for (int64_t h = 0; h < 2; ++h)
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 4; ++j) {
                CHECK(both[(h * 4 + i) * 4 + j] == both[(h * 4 + j) * 4 + i]);
                if (j > 0 && j <= i)
                    CHECK(c[(0 * 4 + i) * 4 + j] >= c[(0 * 4 + i) * 4 + j - 1]);
            }
    CHECK_THROWS_AS(alibi_bias<double>(slopes, 0, 4, true), std::invalid_argument);
}

TEST_CASE("nope: bitwise identity") {
    RngStream rng(4, 1);
    Tensor<float> x(Shape{5, 3});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.gaussian());
    CHECK(nope_apply(x).bitwise_equal(x));
}

TEST_CASE("rope tape op: gradient matches finite differences") {
    RopeState st(8);
    ParamStore<double> store;
    RngStream rng(6, 1);
    Tensor<double> init(Shape{2, 3, 8});
    for (int64_t i = 0; i < init.size(); ++i) init[i] = rng.gaussian();
    auto* p = store.add("x", init);
    auto loss_fn = [&]() {
        Tape<double> tape;
        auto v = tape.param(*p);
        auto r = rope_rotate(tape, v, {5, 17, 400}, st);
        // squared magnitude via bmm against itself
        auto sq = tape.bmm_nt(r, r);
        auto loss = tape.mean_all(sq);
        const double out = tape.value(loss)[0];
        tape.backward(loss);
        return out;
    };
    auto params = store.all();
    RngStream pick(6, 2);
    auto rep = finite_diff_check<double>(loss_fn,
                                         std::span<Parameter<double>* const>(params.data(),
                                                                             params.size()),
                                         1e-5, 30, pick);
    CHECK(rep.max_rel_error < 1e-6);
}
