#include "nes/epitome.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace nes;
using testing::pick;

namespace {

Epitome counting_epitome(Dims4 d)
{
    Epitome e(d);
    for (std::size_t i = 0; i < e.size(); ++i) e.values()[i] = static_cast<double>(i + 1);
    return e;
}

} // namespace

TEST_CASE("interp_kernel")
{
    CHECK(interp_kernel(2, 2.0) == 1.0);
    CHECK(interp_kernel(2, 2.4) == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(interp_kernel(5, 3.4) == 0.0);
    CHECK(interp_kernel(3, 4.0) == 0.0);
}

TEST_CASE("axis_tap picks the two neighbouring starts")
{
    AxisTap t = axis_tap(1.25, 4);
    CHECK(t.base == 1);
    CHECK(t.next == 2);
    CHECK(t.w_base == 0.75);
    CHECK(t.w_next == 0.25);
    AxisTap w = axis_tap(3.5, 4);
    CHECK(w.base == 3);
    CHECK(w.next == 0);
    CHECK(!axis_tap(2.0, 4).fractional());
}

TEST_CASE("sample_spatial")
{
    Rng rng(2);
    Epitome e(random_uniform({3, 4, 2, 2}, rng));
    CHECK(sample_spatial(e, 0.0, 0.0, 3, 4) == e.values());

    Epitome row(Tensor({3, 1, 1, 1}, std::vector<double>{1, 2, 3}));
    Tensor s = sample_spatial(row, 0.5, 0.0, 3, 1);
    CHECK(s.values() == std::vector<double>{1.5, 2.5, 2.0});

    // p = 1.25 on a length-4 axis: starts 1 (0.75) and 2 (0.25) only.
    Epitome four(Tensor({4, 1, 1, 1}, std::vector<double>{10, 20, 30, 40}));
    CHECK(sample_spatial(four, 1.25, 0.0, 1, 1)[0] == doctest::Approx(0.75 * 20 + 0.25 * 30));

    CHECK_THROWS_AS(sample_spatial(row, 0.5, 0.0, 3, 1, false), std::out_of_range);
    CHECK(sample_spatial(row, 0.0, 0.0, 3, 1, false).values() == std::vector<double>{1, 2, 3});
}

TEST_CASE("sample_channel and sample_filter")
{
    Rng rng(3);
    Epitome e(random_uniform({2, 2, 5, 4}, rng));
    Tensor c0 = sample_channel(e, 0.0, 5);
    CHECK(c0 == e.values());
    CHECK_THROWS_AS(sample_channel(e, 0.0, 6), ConfigError);
    CHECK_THROWS_AS(sample_filter(e, 0.0, 5), ConfigError);

    Tensor f2 = sample_filter(e, 2.0, 2);
    for (std::size_t x = 0; x < 2; ++x)
        for (std::size_t k = 0; k < 5; ++k)
            for (std::size_t b = 0; b < 2; ++b) CHECK(f2.at({x, 1, k, b}) == e.values().at({x, 1, k, 2 + b}));

    for (int trial = 0; trial < 20; ++trial) {
        const double c = rng.uniform(0.0, 5.0);
        const std::size_t beta = pick(rng, 1, 5);
        Tensor got = sample_channel(e, c, beta);
        for (std::size_t a = 0; a < beta; ++a)
            for (std::size_t k = 0; k < 5; ++k) {
                const double g = testing::periodic_weight(c + static_cast<double>(a), k, 5);
                for (std::size_t o = 0; o < 4; ++o) {
                    double want = 0.0;
                    for (std::size_t kk = 0; kk < 5; ++kk)
                        want += testing::periodic_weight(c + static_cast<double>(a), kk, 5) * e.values().at({1, 0, kk, o});
                    CHECK(std::abs(got.at({1, 0, a, o}) - want) <= 1e-12);
                    (void)g;
                }
            }
        const double co = rng.uniform(0.0, 4.0);
        Tensor gf = sample_filter(e, co, 3);
        for (std::size_t b = 0; b < 3; ++b) {
            double want = 0.0;
            for (std::size_t o = 0; o < 4; ++o)
                want += testing::periodic_weight(co + static_cast<double>(b), o, 4) * e.values().at({0, 1, 2, o});
            CHECK(std::abs(gf.at({0, 1, 2, b}) - want) <= 1e-12);
        }
    }
}

TEST_CASE("channel grouping with fractional starts")
{
    // Six input channels in two blocks of three against a three-channel
    // epitome. The weight on epitome channel 0 of F1..F6 tells which features
    // are summed into the operand that multiplies E1.
    Epitome e(Dims4{1, 1, 3, 1});
    LayerPlan plan = LayerPlan::make(LayerKind::fc, {1, 1, 6, 1}, {1, 1, 3, 1});
    auto coefficients = [&](double s0, double s1) {
        IndexSet idx = IndexSet::zeros(plan);
        idx.in_blocks[0].c_in = s0;
        idx.in_blocks[1].c_in = s1;
        std::vector<double> w(6);
        for (std::size_t k = 0; k < 6; ++k) {
            Tensor probe(Shape{1, 1, 3, 1});
            probe[0] = 1.0; // E1
            w[k] = expand_weights(Epitome(probe), plan, idx).at({0, 0, k, 0});
        }
        return w;
    };
    // Integer case: F1 and F4 meet E1.
    auto integer = coefficients(0.0, 0.0);
    CHECK(integer == std::vector<double>{1, 0, 0, 1, 0, 0});

    // The blend 0.6F1 + 0.3F4 + 0.4F3 + 0.7F6 arise from starts
    // 0.4 and 0.7 under G (start 0.4 gives E1 weight 0.6 on F1 and 0.4 on F3).
    auto frac = coefficients(0.4, 0.7);
    const std::vector<double> blend{0.6, 0, 0.4, 0.3, 0, 0.7};
    for (std::size_t k = 0; k < 6; ++k) CHECK(frac[k] == doctest::Approx(blend[k]).epsilon(1e-15));
    // Starts 0.6 and 0.3 taken literally give the mirrored weights.
    auto literal = coefficients(0.6, 0.3);
    const std::vector<double> mirrored{0.4, 0, 0.6, 0.7, 0, 0.3};
    for (std::size_t k = 0; k < 6; ++k) CHECK(literal[k] == doctest::Approx(mirrored[k]).epsilon(1e-15));
}

TEST_CASE("expand_weights examples")
{
    Rng rng(4);
    Dims4 d{3, 3, 4, 5};
    Epitome e(random_uniform(d.shape(), rng));
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, d, d);
    CHECK(expand_weights(e, plan, IndexSet::zeros(plan)) == e.values());

    // Integer starts copy values without blending.
    Epitome c = counting_epitome({4, 4, 3, 3});
    LayerPlan p2 = LayerPlan::make(LayerKind::conv2d, {3, 2, 7, 5}, {4, 4, 3, 3});
    IndexSet idx = IndexSet::zeros(p2);
    for (auto& b : idx.in_blocks) b = {static_cast<double>(rng.below(4)), static_cast<double>(rng.below(4)), static_cast<double>(rng.below(3))};
    for (auto& o : idx.out_blocks) o = static_cast<double>(rng.below(3));
    Tensor w = expand_weights(c, p2, idx);
    for (double v : w.data()) CHECK(v == std::floor(v));

    CHECK_THROWS_AS(expand_weights(c, p2, IndexSet::zeros(plan)), ConfigError);
}

TEST_CASE("expand_fc examples")
{
    Rng rng(6);
    Epitome e(random_uniform({1, 1, 4, 3}, rng));
    LayerPlan id = LayerPlan::make(LayerKind::fc, {1, 1, 4, 3}, {1, 1, 4, 3});
    CHECK(expand_fc(e, id, IndexSet::zeros(id)) == e.values().reshaped({4, 3}));

    LayerPlan twice = LayerPlan::make(LayerKind::fc, {1, 1, 8, 3}, {1, 1, 4, 3});
    Tensor d = expand_fc(e, twice, IndexSet::zeros(twice));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(d.at({i, j}) == d.at({i + 4, j}));

    for (int trial = 0; trial < 10; ++trial) {
        LayerPlan p = testing::random_plan(rng, LayerKind::fc);
        Epitome ep(random_uniform(p.epitome.shape(), rng));
        IndexSet ix = testing::random_indices(rng, p);
        Tensor got = expand_fc(ep, p, ix);
        CHECK(max_abs_diff(got, testing::oracle_expand(ep, p, ix).reshaped(got.shape())) <= 1e-12);
    }
}

TEST_CASE("expand_weights matches the brute-force oracle")
{
    Rng rng(12);
    for (int trial = 0; trial < 150; ++trial) {
        LayerPlan p = testing::random_plan(rng, testing::kind_for(static_cast<std::size_t>(trial)));
        Epitome e(random_uniform(p.epitome.shape(), rng));
        IndexSet ix = testing::random_indices(rng, p);
        CHECK(max_abs_diff(expand_weights(e, p, ix), testing::oracle_expand(e, p, ix)) <= 1e-12);
    }
}

TEST_CASE("strict mode rejects overruns")
{
    LayerPlan p = LayerPlan::make(LayerKind::conv2d, {3, 3, 2, 2}, {3, 3, 2, 2});
    p.wrap = false;
    Epitome e = counting_epitome(p.epitome);
    IndexSet ix = IndexSet::zeros(p);
    CHECK_NOTHROW(expand_weights(e, p, ix));
    ix.in_blocks[0].p = 0.5;
    CHECK_THROWS_AS(expand_weights(e, p, ix), std::out_of_range);
}

TEST_CASE("plan validation")
{
    CHECK_THROWS_AS(LayerPlan::make(LayerKind::conv1d, {3, 2, 1, 1}, {3, 1, 1, 1}), ConfigError);
    CHECK_THROWS_AS(LayerPlan::make(LayerKind::fc, {2, 1, 1, 1}, {1, 1, 1, 1}), ConfigError);
    LayerPlan p = LayerPlan::make(LayerKind::conv2d, {3, 3, 10, 7}, {3, 3, 4, 3});
    CHECK(p.r_in() == 3);
    CHECK(p.r_out() == 3);
    CHECK(p.routing_size() == 12);
    p.beta_in = 5;
    CHECK_THROWS_AS(p.validate(), ConfigError);
    SubTensorSpec s{{0.5, 0, 0, 0}, {1, 1, 1, 1}};
    CHECK_NOTHROW(s.validate({2, 1, 1, 1}));
    s.start[0] = 2.0;
    CHECK_THROWS_AS(s.validate({2, 1, 1, 1}), ConfigError);
}

// Property suites: 1000 random cases each.

TEST_CASE("property: partition of unity")
{
    Rng rng(100);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t L = pick(rng, 1, 16);
        const double b = rng.uniform() < 0.2 ? static_cast<double>(rng.below(L)) : rng.uniform(0.0, static_cast<double>(L));
        const AxisTap t = axis_tap(b, L);
        double sum = 0.0;
        int nonzero = 0;
        for (std::size_t n = 0; n < L; ++n) {
            double w = 0.0;
            if (n == t.base) w += t.w_base;
            if (n == t.next) w += t.w_next;
            if (w != 0.0) ++nonzero;
            sum += w;
            CHECK(std::abs(w - testing::periodic_weight(b, n, L)) <= 1e-12);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-15);
        CHECK(nonzero <= 2);
        if (b == std::floor(b)) CHECK(nonzero == 1);
    }
}

TEST_CASE("property: shape law")
{
    Rng rng(101);
    for (int i = 0; i < 1000; ++i) {
        LayerPlan p = testing::random_plan(rng, testing::kind_for(static_cast<std::size_t>(i)));
        Epitome e(random_uniform(p.epitome.shape(), rng));
        CHECK(expand_weights(e, p, testing::random_indices(rng, p)).shape() == p.weights.shape());
    }
}

TEST_CASE("property: linearity in the epitome")
{
    Rng rng(102);
    for (int i = 0; i < 1000; ++i) {
        LayerPlan p = testing::random_plan(rng, testing::kind_for(static_cast<std::size_t>(i)), 5);
        Epitome a(random_uniform(p.epitome.shape(), rng));
        Epitome b(random_uniform(p.epitome.shape(), rng));
        IndexSet ix = testing::random_indices(rng, p);
        const double alpha = rng.uniform(-3, 3), gamma = rng.uniform(-3, 3);
        Tensor lhs = expand_weights(Epitome(alpha * a.values() + gamma * b.values()), p, ix);
        Tensor rhs = alpha * expand_weights(a, p, ix) + gamma * expand_weights(b, p, ix);
        CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
        CHECK(max_abs_diff(expand_weights(Epitome(alpha * a.values()), p, ix), alpha * expand_weights(a, p, ix)) <= 1e-12);
    }
}

TEST_CASE("property: locality")
{
    // A weight element may change only if its block's taps cover the
    // perturbed element on every axis.
    Rng rng(103);
    for (int i = 0; i < 1000; ++i) {
        LayerPlan p = testing::random_plan(rng, testing::kind_for(static_cast<std::size_t>(i)), 5);
        Epitome e(random_uniform(p.epitome.shape(), rng));
        IndexSet ix = testing::random_indices(rng, p);
        const Dims4& d = p.epitome;
        const std::size_t x = rng.below(d.width), y = rng.below(d.height), k = rng.below(d.in_channels),
                          o = rng.below(d.out_channels);
        Tensor before = expand_weights(e, p, ix);
        Epitome bumped = e;
        bumped.values().at({x, y, k, o}) += 1.0;
        Tensor after = expand_weights(bumped, p, ix);
        const Dims4& w = p.weights;
        for (std::size_t c = 0; c < w.out_channels; ++c)
            for (std::size_t m = 0; m < w.in_channels; ++m) {
                const InBlockStart s = effective_in_start(p, ix, m / p.beta_in);
                const double so = effective_out_start(p, ix, c / p.beta_out);
                for (std::size_t a = 0; a < w.width; ++a)
                    for (std::size_t b = 0; b < w.height; ++b) {
                        const bool covered =
                            testing::periodic_weight(s.p + static_cast<double>(a), x, d.width) > 0 &&
                            testing::periodic_weight(s.q + static_cast<double>(b), y, d.height) > 0 &&
                            testing::periodic_weight(s.c_in + static_cast<double>(m % p.beta_in), k, d.in_channels) > 0 &&
                            testing::periodic_weight(so + static_cast<double>(c % p.beta_out), o, d.out_channels) > 0;
                        if (!covered) CHECK(after.at({a, b, m, c}) == before.at({a, b, m, c}));
                    }
            }
    }
}
