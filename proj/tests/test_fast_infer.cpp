#include "nes/fast_infer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace nes;

namespace {

RoutingMap frozen(const LayerPlan& plan, const IndexSet& idx)
{
    RoutingMap m(plan, idx);
    m.freeze();
    return m;
}

Tensor reference(const testing::Instance& in)
{
    const Tensor w = testing::oracle_expand(in.epitome, in.plan, in.indices);
    const Tensor x = to_feature_map(in.input, in.plan.kind);
    return from_feature_map(testing::oracle_conv(x, w, in.conv.stride, in.conv.padding), in.plan.kind);
}

double rel(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b) / std::max(max_abs(b), 1e-300); }

} // namespace

TEST_CASE("channel_wrap")
{
    Rng rng(1);
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, {3, 3, 4, 2}, {3, 3, 3, 2});
    Tensor f = random_uniform({4, 4, 4}, rng);
    // A single block starting at 0 covers the first C^E_in channels.
    LayerPlan one = LayerPlan::make(LayerKind::conv2d, {3, 3, 3, 2}, {3, 3, 3, 2});
    Tensor f3 = random_uniform({4, 4, 3}, rng);
    CHECK(channel_wrap(f3, frozen(one, IndexSet::zeros(one)), one) == f3);

    RoutingMap live(plan, IndexSet::zeros(plan));
    CHECK_THROWS_AS(channel_wrap(f, live, plan), StateError);

    // Six channels in two blocks of three: F1 + F4 meet E1 for integer starts,
    // and the 0.6F1 + 0.4F3 + 0.3F4 + 0.7F6 blend for starts 0.4 / 0.7.
    LayerPlan six = LayerPlan::make(LayerKind::conv2d, {1, 1, 6, 1}, {1, 1, 3, 1});
    Tensor F({1, 1, 6}, std::vector<double>{1, 10, 100, 1000, 10000, 100000});
    Tensor w0 = channel_wrap(F, frozen(six, IndexSet::zeros(six)), six);
    CHECK(w0[0] == 1 + 1000);
    IndexSet idx = IndexSet::zeros(six);
    idx.in_blocks[0].c_in = 0.4;
    idx.in_blocks[1].c_in = 0.7;
    Tensor wf = channel_wrap(F, frozen(six, idx), six);
    CHECK(wf[0] == doctest::Approx(0.6 * 1 + 0.3 * 1000 + 0.4 * 100 + 0.7 * 100000).epsilon(1e-14));
}

TEST_CASE("product map")
{
    Rng rng(2);
    Epitome ones(Tensor({2, 3, 4, 2}, 1.0));
    ProductMap p = build_product_map(Tensor({3, 2, 4}, 1.0), ones);
    CHECK(p.values.shape() == Shape{3, 2, 2, 3, 2});
    for (double v : p.values.data()) CHECK(v == 4.0);

    Epitome single(random_uniform({2, 2, 1, 1}, rng));
    Tensor f1 = random_uniform({3, 3, 1}, rng);
    ProductMap ps = build_product_map(f1, single);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b)
                    CHECK(ps.values.at({i, j, a, b, 0}) == f1.at({i, j, 0}) * single.values().at({a, b, 0, 0}));

    Epitome e(random_uniform({3, 2, 4, 3}, rng));
    Tensor f = random_uniform({4, 5, 4}, rng);
    ProductMap pr = build_product_map(f, e);
    double worst = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 5; ++j)
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 2; ++b)
                    for (std::size_t n = 0; n < 3; ++n) {
                        double acc = 0.0;
                        for (std::size_t k = 0; k < 4; ++k) acc += f.at({i, j, k}) * e.values().at({a, b, k, n});
                        worst = std::max(worst, std::abs(acc - pr.values.at({i, j, a, b, n})));
                    }
    CHECK(worst <= 1e-12);
    CHECK_THROWS_AS(build_product_map(Tensor({2, 2, 3}), e), DimensionError);
}

TEST_CASE("integral map retrieval")
{
    Rng rng(3);
    ProductMap zero{Tensor({3, 4, 2, 3, 2})};
    IntegralMap iz = build_integral_map(zero);
    CHECK(max_abs(iz.values) == 0.0);

    ProductMap p{random_uniform({5, 4, 3, 4, 2}, rng)};
    IntegralMap im = build_integral_map(p);
    // Where both diagonals start (one of i, a and one of j, b is zero) I equals P.
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t n = 0; n < 2; ++n) CHECK(im.values.at({i, 0, 0, b, n}) == p.values.at({i, 0, 0, b, n}));
    for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t a = 0; a < 3; ++a) CHECK(im.values.at({0, j, a, 0, 1}) == p.values.at({0, j, a, 0, 1}));

    for (std::size_t tw = 0; tw < 5; ++tw)
        for (std::size_t th = 0; th < 4; ++th)
            for (std::size_t a = 0; a < 3; ++a)
                for (std::size_t b = 0; b < 4; ++b)
                    CHECK(retrieve(im, tw, th, a, b, 1, 1, 1) == doctest::Approx(p.values.at({tw, th, a, b, 1})).epsilon(1e-12));

    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t w = testing::pick(rng, 1, 3), h = testing::pick(rng, 1, 4);
        const std::size_t tw = rng.below(5 - w + 1), th = rng.below(4 - h + 1);
        const std::size_t a = rng.below(3 - w + 1), b = rng.below(4 - h + 1), n = rng.below(2);
        double direct = 0.0;
        for (std::size_t i = 0; i < w; ++i)
            for (std::size_t j = 0; j < h; ++j) direct += p.values.at({tw + i, th + j, a + i, b + j, n});
        worst = std::max(worst, std::abs(direct - retrieve(im, tw, th, a, b, n, w, h)));
    }
    CHECK(worst <= 1e-10);
    // Full extent on the shorter diagonal.
    double full = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) full += p.values.at({i, j, i, j, 0});
    CHECK(std::abs(retrieve(im, 0, 0, 0, 0, 0, 3, 4) - full) <= 1e-10);

    CHECK_THROWS_AS(retrieve(im, 3, 0, 0, 0, 0, 3, 1), std::out_of_range);
    CHECK_THROWS_AS(retrieve(im, 0, 0, 1, 0, 0, 3, 1), std::out_of_range);
    CHECK_THROWS_AS(retrieve(im, 0, 0, 0, 0, 2, 1, 1), std::out_of_range);
}

TEST_CASE("identity configuration equals standard convolution")
{
    Rng rng(4);
    Dims4 d{3, 3, 4, 5};
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, d, d);
    Epitome e(random_uniform(d.shape(), rng));
    Tensor x = random_uniform({6, 7, 4}, rng);
    const ConvSpec conv = ConvSpec::same(plan);
    for (InferStrategy s : {InferStrategy::product_map, InferStrategy::direct}) {
        auto r = infer(x, e, frozen(plan, IndexSet::zeros(plan)), plan, conv, {s});
        CHECK(rel(r.output, conv2d_naive(x, e.values(), 1, conv.padding)) <= 1e-12);
    }
}

TEST_CASE("filter blocks with equal starts are copied")
{
    Rng rng(5);
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, {3, 3, 4, 9}, {4, 4, 4, 3});
    Epitome e(random_uniform(plan.epitome.shape(), rng));
    IndexSet idx = testing::random_indices(rng, plan);
    idx.out_blocks[2] = idx.out_blocks[0];
    Tensor x = random_uniform({5, 5, 4}, rng);
    auto r = infer(x, e, frozen(plan, idx), plan, ConvSpec::same(plan));
    CHECK(r.report.copied_filter_blocks == 1);
    for (std::size_t s = 0; s < 25; ++s)
        for (std::size_t b = 0; b < 3; ++b) CHECK(r.output[s * 9 + 6 + b] == r.output[s * 9 + b]);
}

TEST_CASE("infer needs a frozen, matching map")
{
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, {3, 3, 4, 4}, {3, 3, 2, 2});
    Epitome e(plan.epitome);
    Tensor x({4, 4, 4});
    RoutingMap live(plan, IndexSet::zeros(plan));
    CHECK_THROWS_AS(infer(x, e, live, plan, ConvSpec::same(plan)), StateError);
    LayerPlan other = LayerPlan::make(LayerKind::conv2d, {3, 3, 4, 4}, {3, 3, 4, 4});
    CHECK_THROWS_AS(infer(x, e, frozen(other, IndexSet::zeros(other)), plan, ConvSpec::same(plan)), ConfigError);
    CHECK_THROWS_AS(infer(Tensor({4, 4, 3}), e, frozen(plan, IndexSet::zeros(plan)), plan, ConvSpec::same(plan)),
                    DimensionError);
}

TEST_CASE("equivalence with expand-then-convolve on random instances")
{
    Rng rng(6);
    double worst = 0.0;
    for (int trial = 0; trial < 240; ++trial) {
        testing::Instance in = testing::random_instance(rng, testing::kind_for(static_cast<std::size_t>(trial)),
                                                        trial % 4 == 0 ? 0.0 : 0.7);
        const Tensor want = reference(in);
        const RoutingMap m = frozen(in.plan, in.indices);
        for (InferStrategy s : {InferStrategy::product_map, InferStrategy::direct}) {
            auto r = infer(in.input, in.epitome, m, in.plan, in.conv, {s});
            REQUIRE(r.output.shape() == want.shape());
            worst = std::max(worst, rel(r.output, want));
            CHECK(r.report.measured <= r.report.engine_bound);
        }
    }
    INFO("worst relative error " << worst);
    CHECK(worst <= 1e-9);
}

TEST_CASE("automatic strategy respects the memory budget")
{
    Rng rng(7);
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, {3, 3, 4, 4}, {3, 3, 2, 2});
    Epitome e(random_uniform(plan.epitome.shape(), rng));
    Tensor x = random_uniform({8, 8, 4}, rng);
    RoutingMap m = frozen(plan, testing::random_indices(rng, plan));
    auto big = infer(x, e, m, plan, ConvSpec::same(plan));
    CHECK(big.report.strategy == "product_map");
    InferOptions tight;
    tight.product_map_budget = 100;
    auto small = infer(x, e, m, plan, ConvSpec::same(plan), tight);
    CHECK(small.report.strategy == "direct");
    CHECK(rel(small.output, big.output) <= 1e-12);
}

TEST_CASE("count_madd")
{
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, {3, 3, 3, 4}, {3, 3, 3, 4});
    CHECK(count_madd(plan, 8, 8, MaddMode::naive) == 13568);

    // 1x1 kernel with a full-size epitome: the ratio tends to one.
    LayerPlan id = LayerPlan::make(LayerKind::conv2d, {1, 1, 64, 64}, {1, 1, 64, 64});
    CHECK(std::abs(madd_reduction_ratio(id, 56, 56) - 1.0) < 0.03);
    CHECK(approx_reduction_ratio(id) == 1.0);

    // Four-term sum.
    LayerPlan p = LayerPlan::make(LayerKind::conv2d, {3, 3, 16, 32}, {4, 4, 8, 8});
    const std::uint64_t HW = 100;
    const std::uint64_t want = (2 * 16 * 16 - 1) * HW * 8 + HW * 16 * 8 + 2 * 2 * HW * 8 + 2 * 4 * 8;
    CHECK(count_madd(p, 10, 10, MaddMode::reuse) == want);
}

TEST_CASE("naive path count equals the formula")
{
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        testing::Instance in = testing::random_instance(rng, testing::kind_for(static_cast<std::size_t>(trial)));
        MaddCounter c;
        const Tensor y = conv_reference(in.input, expand_weights(in.epitome, in.plan, in.indices), in.plan.kind, in.conv, &c);
        const Tensor g = to_feature_map(y, in.plan.kind);
        CHECK(c.total() == count_madd(in.plan, g.extent(0), g.extent(1), MaddMode::naive));
    }
}

TEST_CASE("property: shrinking spatial epitome axes never raises the reuse count")
{
    Rng rng(9);
    for (int trial = 0; trial < 1000; ++trial) {
        LayerPlan p = testing::random_plan(rng, LayerKind::conv2d);
        const std::size_t ow = testing::pick(rng, 1, 32), oh = testing::pick(rng, 1, 32);
        const std::uint64_t base = count_madd(p, ow, oh, MaddMode::reuse);
        LayerPlan q = p;
        if (q.epitome.width > 1) --q.epitome.width;
        if (q.epitome.height > 1) --q.epitome.height;
        CHECK(count_madd(q, ow, oh, MaddMode::reuse) <= base);
        // Channel axes with the block sizes held fixed.
        LayerPlan c = p;
        if (c.epitome.in_channels > c.beta_in) --c.epitome.in_channels;
        if (c.epitome.out_channels > c.beta_out) --c.epitome.out_channels;
        CHECK(count_madd(c, ow, oh, MaddMode::reuse) <= base);
    }
}

TEST_CASE("madd report json")
{
    Rng rng(10);
    LayerPlan plan = LayerPlan::make(LayerKind::conv2d, {3, 3, 8, 8}, {3, 3, 4, 4});
    Epitome e(random_uniform(plan.epitome.shape(), rng));
    auto r = infer(random_uniform({8, 8, 8}, rng), e, frozen(plan, testing::random_indices(rng, plan)), plan,
                   ConvSpec::same(plan));
    r.report.layer = "conv";
    auto j = madd_summary({r.report, r.report});
    CHECK(j["naive_madd"].get<std::uint64_t>() == 2 * r.report.naive_madd);
    CHECK(j["layers"].size() == 2);
    CHECK(j["layers"][0]["layer"] == "conv");
    CHECK(j.contains("ratio"));
}
