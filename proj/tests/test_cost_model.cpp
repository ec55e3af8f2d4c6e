#include "nes/cost_model.hpp"
#include "nes/fast_infer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace nes;

namespace {

std::uint64_t brute_params(const ArchConfig& cfg)
{
    std::uint64_t p = 0;
    for (const auto& l : cfg.layers) {
        if (l.kind == ArchLayerKind::pool) continue;
        if (l.epitome) {
            const Dims4& e = *l.epitome;
            const std::size_t bi = l.beta_in ? l.beta_in : e.in_channels;
            const std::size_t bo = l.beta_out ? l.beta_out : e.out_channels;
            p += e.width * e.height * e.in_channels * e.out_channels;
            p += 3 * ((l.weights.in_channels + bi - 1) / bi) + (l.weights.out_channels + bo - 1) / bo;
        } else {
            p += l.weights.width * l.weights.height * l.weights.in_channels * l.weights.out_channels;
        }
        if (l.bias) p += l.weights.out_channels;
    }
    return p;
}

} // namespace

TEST_CASE("mobilenet v2 baseline counts")
{
    const ArchConfig cfg = mobilenet_v2();
    const NetworkCounts n = network_counts(cfg);
    // Layer-by-layer sum of the standard network: 3,469,760 weights plus the
    // classifier bias.
    CHECK(n.params == 3470760);
    CHECK(n.params == brute_params(cfg));
    CHECK(n.mac == 300774272);
    CHECK(n.ratio == 1.0);
    CHECK(n.madd_2k == 2 * n.mac);
    CHECK(n.madd_eqn < n.madd_2k);

    std::size_t depthwise = 0;
    for (const auto& l : cfg.layers) depthwise += l.kind == ArchLayerKind::depthwise;
    CHECK(depthwise == 17);
    CHECK(cfg.layers.back().in_w == 1);
}

TEST_CASE("bundled config file matches the built-in network")
{
    const ArchConfig file = load_arch_config(NES_CONFIG_DIR "/mobilenetv2.cfg");
    const ArchConfig builtin = mobilenet_v2();
    CHECK(file.layers.size() == builtin.layers.size());
    CHECK(network_counts(file).params == network_counts(builtin).params);
    CHECK(network_counts(file).mac == network_counts(builtin).mac);
    CHECK(file.multipliers == std::vector<double>{0.75, 0.5, 0.35, 0.18});

    const ArchConfig audio = load_arch_config(NES_CONFIG_DIR "/cnn1d_8layer.cfg");
    std::size_t weighted = 0;
    for (const auto& l : audio.layers) weighted += l.kind != ArchLayerKind::pool;
    CHECK(weighted == 8);
    CHECK(network_ratio(audio) > 1.9);
    CHECK(network_counts(audio).params == brute_params(audio));
}

TEST_CASE("layer_param_ratio")
{
    LayerPlan id = LayerPlan::make(LayerKind::conv2d, {3, 3, 16, 16}, {3, 3, 16, 16});
    CHECK(layer_param_ratio(id) < 1.0);
    CHECK(layer_param_ratio(id) == doctest::Approx(2304.0 / 2308.0));

    LayerPlan half = LayerPlan::make(LayerKind::conv2d, {3, 3, 16, 32}, {3, 3, 16, 16});
    CHECK(layer_param_ratio(half) == doctest::Approx(4608.0 / (2304.0 + 3 + 2)));
    CHECK(std::abs(layer_param_ratio(half) - 2.0) < 0.01);

    // r / (size ratio) == |E| / (|E| + 3 R_cin + R_cout) exactly, so the
    // proportionality holds within 5% whenever the map is under ~5% of |E|.
    Rng rng(1);
    for (int i = 0; i < 500; ++i) {
        Dims4 w{testing::pick(rng, 1, 5), testing::pick(rng, 1, 5), testing::pick(rng, 8, 256), testing::pick(rng, 8, 256)};
        Dims4 e{testing::pick(rng, 1, w.width), testing::pick(rng, 1, w.height), testing::pick(rng, 4, w.in_channels),
                testing::pick(rng, 4, w.out_channels)};
        LayerPlan p = LayerPlan::make(LayerKind::conv2d, w, e);
        const double approx = static_cast<double>(w.size()) / static_cast<double>(e.size());
        const double share = static_cast<double>(e.size()) / static_cast<double>(e.size() + p.routing_size());
        CHECK(layer_param_ratio(p) / approx == doctest::Approx(share).epsilon(1e-12));
    }
    // Compressed MobileNetV2 layers with >= 1e4 weights are in that regime.
    for (double m : {0.75, 0.5, 0.35, 0.18}) {
        for (const auto& l : plan_from_multiplier(mobilenet_v2(), m).layers) {
            if (!l.epitome || l.weights.size() < 10000) continue;
            const double approx = static_cast<double>(l.weights.size()) / static_cast<double>(l.epitome->size());
            CHECK(std::abs(layer_param_ratio(l) / approx - 1.0) <= 0.05);
        }
    }
    // A tiny epitome with many blocks leaves that regime.
    LayerPlan thin = LayerPlan::make(LayerKind::conv2d, {1, 1, 256, 256}, {1, 1, 4, 4});
    CHECK(layer_param_ratio(thin) < 0.1 * (65536.0 / 16.0));
}

TEST_CASE("network_ratio and counts")
{
    ArchConfig empty;
    const NetworkCounts z = network_counts(empty);
    CHECK(z.params == 0);
    CHECK(z.mac == 0);
    CHECK(network_ratio(mobilenet_v2()) == 1.0);

    // Additive over layers and invariant to their order.
    ArchConfig cfg = plan_from_multiplier(mobilenet_v2(), 0.5);
    const NetworkCounts a = network_counts(cfg);
    std::uint64_t sum = 0;
    for (const auto& l : a.layers) sum += l.params;
    CHECK(sum == a.params);
    ArchConfig shuffled = cfg;
    std::reverse(shuffled.layers.begin(), shuffled.layers.end());
    std::rotate(shuffled.layers.begin(), shuffled.layers.begin() + 7, shuffled.layers.end());
    const NetworkCounts b = network_counts(shuffled);
    CHECK(a.params == b.params);
    CHECK(a.mac == b.mac);
    CHECK(a.madd_eqn == b.madd_eqn);
    CHECK(a.params == brute_params(cfg));
}

TEST_CASE("plan_from_multiplier")
{
    const ArchConfig base = mobilenet_v2();
    const ArchConfig one = plan_from_multiplier(base, 1.0);
    for (const auto& l : one.layers)
        if (l.epitome) CHECK(*l.epitome == l.weights);
    CHECK(one.notes.empty());

    const ArchConfig half = plan_from_multiplier(base, 0.5);
    // k = 16, t = 6: the first expand conv of block1 gets 48 epitome filters.
    const auto it = std::find_if(half.layers.begin(), half.layers.end(),
                                 [](const ArchLayer& l) { return l.name == "block1.0.expand"; });
    REQUIRE(it != half.layers.end());
    CHECK(it->weights.in_channels == 16);
    CHECK(it->epitome->out_channels == 48);
    for (const auto& l : half.layers) {
        if (l.kind == ArchLayerKind::depthwise) CHECK_FALSE(l.epitome.has_value());
        if (l.role == BlockRole::project) CHECK(l.epitome->in_channels * 2 == l.weights.in_channels);
    }

    const ArchConfig tiny = plan_from_multiplier(base, 0.18);
    CHECK_FALSE(tiny.notes.empty());

    CHECK_THROWS_AS(plan_from_multiplier(base, 0.0), ConfigError);
    CHECK_THROWS_AS(plan_from_multiplier(base, 1.5), ConfigError);
}

TEST_CASE("config errors")
{
    nlohmann::json bad = {{"input", {{"width", 8}}}, {"layers", {{{"kind", "conv2d"}, {"out", 4}, {"epitome", {1, 1, 1}}}}}};
    CHECK_THROWS_AS(parse_arch_config(bad), ConfigError);
    nlohmann::json dw = {{"input", {{"width", 8}, {"height", 8}, {"channels", 4}}},
                         {"layers", {{{"kind", "depthwise"}, {"kernel", 3}, {"epitome", {1, 1, 1, 4}}}}}};
    CHECK_THROWS_AS(parse_arch_config(dw), ConfigError);
    nlohmann::json unknown = {{"input", {{"width", 8}}}, {"layers", {{{"kind", "lstm"}}}}};
    CHECK_THROWS_AS(parse_arch_config(unknown), ConfigError);
    CHECK_THROWS_AS(load_arch_config("/nonexistent.cfg"), ConfigError);
}

TEST_CASE("report formats")
{
    const ArchConfig cfg = mobilenet_v2();
    const auto r = cost_report(cfg);
    CHECK(r["rows"].size() == 5);
    CHECK(r["rows"][0]["params"] == 3470760);
    const std::string csv = cost_report_csv(cfg);
    CHECK(csv.rfind("method,madd_m", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("reduction ratio approximation on compressed layers")
{
    // r / approx == 1 / (1 + d) with d independent of H W; the 10% band holds
    // exactly where d <= 1/9, and small project epitomes fall outside it.
    const std::vector<std::size_t> outside{1, 1, 3, 6};
    const std::vector<double> mults{0.75, 0.5, 0.35, 0.18};
    for (std::size_t k = 0; k < mults.size(); ++k) {
        const ArchConfig cfg = plan_from_multiplier(mobilenet_v2(), mults[k]);
        std::size_t miss = 0;
        for (const auto& l : cfg.layers) {
            if (!l.epitome || l.out_w() * l.out_h() < 64) continue;
            const LayerPlan p = l.plan();
            const double HW = static_cast<double>(l.out_w() * l.out_h());
            const double K = static_cast<double>(p.weights.in_channels * p.weights.width * p.weights.height);
            const double ehw = static_cast<double>(p.epitome.width * p.epitome.height);
            const double ce_in = static_cast<double>(p.epitome.in_channels), ce_out = static_cast<double>(p.epitome.out_channels);
            const double num = static_cast<double>(p.weights.out_channels) * HW * (2 * K - 1);
            const double den = ce_out * HW * (ehw + 2 * ce_in * ehw - 1) +
                               2.0 * static_cast<double>(p.r_in() * p.beta_in) * HW +
                               2.0 * static_cast<double>(p.r_out() * p.beta_out);
            const double r = madd_reduction_ratio(p, l.out_w(), l.out_h());
            CHECK(r == doctest::Approx(num / den).epsilon(1e-12));
            const double d = approx_reduction_ratio(p) / r - 1.0;
            const bool in_band = std::abs(r / approx_reduction_ratio(p) - 1.0) <= 0.10;
            CHECK(in_band == (std::abs(d) <= 1.0 / 9.0 + 1e-12));
            miss += !in_band;
        }
        CHECK(miss == outside[k]);
    }
}
