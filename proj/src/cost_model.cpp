#include "nes/cost_model.hpp"

#include "nes/fast_infer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace nes {

using nlohmann::json;

const char* to_string(ArchLayerKind kind)
{
    switch (kind) {
    case ArchLayerKind::conv2d: return "conv2d";
    case ArchLayerKind::conv1d: return "conv1d";
    case ArchLayerKind::depthwise: return "depthwise";
    case ArchLayerKind::fc: return "fc";
    case ArchLayerKind::pool: return "pool";
    }
    return "?";
}

ArchLayerKind arch_layer_kind_from_string(const std::string& name)
{
    if (name == "conv2d") return ArchLayerKind::conv2d;
    if (name == "conv1d") return ArchLayerKind::conv1d;
    if (name == "depthwise") return ArchLayerKind::depthwise;
    if (name == "fc") return ArchLayerKind::fc;
    if (name == "pool") return ArchLayerKind::pool;
    throw ConfigError("unknown layer kind '" + name + "'");
}

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

LayerKind plan_kind(ArchLayerKind k)
{
    switch (k) {
    case ArchLayerKind::conv2d: return LayerKind::conv2d;
    case ArchLayerKind::conv1d: return LayerKind::conv1d;
    case ArchLayerKind::fc: return LayerKind::fc;
    default: throw ConfigError(std::string(to_string(k)) + " layers cannot carry an epitome");
    }
}

} // namespace

std::size_t ArchLayer::out_w() const { return kind == ArchLayerKind::fc ? 1 : ceil_div(in_w, stride); }
std::size_t ArchLayer::out_h() const { return kind == ArchLayerKind::fc ? 1 : ceil_div(in_h, stride); }

LayerPlan ArchLayer::plan() const
{
    if (!epitome) throw ConfigError("layer '" + name + "' is not compressed");
    LayerPlan p = LayerPlan::make(plan_kind(kind), weights, *epitome);
    if (beta_in) p.beta_in = beta_in;
    if (beta_out) p.beta_out = beta_out;
    p.validate();
    return p;
}

void ArchLayer::validate() const
{
    if (stride == 0) throw ConfigError("layer '" + name + "': stride must be >= 1");
    if (kind == ArchLayerKind::pool) return;
    if (weights.size() == 0) throw ConfigError("layer '" + name + "': extents must be >= 1");
    if (kind == ArchLayerKind::depthwise && epitome)
        throw ConfigError("layer '" + name + "': depthwise layers stay uncompressed");
    if (epitome) {
        const LayerPlan p = plan();
        if (p.epitome.size() >= p.weights.size() && !(p.epitome == p.weights))
            throw ConfigError("layer '" + name + "': epitome is not smaller than the weights");
    }
}

// ---------------------------------------------------------------------------

namespace {

std::size_t get_size(const json& j, const char* key, std::size_t fallback)
{
    if (!j.contains(key)) return fallback;
    const auto v = j.at(key).get<long long>();
    if (v < 0) throw ConfigError(std::string("'") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
}

Dims4 dims_from(const json& j)
{
    if (!j.is_array() || j.size() != 4) throw ConfigError("epitome dims must be [w, h, c_in, c_out]");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>(), j[3].get<std::size_t>()};
}

struct Cursor {
    std::size_t w, h, c;
    bool flat = false;
};

ArchLayer conv_layer(const std::string& name, ArchLayerKind kind, std::size_t kw, std::size_t kh, std::size_t cout,
                     std::size_t stride, Cursor& cur)
{
    ArchLayer l;
    l.name = name;
    l.kind = kind;
    l.in_w = cur.w;
    l.in_h = cur.h;
    l.stride = stride;
    if (kind == ArchLayerKind::depthwise) {
        l.weights = {kw, kh, 1, cur.c};
    } else {
        l.weights = {kw, kh, cur.c, cout};
        cur.c = cout;
    }
    cur.w = l.out_w();
    cur.h = l.out_h();
    return l;
}

void apply_common(const json& j, ArchLayer& l)
{
    if (j.contains("bias")) l.bias = j.at("bias").get<bool>();
    if (j.contains("epitome")) l.epitome = dims_from(j.at("epitome"));
    l.beta_in = get_size(j, "beta_in", 0);
    l.beta_out = get_size(j, "beta_out", 0);
}

} // namespace

ArchConfig parse_arch_config(const json& tree)
{
    try {
        ArchConfig cfg;
        cfg.name = tree.value("name", std::string("unnamed"));
        const json& in = tree.at("input");
        cfg.input_w = get_size(in, "width", 1);
        cfg.input_h = get_size(in, "height", 1);
        cfg.input_channels = get_size(in, "channels", 1);
        if (tree.contains("multipliers"))
            for (const auto& m : tree.at("multipliers")) cfg.multipliers.push_back(m.get<double>());

        Cursor cur{cfg.input_w, cfg.input_h, cfg.input_channels};
        std::size_t index = 0;
        for (const json& j : tree.at("layers")) {
            const std::string kind = j.at("kind").get<std::string>();
            const std::string name = j.value("name", kind + std::to_string(index));
            ++index;
            if (kind == "bottleneck") {
                const std::size_t t = get_size(j, "t", 1);
                const std::size_t out = get_size(j, "out", 0);
                const std::size_t repeat = get_size(j, "repeat", 1);
                const std::size_t stride = get_size(j, "stride", 1);
                if (t == 0 || out == 0 || repeat == 0) throw ConfigError("bottleneck needs t, out and repeat >= 1");
                for (std::size_t r = 0; r < repeat; ++r) {
                    const std::string base = name + "." + std::to_string(r);
                    const std::size_t hidden = cur.c * t;
                    if (t != 1) {
                        ArchLayer e = conv_layer(base + ".expand", ArchLayerKind::conv2d, 1, 1, hidden, 1, cur);
                        e.role = BlockRole::expand;
                        e.expansion = t;
                        cfg.layers.push_back(e);
                    }
                    ArchLayer d = conv_layer(base + ".depthwise", ArchLayerKind::depthwise, 3, 3, 0, r == 0 ? stride : 1, cur);
                    d.role = BlockRole::depthwise;
                    d.expansion = t;
                    cfg.layers.push_back(d);
                    ArchLayer p = conv_layer(base + ".project", ArchLayerKind::conv2d, 1, 1, out, 1, cur);
                    p.role = BlockRole::project;
                    p.expansion = t;
                    cfg.layers.push_back(p);
                }
                continue;
            }
            const ArchLayerKind k = arch_layer_kind_from_string(kind);
            if (k == ArchLayerKind::pool) {
                ArchLayer l;
                l.name = name;
                l.kind = k;
                l.in_w = cur.w;
                l.in_h = cur.h;
                l.weights = {1, 1, cur.c, cur.c};
                if (j.value("global", false)) {
                    cur.w = cur.h = 1;
                } else {
                    l.stride = get_size(j, "stride", 1);
                    cur.w = l.out_w();
                    cur.h = l.out_h();
                }
                cfg.layers.push_back(l);
                continue;
            }
            std::size_t kw = 1, kh = 1;
            if (j.contains("kernel")) {
                const json& kn = j.at("kernel");
                if (kn.is_array()) {
                    kw = kn.at(0).get<std::size_t>();
                    kh = kn.size() > 1 ? kn.at(1).get<std::size_t>() : 1;
                } else {
                    kw = kn.get<std::size_t>();
                    kh = k == ArchLayerKind::conv2d || k == ArchLayerKind::depthwise ? kw : 1;
                }
            }
            if (k == ArchLayerKind::fc) {
                cur.c *= cur.w * cur.h;
                cur.w = cur.h = 1;
                kw = kh = 1;
            }
            if (k == ArchLayerKind::conv1d) kh = 1;
            ArchLayer l = conv_layer(name, k, kw, kh, get_size(j, "out", 0), get_size(j, "stride", 1), cur);
            apply_common(j, l);
            l.validate();
            cfg.layers.push_back(l);
        }
        return cfg;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("architecture config: ") + e.what());
    }
}

ArchConfig load_arch_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    json tree;
    try {
        tree = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ParseError("config '" + path.string() + "': " + e.what(), e.byte);
    }
    return parse_arch_config(tree);
}

ArchConfig mobilenet_v2(double width)
{
    auto ch = [&](double c) {
        return static_cast<std::size_t>(std::lround(c * width));
    };
    json layers = json::array();
    layers.push_back({{"name", "stem"}, {"kind", "conv2d"}, {"kernel", 3}, {"out", ch(32)}, {"stride", 2}});
    const int rows[7][4] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2}, {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    int b = 0;
    for (const auto& r : rows)
        layers.push_back({{"name", "block" + std::to_string(b++)}, {"kind", "bottleneck"}, {"t", r[0]},
                          {"out", ch(r[1])}, {"repeat", r[2]}, {"stride", r[3]}});
    layers.push_back({{"name", "head"}, {"kind", "conv2d"}, {"kernel", 1}, {"out", 1280}});
    layers.push_back({{"name", "pool"}, {"kind", "pool"}, {"global", true}});
    layers.push_back({{"name", "classifier"}, {"kind", "fc"}, {"out", 1000}, {"bias", true}});
    json tree{{"name", "mobilenetv2"},
              {"input", {{"width", 224}, {"height", 224}, {"channels", 3}}},
              {"multipliers", {0.75, 0.5, 0.35, 0.18}},
              {"layers", layers}};
    return parse_arch_config(tree);
}

// ---------------------------------------------------------------------------

std::uint64_t baseline_params(const ArchLayer& l)
{
    if (l.kind == ArchLayerKind::pool) return 0;
    return l.weights.size() + (l.bias ? l.weights.out_channels : 0);
}

std::uint64_t stored_params(const ArchLayer& l)
{
    if (!l.compressed()) return baseline_params(l);
    const LayerPlan p = l.plan();
    return p.epitome.size() + p.routing_size() + (l.bias ? l.weights.out_channels : 0);
}

double layer_param_ratio(const LayerPlan& plan)
{
    return static_cast<double>(plan.weights.size()) /
           static_cast<double>(plan.epitome.size() + plan.routing_size());
}

double layer_param_ratio(const ArchLayer& l)
{
    return l.compressed() ? layer_param_ratio(l.plan()) : 1.0;
}

LayerCounts layer_counts(const ArchLayer& l)
{
    LayerCounts c;
    c.name = l.name;
    c.baseline_params = baseline_params(l);
    c.params = stored_params(l);
    c.ratio = layer_param_ratio(l);
    if (l.kind == ArchLayerKind::pool) return c;
    const std::uint64_t positions = static_cast<std::uint64_t>(l.out_w()) * l.out_h();
    const Dims4& w = l.weights;
    const std::uint64_t k = w.width * w.height * w.in_channels; // taps per output
    const std::uint64_t outputs = positions * w.out_channels;
    if (l.compressed()) {
        const LayerPlan p = l.plan();
        c.madd_eqn = count_madd(p, l.out_w(), l.out_h(), MaddMode::reuse);
        c.madd_2k = c.madd_eqn + positions * p.epitome.out_channels;
        c.mac = (c.madd_eqn + 1) / 2;
    } else {
        c.mac = k * outputs;
        c.madd_eqn = (2 * k - 1) * outputs;
        c.madd_2k = 2 * k * outputs;
    }
    return c;
}

NetworkCounts network_counts(const ArchConfig& cfg)
{
    NetworkCounts n;
    for (const ArchLayer& l : cfg.layers) {
        LayerCounts c = layer_counts(l);
        n.params += c.params;
        n.baseline_params += c.baseline_params;
        n.mac += c.mac;
        n.madd_eqn += c.madd_eqn;
        n.madd_2k += c.madd_2k;
        n.layers.push_back(std::move(c));
    }
    n.ratio = n.params ? static_cast<double>(n.baseline_params) / static_cast<double>(n.params) : 1.0;
    return n;
}

double network_ratio(const ArchConfig& cfg) { return network_counts(cfg).ratio; }

ArchConfig plan_from_multiplier(const ArchConfig& cfg, double c)
{
    if (!(c > 0.0 && c <= 1.0)) throw ConfigError("multiplier must lie in (0, 1]");
    ArchConfig out = cfg;
    std::ostringstream tag;
    tag << cfg.name << "@" << c;
    out.name = tag.str();
    for (ArchLayer& l : out.layers) {
        if (l.role != BlockRole::expand && l.role != BlockRole::project) continue;
        const std::size_t hidden = l.role == BlockRole::expand ? l.weights.out_channels : l.weights.in_channels;
        const double exact = c * static_cast<double>(hidden);
        const std::size_t ce = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(exact)));
        if (static_cast<double>(ce) != exact) {
            std::ostringstream note;
            note << l.name << ": " << c << " x " << hidden << " = " << exact << " rounded to " << ce;
            out.notes.push_back(note.str());
        }
        Dims4 e = l.weights;
        if (l.role == BlockRole::expand) e.out_channels = ce;
        else e.in_channels = ce;
        l.epitome = e;
        l.beta_in = l.beta_out = 0;
        l.validate();
    }
    return out;
}

// ---------------------------------------------------------------------------

json to_json(const NetworkCounts& n)
{
    json layers = json::array();
    for (const auto& l : n.layers)
        layers.push_back({{"name", l.name},
                          {"params", l.params},
                          {"baseline_params", l.baseline_params},
                          {"mac", l.mac},
                          {"madd_eqn", l.madd_eqn},
                          {"madd_2k", l.madd_2k},
                          {"ratio", l.ratio}});
    return {{"params", n.params},     {"baseline_params", n.baseline_params},
            {"mac", n.mac},           {"madd_eqn", n.madd_eqn},
            {"madd_2k", n.madd_2k},   {"ratio", n.ratio},
            {"layers", layers}};
}

namespace {

json summary_row(const std::string& method, const NetworkCounts& n, const std::vector<std::string>& notes)
{
    return {{"method", method},
            {"madd_m", static_cast<double>(n.mac) / 1e6},
            {"madd_eqn_m", static_cast<double>(n.madd_eqn) / 1e6},
            {"madd_2k_m", static_cast<double>(n.madd_2k) / 1e6},
            {"params", n.params},
            {"params_m", static_cast<double>(n.params) / 1e6},
            {"compression_rate", n.ratio},
            {"notes", notes}};
}

} // namespace

json cost_report(const ArchConfig& cfg)
{
    json rows = json::array();
    const NetworkCounts base = network_counts(cfg);
    rows.push_back(summary_row(cfg.name, base, cfg.notes));
    for (double m : cfg.multipliers) {
        const ArchConfig planned = plan_from_multiplier(cfg, m);
        rows.push_back(summary_row(planned.name, network_counts(planned), planned.notes));
    }
    return {{"config", cfg.name}, {"rows", rows}, {"baseline", to_json(base)}};
}

std::string cost_report_csv(const ArchConfig& cfg)
{
    const json r = cost_report(cfg);
    std::ostringstream out;
    out << "method,madd_m,madd_eqn_m,madd_2k_m,params,compression_rate\n";
    out << std::fixed;
    for (const auto& row : r.at("rows"))
        out << row.at("method").get<std::string>() << ',' << std::setprecision(3) << row.at("madd_m").get<double>()
            << ',' << row.at("madd_eqn_m").get<double>() << ',' << row.at("madd_2k_m").get<double>() << ','
            << row.at("params").get<std::uint64_t>() << ',' << std::setprecision(4)
            << row.at("compression_rate").get<double>() << '\n';
    return out.str();
}

} // namespace nes
