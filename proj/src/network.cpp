#include "nes/network.hpp"

#include "nes/detail/bytes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace nes {

namespace {

using nlohmann::json;

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where)
{
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : obj.items())
        if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
T get_or(const json& obj, const char* key, T fallback)
{
    return obj.contains(key) ? obj.at(key).get<T>() : fallback;
}

Dims4 dims4(const json& j, const std::string& where)
{
    if (!j.is_array() || j.size() != 4) throw ConfigError(where + " must be [w, h, C_in, C_out]");
    return {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>(), j[3].get<std::size_t>()};
}

StageKind stage_kind(const std::string& type, LayerKind& layer)
{
    if (type == "conv2d" || type == "conv1d" || type == "fc") {
        layer = layer_kind_from_string(type);
        return StageKind::epitome;
    }
    if (type == "relu") return StageKind::relu;
    if (type == "tanh") return StageKind::tanh;
    if (type == "gap") return StageKind::gap;
    if (type == "flatten") return StageKind::flatten;
    throw ConfigError("unknown layer type '" + type + "'");
}

StageSpec parse_stage(const json& j, std::size_t index)
{
    const std::string where = "layers[" + std::to_string(index) + "]";
    if (!j.is_object() || !j.contains("type")) throw ConfigError(where + " needs a \"type\"");
    StageSpec s;
    s.kind = stage_kind(j.at("type").get<std::string>(), s.layer);
    s.name = get_or<std::string>(j, "name", j.at("type").get<std::string>() + std::to_string(index));
    if (s.kind != StageKind::epitome) {
        check_keys(j, {"type", "name"}, where);
        return s;
    }
    check_keys(j, {"type", "name", "kernel", "out", "epitome", "beta", "stride", "padding", "bias", "super_index",
                   "shared_spatial"},
               where);
    if (!j.contains("out") || !j.contains("epitome")) throw ConfigError(where + " needs \"out\" and \"epitome\"");
    s.out = j.at("out").get<std::size_t>();
    s.epitome = dims4(j.at("epitome"), where + ".epitome");
    if (s.layer != LayerKind::fc) {
        const json& k = j.contains("kernel") ? j.at("kernel") : json(1);
        if (k.is_array()) {
            if (k.size() != 2) throw ConfigError(where + ".kernel must be n or [w, h]");
            s.kernel_w = k[0].get<std::size_t>();
            s.kernel_h = k[1].get<std::size_t>();
        } else {
            s.kernel_w = k.get<std::size_t>();
            s.kernel_h = s.layer == LayerKind::conv2d ? s.kernel_w : 1;
        }
    } else if (j.contains("kernel")) {
        throw ConfigError(where + ": fc layers take no kernel");
    }
    if (j.contains("beta")) {
        const json& b = j.at("beta");
        if (!b.is_array() || b.size() != 2) throw ConfigError(where + ".beta must be [beta1, beta2]");
        s.beta_in = b[0].get<std::size_t>();
        s.beta_out = b[1].get<std::size_t>();
    }
    if (j.contains("super_index")) {
        const json& g = j.at("super_index");
        if (!g.is_array() || g.size() != 2) throw ConfigError(where + ".super_index must be [l_in, l_out]");
        s.super = {g[0].get<std::size_t>(), g[1].get<std::size_t>()};
    }
    s.stride = get_or<std::size_t>(j, "stride", 1);
    s.bias = get_or<bool>(j, "bias", true);
    s.shared_spatial = get_or<bool>(j, "shared_spatial", false);
    if (j.contains("padding")) {
        const json& p = j.at("padding");
        if (p.is_string()) {
            const std::string v = p.get<std::string>();
            if (v == "same") s.padding = Padding::same(s.kernel_w, s.kernel_h);
            else if (v == "valid") s.padding = Padding::none();
            else throw ConfigError(where + ".padding must be \"same\", \"valid\" or [bw, aw, bh, ah]");
        } else {
            const Dims4 d = dims4(p, where + ".padding");
            s.padding = Padding{d.width, d.height, d.in_channels, d.out_channels};
        }
    }
    return s;
}

} // namespace

void ExperimentConfig::validate() const
{
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
    if (loss != "cross_entropy") throw ConfigError("only the cross_entropy loss is supported");
    if (stages.empty()) throw ConfigError("no layers");
    if (dataset.kind == "idx") {
        if (dataset.images.empty() || dataset.labels.empty()) throw ConfigError("idx dataset needs images and labels");
    } else {
        dataset_kind_from_string(dataset.kind);
        if (dataset.n < 2) throw ConfigError("dataset.n must be >= 2");
    }
}

ExperimentConfig parse_experiment(const json& tree, const std::filesystem::path& base)
{
    try {
        check_keys(tree,
                   {"name", "seed", "dataset", "layers", "lr", "momentum", "steps", "batch_size", "ema_indices", "wrap",
                    "loss"},
                   "experiment config");
        ExperimentConfig c;
        c.name = get_or<std::string>(tree, "name", c.name);
        c.seed = get_or<std::uint64_t>(tree, "seed", c.seed);
        c.lr = get_or<double>(tree, "lr", c.lr);
        c.momentum = get_or<double>(tree, "momentum", c.momentum);
        c.steps = get_or<std::size_t>(tree, "steps", c.steps);
        c.batch_size = get_or<std::size_t>(tree, "batch_size", c.batch_size);
        c.ema_indices = get_or<bool>(tree, "ema_indices", c.ema_indices);
        c.wrap = get_or<bool>(tree, "wrap", c.wrap);
        c.loss = get_or<std::string>(tree, "loss", c.loss);
        if (tree.contains("dataset")) {
            const json& d = tree.at("dataset");
            check_keys(d, {"kind", "n", "seed", "images", "labels"}, "dataset");
            c.dataset.kind = get_or<std::string>(d, "kind", c.dataset.kind);
            c.dataset.n = get_or<std::size_t>(d, "n", c.dataset.n);
            if (d.contains("seed")) c.dataset.seed = d.at("seed").get<std::uint64_t>();
            auto resolve = [&](const char* key) {
                std::filesystem::path p = get_or<std::string>(d, key, "");
                return p.empty() || p.is_absolute() ? p : base / p;
            };
            c.dataset.images = resolve("images");
            c.dataset.labels = resolve("labels");
        }
        if (!tree.contains("layers") || !tree.at("layers").is_array()) throw ConfigError("\"layers\" must be an array");
        for (std::size_t i = 0; i < tree.at("layers").size(); ++i) c.stages.push_back(parse_stage(tree.at("layers")[i], i));
        c.validate();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad experiment config: ") + e.what());
    }
}

ExperimentConfig load_experiment(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    json tree;
    try {
        tree = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what(), e.byte);
    }
    return parse_experiment(tree, path.parent_path());
}

Dataset load_dataset(const ExperimentConfig& cfg)
{
    Dataset d = cfg.dataset.kind == "idx"
                    ? ingest_idx(cfg.dataset.images, cfg.dataset.labels)
                    : generate_dataset(dataset_kind_from_string(cfg.dataset.kind), cfg.dataset.seed.value_or(cfg.seed),
                                       cfg.dataset.n);
    d.validate();
    return d;
}

// ---------------------------------------------------------------- network

Network::Network(Shape input, std::size_t classes, std::vector<Stage> stages)
    : input_(std::move(input))
    , classes_(classes)
    , stages_(std::move(stages))
{
    if (input_.size() != 3) throw DimensionError("network input must be (W,H,C)", input_, Shape{0, 0, 0});
    for (const auto& s : stages_)
        if ((s.kind == StageKind::epitome) != s.layer.has_value())
            throw ConfigError("epitome stages and only they carry a layer");
}

Network Network::build(const ExperimentConfig& cfg, const Shape& input, std::size_t classes, Rng& rng)
{
    if (input.size() != 3) throw DimensionError("network input must be (W,H,C)", input, Shape{0, 0, 0});
    std::size_t W = input[0], H = input[1], C = input[2];
    std::vector<Stage> stages;
    std::set<std::string> names;
    for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
        const StageSpec& s = cfg.stages[i];
        Stage st{s.kind, std::nullopt};
        switch (s.kind) {
        case StageKind::relu:
        case StageKind::tanh: break;
        case StageKind::gap: W = H = 1; break;
        case StageKind::flatten:
            C *= W * H;
            W = H = 1;
            break;
        case StageKind::epitome: {
            if (!names.insert(s.name).second) throw ConfigError("duplicate layer name '" + s.name + "'");
            if (s.layer == LayerKind::conv1d && H != 1) throw ConfigError(s.name + ": conv1d input must have height 1");
            if (s.layer == LayerKind::fc && (W != 1 || H != 1))
                throw ConfigError(s.name + ": fc input must be 1x1; add gap or flatten first");
            const Dims4 weights{s.kernel_w, s.kernel_h, C, s.out};
            LayerPlan plan;
            plan.kind = s.layer;
            plan.weights = weights;
            plan.epitome = s.epitome;
            plan.beta_in = s.beta_in ? s.beta_in : s.epitome.in_channels;
            plan.beta_out = s.beta_out ? s.beta_out : s.epitome.out_channels;
            plan.shared_spatial = s.shared_spatial;
            plan.wrap = cfg.wrap;
            try {
                plan.validate();
            } catch (const ConfigError& e) {
                throw ConfigError(s.name + ": " + e.what());
            }
            ConvSpec conv{s.stride, s.padding.value_or(Padding::none())};
            const std::size_t ow =
                conv_output_extent(W, conv.padding.before_w, conv.padding.after_w, s.kernel_w, s.stride);
            const std::size_t oh =
                conv_output_extent(H, conv.padding.before_h, conv.padding.after_h, s.kernel_h, s.stride);
            if (ow == 0 || oh == 0) throw ConfigError(s.name + ": kernel larger than its padded input");
            Rng local = rng.fork(i);
            st.layer.emplace(s.name, plan, conv, s.bias, s.super, cfg.momentum, local);
            W = ow;
            H = oh;
            C = s.out;
            break;
        }
        }
        stages.push_back(std::move(st));
    }
    if (W != 1 || H != 1 || C != classes)
        throw ConfigError("network output is " + to_string(Shape{W, H, C}) + ", expected (1, 1, " +
                          std::to_string(classes) + ")");
    return Network(input, classes, std::move(stages));
}

namespace {

Tensor apply_pointwise(StageKind kind, const Tensor& x)
{
    Tensor y = x;
    switch (kind) {
    case StageKind::relu:
        for (auto& v : y.data()) v = std::max(v, 0.0);
        return y;
    case StageKind::tanh:
        for (auto& v : y.data()) v = std::tanh(v);
        return y;
    case StageKind::gap: {
        const std::size_t c = x.extent(2), n = x.size() / c;
        Tensor g({1, 1, c});
        for (std::size_t i = 0; i < x.size(); ++i) g[i % c] += x[i];
        g *= 1.0 / static_cast<double>(n);
        return g;
    }
    case StageKind::flatten: return x.reshaped({1, 1, x.size()});
    case StageKind::epitome: break;
    }
    return y;
}

Tensor back_pointwise(StageKind kind, const Tensor& x, const Tensor& dy)
{
    Tensor dx(x.shape());
    switch (kind) {
    case StageKind::relu:
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
        break;
    case StageKind::tanh:
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double t = std::tanh(x[i]);
            dx[i] = dy[i] * (1.0 - t * t);
        }
        break;
    case StageKind::gap: {
        const std::size_t c = x.extent(2);
        const double inv = 1.0 / static_cast<double>(x.size() / c);
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i % c] * inv;
        break;
    }
    case StageKind::flatten: dx = dy.reshaped(x.shape()); break;
    case StageKind::epitome: break;
    }
    return dx;
}

} // namespace

std::vector<Tensor> Network::forward_train(const std::vector<Tensor>& xs, bool ema, Cache& cache)
{
    for (const auto& x : xs)
        if (x.shape() != input_) throw DimensionError("network input", x.shape(), input_);
    cache.activations.clear();
    cache.layers.assign(stages_.size(), {});
    std::vector<Tensor> acts = xs;
    for (std::size_t i = 0; i < stages_.size(); ++i) {
        cache.activations.push_back(acts);
        Stage& s = stages_[i];
        if (s.layer) {
            acts = s.layer->forward_train(acts, ema, cache.layers[i]);
        } else {
            for (auto& a : acts) a = apply_pointwise(s.kind, a);
        }
    }
    return acts;
}

void Network::backward(Cache& cache, const std::vector<Tensor>& d_logits)
{
    std::vector<Tensor> grads = d_logits;
    for (std::size_t i = stages_.size(); i-- > 0;) {
        Stage& s = stages_[i];
        if (s.layer) {
            grads = s.layer->backward(cache.layers[i], grads);
        } else {
            for (std::size_t b = 0; b < grads.size(); ++b)
                grads[b] = back_pointwise(s.kind, cache.activations[i][b], grads[b]);
        }
    }
}

void Network::zero_grad()
{
    for (auto& s : stages_)
        if (s.layer) s.layer->zero_grad();
}

void Network::step(double lr)
{
    for (auto& s : stages_)
        if (s.layer) s.layer->step(lr);
}

Tensor Network::forward_eval(const Tensor& x) const
{
    if (x.shape() != input_) throw DimensionError("network input", x.shape(), input_);
    Tensor a = x;
    for (const auto& s : stages_) a = s.layer ? s.layer->forward_eval(a) : apply_pointwise(s.kind, a);
    return a;
}

Tensor Network::infer(const Tensor& x, std::vector<MaddReport>* reports, const InferOptions& options) const
{
    if (x.shape() != input_) throw DimensionError("network input", x.shape(), input_);
    Tensor a = x;
    for (const auto& s : stages_) {
        if (!s.layer) {
            a = apply_pointwise(s.kind, a);
            continue;
        }
        InferResult r = s.layer->infer(a, options);
        a = std::move(r.output);
        if (reports) reports->push_back(std::move(r.report));
    }
    return a;
}

void Network::freeze()
{
    for (auto& s : stages_)
        if (s.layer) s.layer->freeze();
}

void Network::drop_learners()
{
    for (auto& s : stages_)
        if (s.layer) s.layer->drop_learner();
}

std::vector<const EpitomeLayer*> Network::epitome_layers() const
{
    std::vector<const EpitomeLayer*> out;
    for (const auto& s : stages_)
        if (s.layer) out.push_back(&*s.layer);
    return out;
}

const EpitomeLayer& Network::layer(const std::string& name) const
{
    for (const auto* l : epitome_layers())
        if (l->name() == name) return *l;
    throw ConfigError("no epitome layer named '" + name + "'");
}

// ---------------------------------------------------------------- training

LossResult cross_entropy(const std::vector<Tensor>& logits, const std::vector<std::size_t>& labels)
{
    if (logits.size() != labels.size() || logits.empty()) throw ConfigError("logits and labels differ in count");
    LossResult r;
    const double inv = 1.0 / static_cast<double>(logits.size());
    std::size_t hits = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const Tensor& z = logits[i];
        if (labels[i] >= z.size()) throw ConfigError("label " + std::to_string(labels[i]) + " outside the logits");
        const double mx = *std::max_element(z.data().begin(), z.data().end());
        double sum = 0.0;
        for (double v : z.data()) sum += std::exp(v - mx);
        const double lse = mx + std::log(sum);
        r.loss += (lse - z[labels[i]]) * inv;
        Tensor d(z.shape());
        for (std::size_t k = 0; k < z.size(); ++k) d[k] = std::exp(z[k] - lse) * inv;
        d[labels[i]] -= inv;
        r.d_logits.push_back(std::move(d));
        const auto arg = static_cast<std::size_t>(std::max_element(z.data().begin(), z.data().end()) - z.data().begin());
        hits += arg == labels[i];
    }
    r.accuracy = static_cast<double>(hits) * inv;
    return r;
}

TrainResult train(const ExperimentConfig& cfg)
{
    cfg.validate();
    const Dataset data = load_dataset(cfg);
    Rng root(cfg.seed);
    Rng init = root.fork(1), order = root.fork(2);
    TrainResult out{Network::build(cfg, data.sample_shape(), data.classes, init), {}, 0, 0, {}, 0, 0};
    Network& net = out.network;

    const std::size_t n = data.size();
    const std::size_t batch = cfg.batch_size ? std::min(cfg.batch_size, n) : n;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::size_t cursor = batch == n ? 0 : n;

    double last_finite = 0.0;
    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        if (cursor + batch > n) {
            for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[order.below(i)]);
            cursor = 0;
        }
        std::vector<Tensor> xs;
        std::vector<std::size_t> ys;
        for (std::size_t k = 0; k < batch; ++k) {
            xs.push_back(data.samples[perm[cursor + k]]);
            ys.push_back(data.labels[perm[cursor + k]]);
        }
        if (batch < n) cursor += batch;

        net.zero_grad();
        Network::Cache cache;
        const LossResult lr = cross_entropy(net.forward_train(xs, cfg.ema_indices, cache), ys);
        if (!std::isfinite(lr.loss)) {
            std::ostringstream msg;
            msg << "loss became " << lr.loss << " at step " << step << " (lr " << cfg.lr << ", previous loss "
                << last_finite << ")";
            throw TrainingError(msg.str());
        }
        last_finite = lr.loss;
        net.backward(cache, lr.d_logits);
        net.step(cfg.lr);
        out.log.push_back({step, lr.loss, lr.accuracy});
    }

    Network::Cache cache;
    out.final_logits = net.forward_train(data.samples, cfg.ema_indices, cache);
    const LossResult fin = cross_entropy(out.final_logits, data.labels);
    out.final_loss = fin.loss;
    out.final_accuracy = fin.accuracy;
    for (std::size_t i = 0; i < net.stages().size(); ++i) {
        const auto& s = net.stages()[i];
        if (!s.layer) continue;
        const auto m = s.layer->routing_map()->indices().flat();
        const auto u = cache.layers[i].used.flat();
        for (std::size_t k = 0; k < m.size(); ++k) out.index_drift = std::max(out.index_drift, std::abs(m[k] - u[k]));
    }
    net.freeze();
    for (std::size_t i = 0; i < n; ++i)
        out.output_gap = std::max(out.output_gap, max_abs_diff(net.infer(data.samples[i]), out.final_logits[i]));
    return out;
}

std::string metrics_jsonl(const std::vector<StepMetrics>& log)
{
    std::string s;
    for (const auto& m : log) {
        s += json{{"step", m.step}, {"loss", m.loss}, {"accuracy", m.accuracy}}.dump();
        s += '\n';
    }
    return s;
}

json summary_json(const ExperimentConfig& cfg, const TrainResult& r)
{
    json layers = json::array();
    std::size_t baseline = 0, stored = 0;
    for (const auto* l : r.network.epitome_layers()) {
        const LayerPlan& p = l->plan();
        baseline += p.weights.size();
        stored += l->stored_numbers();
        layers.push_back({{"name", l->name()},
                          {"kind", to_string(p.kind)},
                          {"weights", p.weights.shape()},
                          {"epitome", p.epitome.shape()},
                          {"stored_numbers", l->stored_numbers()},
                          {"weight_to_epitome", static_cast<double>(p.weights.size()) / static_cast<double>(p.epitome.size())}});
    }
    return {{"name", cfg.name},
            {"seed", cfg.seed},
            {"steps", cfg.steps},
            {"ema_indices", cfg.ema_indices},
            {"final_loss", r.final_loss},
            {"final_accuracy", r.final_accuracy},
            {"index_drift", r.index_drift},
            {"output_gap", r.output_gap},
            {"baseline_weights", baseline},
            {"stored_numbers", stored},
            {"compression_rate", static_cast<double>(baseline) / static_cast<double>(stored)},
            {"layers", layers}};
}

// ---------------------------------------------------------------- checkpoint

namespace {

std::uint32_t stage_code(const Network::Stage& s)
{
    switch (s.kind) {
    case StageKind::epitome: return static_cast<std::uint32_t>(s.layer->plan().kind);
    case StageKind::relu: return 10;
    case StageKind::tanh: return 11;
    case StageKind::gap: return 12;
    case StageKind::flatten: return 13;
    }
    return 0;
}

void put_u32(detail::ByteWriter& w, std::size_t v)
{
    if (v > 0xFFFFFFFFu) throw ConfigError("value too large for the checkpoint format");
    w.u32(static_cast<std::uint32_t>(v));
}

void put_dims(detail::ByteWriter& w, const Dims4& d)
{
    for (std::size_t a = 0; a < 4; ++a) put_u32(w, d[a]);
}

void put_values(detail::ByteWriter& w, const Tensor& t)
{
    for (double v : t.data()) w.f64(v);
}

Dims4 get_dims(detail::ByteReader& r) { return {r.u32(), r.u32(), r.u32(), r.u32()}; }

void get_values(detail::ByteReader& r, Tensor& t, const char* what)
{
    r.need(8 * t.size(), what);
    for (auto& v : t.data()) v = r.f64();
}

Network decode(std::span<const std::uint8_t> bytes, std::vector<StoredCounts>* counts)
{
    detail::ByteReader r(bytes);
    r.expect_tag("NESE", "checkpoint");
    const std::size_t version_at = r.offset();
    if (r.u32() != kCheckpointVersion) throw ParseError("unsupported checkpoint version", version_at);
    Shape input{r.u32(), r.u32(), r.u32()};
    const std::size_t classes = r.u32();
    const std::size_t count = r.u32();
    std::vector<Network::Stage> stages;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t code_at = r.offset();
        const std::uint32_t code = r.u32();
        switch (code) {
        case 10: stages.push_back({StageKind::relu, std::nullopt}); continue;
        case 11: stages.push_back({StageKind::tanh, std::nullopt}); continue;
        case 12: stages.push_back({StageKind::gap, std::nullopt}); continue;
        case 13: stages.push_back({StageKind::flatten, std::nullopt}); continue;
        case 0:
        case 1:
        case 2: break;
        default: throw ParseError("unknown stage code " + std::to_string(code), code_at);
        }
        StoredCounts sc;
        const std::size_t name_len = r.u32();
        r.need(name_len, "layer name");
        std::string name(reinterpret_cast<const char*>(bytes.data() + r.offset()), name_len);
        for (std::size_t k = 0; k < name_len; ++k) r.u8();
        sc.name = name;

        const std::size_t plan_at = r.offset();
        LayerPlan plan;
        plan.kind = static_cast<LayerKind>(code);
        plan.weights = get_dims(r);
        plan.epitome = get_dims(r);
        plan.beta_in = r.u32();
        plan.beta_out = r.u32();
        const std::uint8_t flags = r.u8();
        if (flags >> 5) throw ParseError("unknown plan flag bits", r.offset() - 1);
        plan.sample_spatial = flags & 1;
        plan.sample_in = flags & 2;
        plan.sample_out = flags & 4;
        plan.shared_spatial = flags & 8;
        plan.wrap = flags & 16;
        ConvSpec conv;
        conv.stride = r.u32();
        conv.padding = {r.u32(), r.u32(), r.u32(), r.u32()};
        SuperIndexConfig super{r.u32(), r.u32()};
        try {
            plan.validate();
            super.resolved(plan);
        } catch (const ConfigError& e) {
            throw ParseError(std::string("invalid layer plan: ") + e.what(), plan_at);
        }

        const std::size_t n_at = r.offset();
        const std::size_t n = r.u32();
        if (n != plan.epitome.size()) throw ParseError("epitome value count differs from its dims", n_at);
        Tensor values(plan.epitome.shape());
        get_values(r, values, "epitome values");
        sc.epitome = n;

        std::size_t off = r.offset();
        RoutingMap map = RoutingMap::deserialize(bytes, off);
        sc.routing = map.stored_numbers();
        r = detail::ByteReader(bytes, off);

        std::optional<Tensor> bias;
        const std::size_t bias_at = r.offset();
        const std::uint8_t has_bias = r.u8();
        if (has_bias > 1) throw ParseError("bias flag must be 0 or 1", bias_at);
        if (has_bias) {
            bias = Tensor({plan.weights.out_channels});
            get_values(r, *bias, "bias");
            sc.bias = bias->size();
        }
        std::optional<IndexLearner> learner;
        const std::size_t learner_at = r.offset();
        const std::uint8_t has_learner = r.u8();
        if (has_learner > 1) throw ParseError("learner flag must be 0 or 1", learner_at);
        if (has_learner) {
            learner.emplace(plan.kind, plan.weights.in_channels, plan.routing_size());
            for (Tensor* p : learner->parameters()) {
                get_values(r, *p, "learner weights");
                sc.learner += p->size();
            }
        }
        try {
            EpitomeLayer layer(name, plan, conv, Epitome(std::move(values)), std::move(bias), super, std::move(map),
                               std::move(learner));
            stages.push_back({StageKind::epitome, std::move(layer)});
        } catch (const std::invalid_argument& e) {
            throw ParseError(std::string("inconsistent layer record: ") + e.what(), plan_at);
        }
        if (counts) counts->push_back(sc);
    }
    if (r.remaining() != 0) throw ParseError("trailing bytes after checkpoint", r.offset());
    try {
        return Network(std::move(input), classes, std::move(stages));
    } catch (const std::invalid_argument& e) {
        throw ParseError(std::string("inconsistent checkpoint: ") + e.what(), 0);
    }
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Network& net, bool with_learners)
{
    detail::ByteWriter w;
    w.tag("NESE");
    w.u32(kCheckpointVersion);
    for (std::size_t d : net.input_shape()) put_u32(w, d);
    put_u32(w, net.classes());
    put_u32(w, net.stages().size());
    for (const auto& s : net.stages()) {
        w.u32(stage_code(s));
        if (!s.layer) continue;
        const EpitomeLayer& l = *s.layer;
        if (!l.routing_map()) throw StateError(l.name() + ": no routing map to save; train first");
        put_u32(w, l.name().size());
        w.bytes({reinterpret_cast<const std::uint8_t*>(l.name().data()), l.name().size()});
        const LayerPlan& p = l.plan();
        put_dims(w, p.weights);
        put_dims(w, p.epitome);
        put_u32(w, p.beta_in);
        put_u32(w, p.beta_out);
        w.u8(static_cast<std::uint8_t>(p.sample_spatial | p.sample_in << 1 | p.sample_out << 2 | p.shared_spatial << 3 |
                                       p.wrap << 4));
        put_u32(w, l.conv().stride);
        const Padding& pad = l.conv().padding;
        for (std::size_t v : {pad.before_w, pad.after_w, pad.before_h, pad.after_h}) put_u32(w, v);
        put_u32(w, l.super_index().group_in);
        put_u32(w, l.super_index().group_out);
        put_u32(w, l.epitome().size());
        put_values(w, l.epitome().values());
        w.bytes(l.routing_map()->serialize());
        w.u8(l.bias() ? 1 : 0);
        if (l.bias()) put_values(w, *l.bias());
        const bool learner = with_learners && l.learner();
        w.u8(learner ? 1 : 0);
        if (learner)
            for (const Tensor* t : l.learner()->parameters()) put_values(w, *t);
    }
    return std::move(w.buffer());
}

Network decode_checkpoint(std::span<const std::uint8_t> bytes) { return decode(bytes, nullptr); }

std::vector<StoredCounts> checkpoint_stored_counts(std::span<const std::uint8_t> bytes)
{
    std::vector<StoredCounts> c;
    decode(bytes, &c);
    return c;
}

void save_checkpoint(const Network& net, const std::filesystem::path& path, bool with_learners)
{
    const auto bytes = encode_checkpoint(net, with_learners);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Network load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_checkpoint(bytes);
}

} // namespace nes
