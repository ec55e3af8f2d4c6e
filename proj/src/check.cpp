#include "nes/check.hpp"

#include <cmath>
#include <sstream>

namespace nes {

namespace {

double kink_distance(const IndexSet& s)
{
    double d = 1.0;
    for (double v : s.flat()) d = std::min(d, std::abs(v - std::round(v)));
    return d;
}

void add_layer_groups(EpitomeLayer& live, const EpitomeLayer& grads, const GradCheckOptions& o,
                      std::vector<ParamGroup>& groups)
{
    const std::string& n = live.name();
    groups.push_back({n + ".epitome", live.epitome().values().data(), grads.epitome_grad().data(), o.epitome_tolerance});
    if (live.bias()) groups.push_back({n + ".bias", live.bias()->data(), grads.bias_grad()->data(), o.epitome_tolerance});
    auto params = live.learner()->parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
        groups.push_back({n + ".learner." + IndexLearner::parameter_names()[i], params[i]->data(),
                          grads.learner_grads()[i].data(), o.learner_tolerance});
}

} // namespace

LayerCheck check_random_layer(Rng& rng, LayerKind kind, const GradCheckOptions& o)
{
    auto pick = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
    for (;;) {
        const bool fc = kind == LayerKind::fc;
        const std::size_t kw = fc ? 1 : pick(1, 3);
        const std::size_t kh = kind == LayerKind::conv2d ? pick(1, 3) : 1;
        Dims4 w{kw, kh, pick(fc ? 2 : 1, 5), pick(1, 5)};
        Dims4 e{pick(1, kw), pick(1, kh), pick(1, w.in_channels), pick(1, w.out_channels)};
        // A single-element epitome makes every index irrelevant, so the learner
        // gradient is identically zero and its relative error meaningless.
        if (e.size() >= w.size() || e.size() < 2) continue;
        LayerPlan plan = LayerPlan::make(kind, w, e);
        plan.beta_in = pick(1, e.in_channels);
        plan.beta_out = pick(1, e.out_channels);
        ConvSpec conv;
        if (!fc) {
            conv.stride = pick(1, 2);
            conv.padding = {pick(0, kw - 1), pick(0, kw - 1), pick(0, kh - 1), pick(0, kh - 1)};
        }
        const Shape in{fc ? 1 : pick(kw + 1, 6), kind == LayerKind::conv2d ? pick(kh + 1, 6) : 1, w.in_channels};

        EpitomeLayer layer("layer", plan, conv, true, {}, kDefaultMomentum, rng);
        // Spread the learner outputs over (0, 1) instead of clustering at 0.5.
        for (auto& v : layer.learner()->parameters()[5]->data()) v = rng.uniform(-2.0, 2.0);
        std::vector<Tensor> xs{random_uniform(in, rng), random_uniform(in, rng)};

        if (o.ema) {
            EpitomeLayer::Cache warm;
            layer.forward_train({random_uniform(in, rng)}, true, warm);
        }
        EpitomeLayer probe = layer;
        EpitomeLayer::Cache cache;
        const auto ys = probe.forward_train(xs, o.ema, cache);
        if (kink_distance(cache.fresh) < o.kink_margin || kink_distance(cache.used) < o.kink_margin) continue;
        std::vector<Tensor> r;
        for (const auto& y : ys) r.push_back(random_uniform(y.shape(), rng));
        const std::vector<Tensor> dx = probe.backward(cache, r);

        auto loss = [&] {
            EpitomeLayer copy = layer;
            EpitomeLayer::Cache c;
            const auto out = copy.forward_train(xs, o.ema, c);
            double acc = 0.0;
            for (std::size_t b = 0; b < out.size(); ++b) acc += dot(out[b], r[b]);
            return acc;
        };
        std::vector<ParamGroup> groups;
        add_layer_groups(layer, probe, o, groups);
        for (std::size_t b = 0; b < xs.size(); ++b)
            groups.push_back({"input" + std::to_string(b), xs[b].data(), dx[b].data(), o.learner_tolerance});

        std::ostringstream d;
        d << to_string(kind) << " weights " << to_string(w.shape()) << " epitome " << to_string(e.shape()) << " beta ("
          << plan.beta_in << ", " << plan.beta_out << ") stride " << conv.stride << " input " << to_string(in)
          << (o.ema ? " ema" : "");
        return {d.str(), grad_check(loss, groups, o.eps)};
    }
}

GradCheckReport check_network(const Network& net, const std::vector<Tensor>& xs, const std::vector<std::size_t>& ys,
                              const GradCheckOptions& o)
{
    Network live = net;
    if (o.ema) {
        Network::Cache warm;
        live.forward_train(xs, true, warm);
    }
    Network probe = live;
    probe.zero_grad();
    Network::Cache cache;
    probe.backward(cache, cross_entropy(probe.forward_train(xs, o.ema, cache), ys).d_logits);

    auto loss = [&] {
        Network copy = live;
        Network::Cache c;
        return cross_entropy(copy.forward_train(xs, o.ema, c), ys).loss;
    };
    std::vector<ParamGroup> groups;
    for (std::size_t i = 0; i < live.stages().size(); ++i) {
        auto& s = live.stages()[i];
        if (!s.layer) continue;
        if (!s.layer->learner()) throw StateError(s.layer->name() + ": gradient check needs the index learner");
        add_layer_groups(*s.layer, *probe.stages()[i].layer, o, groups);
    }
    return grad_check(loss, groups, o.eps);
}

KinkDistance kink_distance(const Network& net, const std::vector<Tensor>& xs, bool ema)
{
    Network live = net;
    if (ema) {
        Network::Cache warm;
        live.forward_train(xs, true, warm);
    }
    Network::Cache c;
    live.forward_train(xs, ema, c);
    KinkDistance d;
    for (std::size_t i = 0; i < live.stages().size(); ++i) {
        if (live.stages()[i].kind == StageKind::relu)
            for (const auto& a : c.activations[i])
                for (double v : a.data()) d.relu = std::min(d.relu, std::abs(v));
        if (live.stages()[i].layer)
            d.index = std::min({d.index, kink_distance(c.layers[i].fresh), kink_distance(c.layers[i].used)});
    }
    return d;
}

nlohmann::json to_json(const GradCheckReport& r)
{
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : r.groups)
        groups.push_back({{"name", g.name},
                          {"max_rel_error", g.max_rel_error},
                          {"max_abs_error", g.max_abs_error},
                          {"tolerance", g.tolerance},
                          {"passed", g.passed}});
    return {{"passed", r.passed()}, {"groups", groups}};
}

} // namespace nes
