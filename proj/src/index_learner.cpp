#include "nes/index_learner.hpp"

#include "nes/autograd.hpp"

#include <algorithm>
#include <cmath>

namespace nes {

SuperIndexConfig SuperIndexConfig::resolved(const LayerPlan& plan) const
{
    SuperIndexConfig r{group_in ? group_in : plan.beta_in, group_out ? group_out : plan.beta_out};
    if (r.group_in > plan.epitome.in_channels || r.group_out > plan.epitome.out_channels)
        throw ConfigError("super-index group length exceeds the channel axis");
    return r;
}

IndexLearner::IndexLearner(LayerKind kind, std::size_t in_channels, std::size_t outputs)
    : kind_(kind)
    , in_channels_(in_channels)
    , outputs_(outputs)
    , kw_(kind == LayerKind::fc ? 1 : 3)
    , kh_(kind == LayerKind::conv2d ? 3 : 1)
    , conv1_w_({kw_, kh_, in_channels, kHidden})
    , conv1_b_({kHidden})
    , conv2_w_({kw_, kh_, kHidden, kHidden})
    , conv2_b_({kHidden})
    , head_w_({kHidden, outputs})
    , head_b_({outputs})
{
    if (in_channels == 0 || outputs == 0) throw ConfigError("index learner needs channels and outputs");
}

IndexLearner IndexLearner::random(LayerKind kind, std::size_t in_channels, std::size_t outputs, Rng& rng,
                                  double stddev)
{
    IndexLearner l(kind, in_channels, outputs);
    for (Tensor* p : l.parameters())
        for (auto& v : p->data()) v = stddev * rng.normal();
    return l;
}

Padding IndexLearner::padding() const { return Padding::same(kw_, kh_); }

Tensor IndexLearner::conv(const Tensor& x, const Tensor& w, const Tensor& b) const
{
    Tensor z = conv2d_naive(x, w, 2, padding());
    const std::size_t c = b.size();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += b[i % c];
    return z;
}

IndexLearner::Trace IndexLearner::forward(const Tensor& features) const
{
    if (features.rank() != 3 || features.extent(2) != in_channels_)
        throw DimensionError("index learner input must be (W,H,C_in)", features.shape(),
                             Shape{0, 0, in_channels_});
    Trace t;
    t.input = features;
    t.a1 = conv(features, conv1_w_, conv1_b_);
    for (auto& v : t.a1.data()) v = std::tanh(v);
    t.a2 = conv(t.a1, conv2_w_, conv2_b_);
    for (auto& v : t.a2.data()) v = std::tanh(v);

    const std::size_t positions = t.a2.size() / kHidden;
    t.pooled.assign(kHidden, 0.0);
    for (std::size_t s = 0; s < positions; ++s)
        for (std::size_t c = 0; c < kHidden; ++c) t.pooled[c] += t.a2[s * kHidden + c];
    for (auto& v : t.pooled) v /= static_cast<double>(positions);

    t.out.assign(outputs_, 0.0);
    for (std::size_t n = 0; n < outputs_; ++n) {
        double z = head_b_[n];
        for (std::size_t c = 0; c < kHidden; ++c) z += t.pooled[c] * head_w_[c * outputs_ + n];
        t.out[n] = 1.0 / (1.0 + std::exp(-z));
    }
    return t;
}

std::vector<double> IndexLearner::predict(const Tensor& features) const { return forward(features).out; }

IndexLearner::Grads IndexLearner::backward(const Trace& t, std::span<const double> d_out) const
{
    if (d_out.size() != outputs_) throw DimensionError("learner upstream gradient", Shape{d_out.size()}, Shape{outputs_});
    Grads g;
    g.params = {Tensor(conv1_w_.shape()), Tensor(conv1_b_.shape()), Tensor(conv2_w_.shape()),
                Tensor(conv2_b_.shape()), Tensor(head_w_.shape()),  Tensor(head_b_.shape())};

    std::vector<double> d_logit(outputs_);
    for (std::size_t n = 0; n < outputs_; ++n) d_logit[n] = d_out[n] * t.out[n] * (1.0 - t.out[n]);

    std::vector<double> d_pooled(kHidden, 0.0);
    for (std::size_t c = 0; c < kHidden; ++c)
        for (std::size_t n = 0; n < outputs_; ++n) {
            g.params[4][c * outputs_ + n] = t.pooled[c] * d_logit[n];
            d_pooled[c] += head_w_[c * outputs_ + n] * d_logit[n];
        }
    for (std::size_t n = 0; n < outputs_; ++n) g.params[5][n] = d_logit[n];

    const std::size_t positions = t.a2.size() / kHidden;
    Tensor d_z2(t.a2.shape());
    for (std::size_t s = 0; s < positions; ++s)
        for (std::size_t c = 0; c < kHidden; ++c) {
            const double a = t.a2[s * kHidden + c];
            d_z2[s * kHidden + c] = d_pooled[c] / static_cast<double>(positions) * (1.0 - a * a);
        }
    for (std::size_t i = 0; i < d_z2.size(); ++i) g.params[3][i % kHidden] += d_z2[i];
    g.params[2] = conv2d_backward_weights(d_z2, t.a1, conv2_w_.shape(), 2, padding());

    Tensor d_z1 = conv2d_backward_input(d_z2, conv2_w_, t.a1.shape(), 2, padding());
    for (std::size_t i = 0; i < d_z1.size(); ++i) d_z1[i] *= 1.0 - t.a1[i] * t.a1[i];
    for (std::size_t i = 0; i < d_z1.size(); ++i) g.params[1][i % kHidden] += d_z1[i];
    g.params[0] = conv2d_backward_weights(d_z1, t.input, conv1_w_.shape(), 2, padding());
    g.input = conv2d_backward_input(d_z1, conv1_w_, t.input.shape(), 2, padding());
    return g;
}

std::vector<Tensor*> IndexLearner::parameters()
{
    return {&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_, &head_w_, &head_b_};
}

std::vector<const Tensor*> IndexLearner::parameters() const
{
    return {&conv1_w_, &conv1_b_, &conv2_w_, &conv2_b_, &head_w_, &head_b_};
}

const std::vector<std::string>& IndexLearner::parameter_names()
{
    static const std::vector<std::string> names{"conv1.w", "conv1.b", "conv2.w", "conv2.b", "head.w", "head.b"};
    return names;
}

std::size_t IndexLearner::parameter_count() const
{
    std::size_t n = 0;
    for (const Tensor* p : parameters()) n += p->size();
    return n;
}

// ---------------------------------------------------------------------------

namespace {

double channel_scale(std::size_t channels, std::size_t group)
{
    const std::size_t groups = std::max<std::size_t>(1, channels / group);
    return static_cast<double>(groups * group);
}

double clamp_below(double v, std::size_t dim)
{
    const double top = std::nextafter(static_cast<double>(dim), 0.0);
    return std::clamp(v, 0.0, top);
}

} // namespace

std::vector<double> scale_factors(const LayerPlan& plan, const SuperIndexConfig& cfg)
{
    const SuperIndexConfig g = cfg.resolved(plan);
    const Dims4& d = plan.epitome;
    std::vector<double> f;
    f.reserve(plan.routing_size());
    for (std::size_t r = 0; r < plan.r_in(); ++r) {
        f.push_back(static_cast<double>(d.width));
        f.push_back(static_cast<double>(d.height));
        f.push_back(channel_scale(d.in_channels, g.group_in));
    }
    for (std::size_t r = 0; r < plan.r_out(); ++r) f.push_back(channel_scale(d.out_channels, g.group_out));
    return f;
}

IndexSet scale_indices(std::span<const double> normalized, const LayerPlan& plan, const SuperIndexConfig& cfg)
{
    if (normalized.size() != plan.routing_size())
        throw ConfigError("normalized index count " + std::to_string(normalized.size()) + " != " +
                          std::to_string(plan.routing_size()));
    const SuperIndexConfig g = cfg.resolved(plan);
    const Dims4& d = plan.epitome;
    std::vector<double> flat(normalized.size());
    for (std::size_t r = 0; r < plan.r_in(); ++r) {
        flat[3 * r] = clamp_below(normalized[3 * r] * static_cast<double>(d.width), d.width);
        flat[3 * r + 1] = clamp_below(normalized[3 * r + 1] * static_cast<double>(d.height), d.height);
        const double groups_in = static_cast<double>(std::max<std::size_t>(1, d.in_channels / g.group_in));
        const double group_index = normalized[3 * r + 2] * groups_in;
        flat[3 * r + 2] = clamp_below(group_index * static_cast<double>(g.group_in), d.in_channels);
    }
    const double groups_out = static_cast<double>(std::max<std::size_t>(1, d.out_channels / g.group_out));
    for (std::size_t r = 0; r < plan.r_out(); ++r) {
        const std::size_t at = 3 * plan.r_in() + r;
        flat[at] = clamp_below(normalized[at] * groups_out * static_cast<double>(g.group_out), d.out_channels);
    }
    return IndexSet::from_flat(plan, flat);
}

} // namespace nes
