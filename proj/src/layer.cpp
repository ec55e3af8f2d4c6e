#include "nes/layer.hpp"

#include "nes/autograd.hpp"

#include <cmath>

namespace nes {

namespace {

void add_bias(Tensor& y, const Tensor& b)
{
    const std::size_t c = b.size();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % c];
}

} // namespace

EpitomeLayer::EpitomeLayer(std::string name, LayerPlan plan, ConvSpec conv, bool bias, SuperIndexConfig super,
                           double momentum, Rng& rng)
    : name_(std::move(name))
    , plan_(plan)
    , conv_(conv)
    , epitome_(plan.epitome)
    , super_(super)
    , momentum_(momentum)
{
    plan_.validate();
    super_.resolved(plan_);
    if (conv_.stride == 0) throw ConfigError(name_ + ": stride must be >= 1");
    if (epitome_.size() >= plan_.weights.size())
        throw ConfigError(name_ + ": epitome (" + std::to_string(epitome_.size()) +
                          ") must be smaller than the weight tensor (" + std::to_string(plan_.weights.size()) + ")");
    const double fan_in = static_cast<double>(plan_.weights.width * plan_.weights.height * plan_.weights.in_channels);
    epitome_.values() = random_normal(plan_.epitome.shape(), rng, std::sqrt(2.0 / fan_in));
    if (bias) bias_ = Tensor({plan_.weights.out_channels});
    learner_ = IndexLearner::random(plan_.kind, plan_.weights.in_channels, plan_.routing_size(), rng);
    zero_grad();
}

EpitomeLayer::EpitomeLayer(std::string name, LayerPlan plan, ConvSpec conv, Epitome epitome, std::optional<Tensor> bias,
                           SuperIndexConfig super, RoutingMap map, std::optional<IndexLearner> learner)
    : name_(std::move(name))
    , plan_(plan)
    , conv_(conv)
    , epitome_(std::move(epitome))
    , bias_(std::move(bias))
    , super_(super)
    , momentum_(map.momentum())
    , map_(std::move(map))
    , learner_(std::move(learner))
{
    plan_.validate();
    if (!(epitome_.dims() == plan_.epitome))
        throw DimensionError(name_ + ": epitome differs from the plan", epitome_.dims().shape(), plan_.epitome.shape());
    if (bias_ && bias_->shape() != Shape{plan_.weights.out_channels})
        throw DimensionError(name_ + ": bias length", bias_->shape(), Shape{plan_.weights.out_channels});
    if (map_->r_in() != plan_.r_in() || map_->r_out() != plan_.r_out() || !(map_->epitome_dims() == plan_.epitome))
        throw ConfigError(name_ + ": routing map does not match the plan");
    zero_grad();
}

void EpitomeLayer::zero_grad()
{
    d_epitome_ = Tensor(plan_.epitome.shape());
    if (bias_) d_bias_ = Tensor(bias_->shape());
    d_learner_.clear();
    if (learner_)
        for (const Tensor* p : learner_->parameters()) d_learner_.emplace_back(p->shape());
    d_indices_.assign(plan_.routing_size(), 0.0);
}

Tensor EpitomeLayer::convolve(const Tensor& x, const Tensor& weights) const
{
    if (x.rank() != 3 || x.extent(2) != plan_.weights.in_channels)
        throw DimensionError(name_ + ": input must be (W,H," + std::to_string(plan_.weights.in_channels) + ")",
                             x.shape(), Shape{0, 0, plan_.weights.in_channels});
    Tensor y = conv2d_naive(x, weights, conv_.stride, conv_.padding);
    if (bias_) add_bias(y, *bias_);
    return y;
}

std::vector<Tensor> EpitomeLayer::forward_train(const std::vector<Tensor>& xs, bool ema, Cache& cache)
{
    if (!learner_) throw StateError(name_ + ": training needs the index learner");
    if (frozen()) throw StateError(name_ + ": routing map is frozen");
    if (xs.empty()) throw ConfigError(name_ + ": empty batch");

    Tensor mean(xs.front().shape());
    for (const auto& x : xs) mean += x;
    mean *= 1.0 / static_cast<double>(xs.size());

    cache.inputs = xs;
    cache.ema = ema;
    cache.trace = learner_->forward(mean);
    cache.fresh = scale_indices(cache.trace.out, plan_, super_);
    if (!map_) map_.emplace(plan_, cache.fresh, momentum_);
    if (ema) {
        RoutingMap next = *map_;
        next.update(cache.fresh);
        cache.used = next.indices();
        map_ = std::move(next);
    } else {
        cache.used = cache.fresh;
        map_->update(cache.fresh);
    }
    cache.weights = expand_weights(epitome_, plan_, cache.used);

    std::vector<Tensor> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(convolve(x, cache.weights));
    return out;
}

std::vector<Tensor> EpitomeLayer::backward(const Cache& cache, const std::vector<Tensor>& d_out)
{
    if (d_out.size() != cache.inputs.size()) throw ConfigError(name_ + ": gradient batch size differs");
    const Shape wshape = plan_.weights.shape();
    Tensor dW(wshape);
    std::vector<Tensor> dx;
    dx.reserve(d_out.size());
    for (std::size_t i = 0; i < d_out.size(); ++i) {
        const Tensor& x = cache.inputs[i];
        dx.push_back(conv2d_backward_input(d_out[i], cache.weights, x.shape(), conv_.stride, conv_.padding));
        dW += conv2d_backward_weights(d_out[i], x, wshape, conv_.stride, conv_.padding);
        if (d_bias_) {
            const std::size_t c = d_bias_->size();
            for (std::size_t k = 0; k < d_out[i].size(); ++k) (*d_bias_)[k % c] += d_out[i][k];
        }
    }
    d_epitome_ += backward_epitome(dW, plan_, cache.used);
    d_indices_ = backward_indices(dW, epitome_, plan_, cache.used);

    // The stop-gradient on M leaves (1 - mu) of the gradient for the fresh part.
    const double share = cache.ema ? 1.0 - momentum_ : 1.0;
    const std::vector<double> scale = scale_factors(plan_, super_);
    std::vector<double> d_norm(d_indices_.size());
    for (std::size_t i = 0; i < d_norm.size(); ++i) d_norm[i] = share * d_indices_[i] * scale[i];
    IndexLearner::Grads g = learner_->backward(cache.trace, d_norm);
    for (std::size_t i = 0; i < d_learner_.size(); ++i) d_learner_[i] += g.params[i];

    g.input *= 1.0 / static_cast<double>(dx.size());
    for (auto& d : dx) d += g.input;
    return dx;
}

void EpitomeLayer::step(double lr)
{
    if (lr < 0.0 || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
    if (lr == 0.0) return;
    sgd_step(epitome_.values(), d_epitome_, lr);
    if (bias_) sgd_step(*bias_, *d_bias_, lr);
    if (learner_) {
        auto params = learner_->parameters();
        for (std::size_t i = 0; i < params.size(); ++i) sgd_step(*params[i], d_learner_[i], lr);
    }
}

const RoutingMap& EpitomeLayer::require_map() const
{
    if (!map_) throw StateError(name_ + ": routing map not initialized; run a training step first");
    return *map_;
}

Tensor EpitomeLayer::expanded_weights() const { return expand_weights(epitome_, plan_, require_map().indices()); }

Tensor EpitomeLayer::forward_eval(const Tensor& x) const { return convolve(x, expanded_weights()); }

InferResult EpitomeLayer::infer(const Tensor& x, const InferOptions& options) const
{
    if (x.rank() != 3) throw DimensionError(name_ + ": input must be a (W,H,C) map", x.shape(), Shape{0, 0, 0});
    InferResult r = nes::infer(from_feature_map(x, plan_.kind), epitome_, require_map(), plan_, conv_, options);
    r.output = to_feature_map(r.output, plan_.kind);
    if (bias_) add_bias(r.output, *bias_);
    r.report.layer = name_;
    return r;
}

void EpitomeLayer::freeze()
{
    if (!map_) throw StateError(name_ + ": nothing to freeze before the first training step");
    map_->freeze();
}

} // namespace nes
