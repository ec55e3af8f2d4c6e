#pragma once

#include "nes/epitome.hpp"
#include "nes/fast_infer.hpp"
#include "nes/index_learner.hpp"
#include "nes/routing_map.hpp"

#include <optional>
#include <string>
#include <vector>

namespace nes {

/// Epitome-parameterized conv2d / conv1d / fc layer with its own learner and
/// routing map. All activations are (W, H, C) feature maps: conv1d inputs are
/// (L, 1, C) and fc inputs (1, 1, N).
class EpitomeLayer {
public:
    EpitomeLayer(std::string name, LayerPlan plan, ConvSpec conv, bool bias, SuperIndexConfig super,
                 double momentum, Rng& rng);
    /// Restores a trained layer; the learner is optional.
    EpitomeLayer(std::string name, LayerPlan plan, ConvSpec conv, Epitome epitome, std::optional<Tensor> bias,
                 SuperIndexConfig super, RoutingMap map, std::optional<IndexLearner> learner);

    /// State kept between forward_train and backward.
    struct Cache {
        std::vector<Tensor> inputs;
        IndexLearner::Trace trace;
        IndexSet fresh;
        IndexSet used;
        Tensor weights;
        bool ema = false;
    };

    /// Indices come from the learner on the batch-mean input. With `ema` the
    /// layer uses mu * M + (1 - mu) * fresh (M held constant) and the routing
    /// map becomes exactly those indices; otherwise the fresh indices are used
    /// and the map takes an EMA step toward them. The first call seeds the
    /// map with the first prediction.
    std::vector<Tensor> forward_train(const std::vector<Tensor>& xs, bool ema, Cache& cache);
    /// Accumulates parameter gradients and returns dLoss/dInput per sample.
    std::vector<Tensor> backward(const Cache& cache, const std::vector<Tensor>& d_out);
    void step(double lr);
    void zero_grad();

    /// Expansion with the routing map's indices, then naive convolution.
    Tensor forward_eval(const Tensor& x) const;
    /// Learner-free fast path; needs a frozen map.
    InferResult infer(const Tensor& x, const InferOptions& options = {}) const;

    void freeze();
    bool frozen() const { return map_ && map_->frozen(); }
    void drop_learner() { learner_.reset(); }

    const std::string& name() const noexcept { return name_; }
    const LayerPlan& plan() const noexcept { return plan_; }
    const ConvSpec& conv() const noexcept { return conv_; }
    const Epitome& epitome() const noexcept { return epitome_; }
    Epitome& epitome() noexcept { return epitome_; }
    const std::optional<Tensor>& bias() const noexcept { return bias_; }
    std::optional<Tensor>& bias() noexcept { return bias_; }
    const SuperIndexConfig& super_index() const noexcept { return super_; }
    double momentum() const noexcept { return momentum_; }
    const std::optional<RoutingMap>& routing_map() const noexcept { return map_; }
    const std::optional<IndexLearner>& learner() const noexcept { return learner_; }
    std::optional<IndexLearner>& learner() noexcept { return learner_; }

    const Tensor& epitome_grad() const noexcept { return d_epitome_; }
    const std::optional<Tensor>& bias_grad() const noexcept { return d_bias_; }
    const std::vector<Tensor>& learner_grads() const noexcept { return d_learner_; }
    /// dLoss/dIndices of the last backward, before the EMA factor.
    const std::vector<double>& index_grad() const noexcept { return d_indices_; }

    /// Full weight tensor from the routing map.
    Tensor expanded_weights() const;
    /// |E| + 3 R_cin + R_cout.
    std::size_t stored_numbers() const { return epitome_.size() + plan_.routing_size(); }

private:
    Tensor convolve(const Tensor& x, const Tensor& weights) const;
    const RoutingMap& require_map() const;

    std::string name_;
    LayerPlan plan_;
    ConvSpec conv_;
    Epitome epitome_;
    std::optional<Tensor> bias_;
    SuperIndexConfig super_;
    double momentum_;
    std::optional<RoutingMap> map_;
    std::optional<IndexLearner> learner_;

    Tensor d_epitome_;
    std::optional<Tensor> d_bias_;
    std::vector<Tensor> d_learner_;
    std::vector<double> d_indices_;
};

} // namespace nes
