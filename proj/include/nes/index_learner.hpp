#pragma once

#include "nes/epitome.hpp"
#include "nes/tensor.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace nes {

/// Channel super-index: adjacent group_in (group_out) channels form one
/// selectable index. Zero means "use the plan's block size".
struct SuperIndexConfig {
    std::size_t group_in = 0;
    std::size_t group_out = 0;

    static SuperIndexConfig defaults(const LayerPlan& plan) { return {plan.beta_in, plan.beta_out}; }
    SuperIndexConfig resolved(const LayerPlan& plan) const;
};

/// Two stride-2 convolutions (tanh), global average pooling, and a linear
/// head squashed by a sigmoid, giving 3 * R_cin + R_cout values in (0, 1).
/// Kernels are 3x3 for conv2d layers, 3x1 for conv1d and 1x1 for fc, where
/// the input is the (1, 1, N_in) vector.
class IndexLearner {
public:
    static constexpr std::size_t kHidden = 4;

    /// All weights zero.
    IndexLearner(LayerKind kind, std::size_t in_channels, std::size_t outputs);
    static IndexLearner random(LayerKind kind, std::size_t in_channels, std::size_t outputs, Rng& rng,
                               double stddev = 0.1);

    struct Trace {
        Tensor input;
        Tensor a1, a2; // tanh activations after each convolution
        std::vector<double> pooled;
        std::vector<double> out;
    };

    struct Grads {
        std::vector<Tensor> params; // same order as parameters()
        Tensor input;
    };

    std::vector<double> predict(const Tensor& features) const;
    Trace forward(const Tensor& features) const;
    Grads backward(const Trace& trace, std::span<const double> d_out) const;

    std::size_t output_count() const noexcept { return outputs_; }
    std::size_t in_channels() const noexcept { return in_channels_; }
    LayerKind kind() const noexcept { return kind_; }
    std::size_t kernel_w() const noexcept { return kw_; }
    std::size_t kernel_h() const noexcept { return kh_; }

    /// conv1.w, conv1.b, conv2.w, conv2.b, head.w, head.b
    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    static const std::vector<std::string>& parameter_names();
    std::size_t parameter_count() const;

    bool operator==(const IndexLearner&) const = default;

private:
    Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b) const;
    Padding padding() const;

    LayerKind kind_;
    std::size_t in_channels_;
    std::size_t outputs_;
    std::size_t kw_, kh_;
    Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_, head_w_, head_b_;
};

/// Maps normalized outputs onto epitome coordinates: spatial entries scale by
/// (W^E, H^E); channel entries by the group count floor(C^E / l_g) and then
/// by l_g. Results are clamped just below the axis length.
IndexSet scale_indices(std::span<const double> normalized, const LayerPlan& plan, const SuperIndexConfig& cfg);

/// d(scaled entry) / d(normalized entry), flat order.
std::vector<double> scale_factors(const LayerPlan& plan, const SuperIndexConfig& cfg);

} // namespace nes
