#pragma once

#include "nes/tensor.hpp"

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace nes {

/// Extents of a 4-D parameter tensor (w, h, C_in, C_out).
struct Dims4 {
    std::size_t width = 1, height = 1, in_channels = 1, out_channels = 1;

    std::size_t size() const noexcept { return width * height * in_channels * out_channels; }
    Shape shape() const { return {width, height, in_channels, out_channels}; }
    std::size_t operator[](std::size_t axis) const;
    bool operator==(const Dims4&) const = default;
};

/// The compact learnable store (W^E, H^E, C^E_in, C^E_out) of one layer.
class Epitome {
public:
    explicit Epitome(Dims4 dims);
    explicit Epitome(Tensor values);

    const Dims4& dims() const noexcept { return dims_; }
    const Tensor& values() const noexcept { return values_; }
    Tensor& values() noexcept { return values_; }
    std::size_t size() const noexcept { return values_.size(); }

private:
    Dims4 dims_;
    Tensor values_;
};

enum class LayerKind { conv2d, conv1d, fc };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

/// Fractional start plus fixed extent of one sub-tensor of the epitome.
struct SubTensorSpec {
    std::array<double, 4> start{};       // p, q, c_in, c_out
    std::array<std::size_t, 4> extent{}; // w, h, beta1, beta2

    void validate(const Dims4& epitome) const;
};

/// Per-layer declaration: logical weight shape, epitome shape and block sizes.
/// Input-channel blocks have beta_in channels, filter blocks beta_out channels;
/// the last block of each is truncated to the logical channel count.
struct LayerPlan {
    LayerKind kind = LayerKind::conv2d;
    Dims4 weights;
    Dims4 epitome;
    std::size_t beta_in = 0;  // defaults to epitome.in_channels
    std::size_t beta_out = 0; // defaults to epitome.out_channels

    bool sample_spatial = true;
    bool sample_in = true;
    bool sample_out = true;
    /// Every input-channel block uses block 0's (p, q) instead of its own.
    bool shared_spatial = false;
    /// Patch elements past an epitome edge wrap modulo the extent; otherwise
    /// such an overrun is an error.
    bool wrap = true;

    static LayerPlan make(LayerKind kind, Dims4 weights, Dims4 epitome);

    std::size_t r_in() const;
    std::size_t r_out() const;
    /// Stored numbers in the routing map: 3 * R_cin + R_cout.
    std::size_t routing_size() const { return 3 * r_in() + r_out(); }
    /// Throws ConfigError on inconsistent extents.
    void validate() const;
};

struct InBlockStart {
    double p = 0.0, q = 0.0, c_in = 0.0;
    bool operator==(const InBlockStart&) const = default;
};

/// Real-valued starts for every block of a layer: R_cin (p, q, c_in) triples
/// and R_cout c_out singletons. Flat order is p0 q0 c0 p1 q1 c1 ... o0 o1 ...
struct IndexSet {
    std::vector<InBlockStart> in_blocks;
    std::vector<double> out_blocks;

    static IndexSet zeros(const LayerPlan& plan);
    static IndexSet from_flat(const LayerPlan& plan, std::span<const double> flat);
    std::vector<double> flat() const;
    std::size_t count() const { return 3 * in_blocks.size() + out_blocks.size(); }
    void check_against(const LayerPlan& plan) const;
    bool operator==(const IndexSet&) const = default;
};

/// G(a, b) = max(0, 1 - |a - b|).
double interp_kernel(double a, double b) noexcept;

/// The two integer starts neighbouring a fractional start on an axis of the
/// given length, resolved circularly. w_base + w_next == 1.
struct AxisTap {
    std::size_t base = 0;
    std::size_t next = 0;
    double w_base = 1.0;
    double w_next = 0.0;

    bool fractional() const noexcept { return w_next != 0.0; }
};

AxisTap axis_tap(double start, std::size_t length);

/// Weighted sum of the epitome patches at the spatial starts neighbouring
/// (p, q); result is (w, h, C^E_in, C^E_out).
Tensor sample_spatial(const Epitome& e, double p, double q, std::size_t w, std::size_t h, bool wrap = true);
/// Interpolated block of beta1 input channels starting at c_in:
/// (W^E, H^E, beta1, C^E_out).
Tensor sample_channel(const Epitome& e, double c_in, std::size_t beta1, bool wrap = true);
/// Interpolated block of beta2 filters starting at c_out:
/// (W^E, H^E, C^E_in, beta2).
Tensor sample_filter(const Epitome& e, double c_out, std::size_t beta2, bool wrap = true);

/// Effective starts of input block r after sampling flags and spatial sharing.
InBlockStart effective_in_start(const LayerPlan& plan, const IndexSet& indices, std::size_t r);
double effective_out_start(const LayerPlan& plan, const IndexSet& indices, std::size_t r);

/// tau(E): the full (w, h, C_in, C_out) weight tensor. Filter blocks form the
/// outer loop and input-channel blocks the inner one; each block is
/// sample_filter . sample_channel . sample_spatial of the epitome.
Tensor expand_weights(const Epitome& e, const LayerPlan& plan, const IndexSet& indices);

/// Fully-connected view: (N_in, N_out) matrix with N_in = C_in, N_out = C_out.
Tensor expand_fc(const Epitome& e, const LayerPlan& plan, const IndexSet& indices);

/// Stride and zero padding of the convolution a plan's weights feed.
struct ConvSpec {
    std::size_t stride = 1;
    Padding padding;

    /// Stride 1 with output size equal to input size.
    static ConvSpec same(const LayerPlan& plan);
    bool operator==(const ConvSpec&) const = default;
};

/// Natural layer inputs are (W, H, C) for conv2d, (L, C) for conv1d and (N)
/// for fc; all are the same row-major data as a (W, H, C) map.
Tensor to_feature_map(const Tensor& x, LayerKind kind);
Tensor from_feature_map(const Tensor& g, LayerKind kind);

/// Reference path: expand_weights followed by conv2d_naive.
Tensor conv_reference(const Tensor& x, const Tensor& weights, LayerKind kind, const ConvSpec& conv,
                      MaddCounter* counter = nullptr);

} // namespace nes
