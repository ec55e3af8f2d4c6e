#pragma once

#include "nes/epitome.hpp"
#include "nes/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace nes {

/// dLoss/dInput of conv2d_naive given dLoss/dOutput.
Tensor conv2d_backward_input(const Tensor& d_out, const Tensor& weights, const Shape& input_shape,
                             std::size_t stride, const Padding& padding);
/// dLoss/dWeights of conv2d_naive given dLoss/dOutput.
Tensor conv2d_backward_weights(const Tensor& d_out, const Tensor& input, const Shape& weight_shape,
                               std::size_t stride, const Padding& padding);

/// Transpose of expand_weights: every epitome element collects
/// sum_z alpha_z * upstream_z over the weight positions z it feeds.
Tensor backward_epitome(const Tensor& upstream, const LayerPlan& plan, const IndexSet& indices);

/// dLoss/dIndices (flat order of IndexSet). Through each interpolation tap
/// d/ds [(1 - f) A + f B] = B - A for a fractional start; integer starts sit on
/// a kink of G and get subgradient 0.
std::vector<double> backward_indices(const Tensor& upstream, const Epitome& e, const LayerPlan& plan,
                                     const IndexSet& indices);

/// E <- E - lr * dE.
void sgd_step(Tensor& params, const Tensor& grad, double lr);

struct GradBundle {
    Tensor epitome;
    std::vector<double> indices;
    std::vector<Tensor> learner;
    std::vector<Tensor> input;
};

/// One parameter group for a finite-difference check. `values` is perturbed
/// in place and restored.
struct ParamGroup {
    std::string name;
    std::span<double> values;
    std::span<const double> analytic;
    double tolerance = 1e-5;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0; // max|analytic - numeric| / max(max|numeric|, 1e-12)
    double max_abs_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> groups;
    bool passed() const;
};

/// Central differences with step eps for every element of every group.
/// Throws std::runtime_error when the loss is not finite.
GradCheckReport grad_check(const std::function<double()>& loss, std::span<ParamGroup> groups, double eps = 1e-5);

} // namespace nes
