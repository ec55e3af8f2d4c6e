#pragma once

#include "nes/epitome.hpp"
#include "nes/routing_map.hpp"
#include "nes/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace nes {

/// Input channels that meet the same epitome channel pre-summed:
/// F~(i,j,m) = sum over blocks r, offsets a of alpha * F(i,j,r*beta1+a) where the
/// channel start of r, shifted by a, lands on m with weight alpha.
/// F is (W, H, C_in); the result is (W, H, C^E_in). Requires a frozen map.
Tensor channel_wrap(const Tensor& features, const RoutingMap& map, const LayerPlan& plan);

/// P(i,j,p,q,n) = F~(i,j,:) . E(p,q,:,n), shape (W, H, W^E, H^E, C^E_out).
struct ProductMap {
    Tensor values;
};

ProductMap build_product_map(const Tensor& wrapped, const Epitome& e, MaddCounter* counter = nullptr);

/// Summed-area table along the joint diagonals of P:
/// I(i,j,p,q,n) = sum_{k,l >= 0} P(i-k, j-l, p-k, q-l, n).
struct IntegralMap {
    Tensor values;
};

IntegralMap build_integral_map(const ProductMap& p, MaddCounter* counter = nullptr);

/// sum_{a<w, b<h} P(t_w+a, t_h+b, p+a, q+b, n). Throws std::out_of_range when
/// the window leaves the map.
double retrieve(const IntegralMap& im, std::size_t t_w, std::size_t t_h, std::size_t p, std::size_t q,
                std::size_t n, std::size_t w, std::size_t h);

enum class InferStrategy { automatic, product_map, direct };

struct InferOptions {
    InferStrategy strategy = InferStrategy::automatic;
    /// Largest product map (in doubles) built before falling back to direct
    /// convolution of the wrapped features.
    std::size_t product_map_budget = std::size_t{1} << 24;
};

struct MaddReport {
    std::string layer;
    std::uint64_t naive_madd = 0;  // count_madd(naive)
    std::uint64_t reuse_madd = 0;  // count_madd(reuse)
    double ratio = 0.0;            // reduction ratio, naive / reuse with C^E_in in the first term
    double approx_ratio = 0.0;     // C_out C_in w h / (C^E_out C^E_in W^E H^E)
    std::uint64_t measured = 0;    // multiplies + additions executed
    std::uint64_t measured_multiplies = 0;
    std::uint64_t engine_bound = 0; // index-independent worst case of `measured`
    std::string strategy;
    std::size_t spatial_groups = 0;
    std::size_t copied_filter_blocks = 0;
};

nlohmann::json to_json(const MaddReport& r);
/// {"naive_madd", "reuse_madd", "ratio", "layers": [...]}
nlohmann::json madd_summary(const std::vector<MaddReport>& layers);

struct InferResult {
    Tensor output;
    MaddReport report;
};

/// Learner-free forward pass of one layer. `features` uses the layer's natural
/// input shape (see to_feature_map). Output equals
/// conv_reference(features, expand_weights(e, plan, map.indices()), ...).
InferResult infer(const Tensor& features, const Epitome& e, const RoutingMap& map, const LayerPlan& plan,
                  const ConvSpec& conv, const InferOptions& options = {});

enum class MaddMode { naive, reuse };

/// naive: (2 C_in w h - 1) W H C_out.
/// reuse: (2 C_in W^E H^E - 1) W H C^E_out + W H W^E H^E C^E_out
///        + 2 R_cin W H beta1 + 2 R_cout beta2, with (W, H) the output extents.
std::uint64_t count_madd(const LayerPlan& plan, std::size_t out_w, std::size_t out_h, MaddMode mode);

/// naive / reuse where the reuse product term uses C^E_in.
double madd_reduction_ratio(const LayerPlan& plan, std::size_t out_w, std::size_t out_h);
double approx_reduction_ratio(const LayerPlan& plan);

/// Upper bound on what infer() executes for this plan and geometry whatever
/// the index values are.
std::uint64_t engine_bound(const LayerPlan& plan, std::size_t in_w, std::size_t in_h, const ConvSpec& conv,
                           InferStrategy strategy);

/// Strategy infer() picks under `options`.
InferStrategy choose_strategy(const LayerPlan& plan, std::size_t in_w, std::size_t in_h,
                              const InferOptions& options);

} // namespace nes
