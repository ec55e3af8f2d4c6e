#pragma once

#include "nes/epitome.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace nes {

enum class ArchLayerKind { conv2d, conv1d, depthwise, fc, pool };

const char* to_string(ArchLayerKind kind);
ArchLayerKind arch_layer_kind_from_string(const std::string& name);

/// Role inside an inverted residual block; drives plan_from_multiplier.
enum class BlockRole { none, expand, depthwise, project };

/// One layer of an architecture with its spatial input extent resolved.
/// Depthwise layers store (w, h, 1, C).
struct ArchLayer {
    std::string name;
    ArchLayerKind kind = ArchLayerKind::conv2d;
    Dims4 weights;
    std::size_t in_w = 1, in_h = 1;
    std::size_t stride = 1;
    bool bias = false;
    std::optional<Dims4> epitome;
    std::size_t beta_in = 0, beta_out = 0; // 0: epitome channel count
    BlockRole role = BlockRole::none;
    std::size_t expansion = 1;

    std::size_t out_w() const;
    std::size_t out_h() const;
    bool compressed() const { return epitome.has_value(); }
    /// The epitome plan of a compressed layer.
    LayerPlan plan() const;
    void validate() const;
};

struct ArchConfig {
    std::string name;
    std::size_t input_w = 1, input_h = 1, input_channels = 1;
    std::vector<ArchLayer> layers;
    /// Multipliers to report next to the baseline.
    std::vector<double> multipliers;
    /// Rounding and other adjustments made while building the config.
    std::vector<std::string> notes;
};

/// Parses the config tree (JSON with comments). Bottleneck entries expand
/// into expand / depthwise / project layers; spatial extents are propagated.
ArchConfig parse_arch_config(const nlohmann::json& tree);
ArchConfig load_arch_config(const std::filesystem::path& path);
/// Bundled MobileNetV2 for 224x224 ImageNet.
ArchConfig mobilenet_v2(double width = 1.0);

/// Weights (plus bias) of the uncompressed layer.
std::uint64_t baseline_params(const ArchLayer& layer);
/// |E| + 3 R_cin + R_cout (plus bias) when compressed, else baseline_params.
std::uint64_t stored_params(const ArchLayer& layer);

/// w h C_in C_out / (W^E H^E C^E_in C^E_out + 3 R_cin + R_cout).
double layer_param_ratio(const ArchLayer& layer);
double layer_param_ratio(const LayerPlan& plan);
/// Sum of baseline params over sum of stored params.
double network_ratio(const ArchConfig& cfg);

struct LayerCounts {
    std::string name;
    std::uint64_t params = 0;
    std::uint64_t baseline_params = 0;
    std::uint64_t mac = 0;       // one per multiply-accumulate
    std::uint64_t madd_eqn = 0;  // (2K - 1) per output; reuse count for compressed layers
    std::uint64_t madd_2k = 0;   // 2K per output
    double ratio = 1.0;          // layer_param_ratio, 1 when uncompressed
};

struct NetworkCounts {
    std::uint64_t params = 0;
    std::uint64_t baseline_params = 0;
    std::uint64_t mac = 0;
    std::uint64_t madd_eqn = 0;
    std::uint64_t madd_2k = 0;
    double ratio = 1.0;
    std::vector<LayerCounts> layers;
};

LayerCounts layer_counts(const ArchLayer& layer);
NetworkCounts network_counts(const ArchConfig& cfg);

/// Epitome (1, 1, k, c t k) on each expand conv and (1, 1, c t k, k') on each
/// project conv; depthwise layers stay uncompressed. Non-integer channel
/// counts are rounded to the nearest value >= 1 and noted.
ArchConfig plan_from_multiplier(const ArchConfig& cfg, double c);

nlohmann::json to_json(const NetworkCounts& counts);
/// Report rows: the baseline followed by each multiplier in cfg.
nlohmann::json cost_report(const ArchConfig& cfg);
std::string cost_report_csv(const ArchConfig& cfg);

} // namespace nes
