#pragma once

#include "nes/data.hpp"
#include "nes/layer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace nes {

enum class StageKind { epitome, relu, tanh, gap, flatten };

/// One layer of the experiment network as declared in the config. For
/// epitome stages the input channel count comes from the previous stage.
struct StageSpec {
    StageKind kind = StageKind::relu;
    std::string name;
    LayerKind layer = LayerKind::conv2d;
    std::size_t kernel_w = 1, kernel_h = 1;
    std::size_t out = 0;
    Dims4 epitome;
    std::size_t beta_in = 0, beta_out = 0;
    std::size_t stride = 1;
    /// "same", "valid", or explicit per-side values.
    std::optional<Padding> padding;
    bool bias = true;
    SuperIndexConfig super;
    bool shared_spatial = false;
};

struct DatasetSpec {
    std::string kind = "blobs2d"; // blobs2d | waves1d | idx
    std::size_t n = 128;
    std::optional<std::uint64_t> seed; // defaults to the experiment seed
    std::filesystem::path images, labels;
};

/// Everything a run depends on; the same config gives the same bytes out.
struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 7;
    DatasetSpec dataset;
    std::vector<StageSpec> stages;
    double lr = 0.05;
    double momentum = kDefaultMomentum;
    std::size_t steps = 500;
    std::size_t batch_size = 0; // 0: full batch
    /// Train with mu * M + (1 - mu) * fresh indices instead of fresh ones.
    bool ema_indices = false;
    /// Epitome patches wrap circularly; false turns overruns into errors.
    bool wrap = true;
    std::string loss = "cross_entropy";

    void validate() const;
};

ExperimentConfig parse_experiment(const nlohmann::json& tree, const std::filesystem::path& base = {});
ExperimentConfig load_experiment(const std::filesystem::path& path);
Dataset load_dataset(const ExperimentConfig& cfg);

/// A stack of stages ending in class logits (1, 1, K).
class Network {
public:
    struct Stage {
        StageKind kind = StageKind::relu;
        std::optional<EpitomeLayer> layer;
    };

    Network(Shape input, std::size_t classes, std::vector<Stage> stages);
    static Network build(const ExperimentConfig& cfg, const Shape& input, std::size_t classes, Rng& rng);

    struct Cache {
        std::vector<std::vector<Tensor>> activations; // input of each stage
        std::vector<EpitomeLayer::Cache> layers;
    };

    std::vector<Tensor> forward_train(const std::vector<Tensor>& xs, bool ema, Cache& cache);
    void backward(Cache& cache, const std::vector<Tensor>& d_logits);
    void zero_grad();
    void step(double lr);

    Tensor forward_eval(const Tensor& x) const;
    /// Fast-infer path; appends one report per epitome stage when given.
    Tensor infer(const Tensor& x, std::vector<MaddReport>* reports = nullptr,
                 const InferOptions& options = {}) const;

    void freeze();
    void drop_learners();

    const Shape& input_shape() const noexcept { return input_; }
    std::size_t classes() const noexcept { return classes_; }
    const std::vector<Stage>& stages() const noexcept { return stages_; }
    std::vector<Stage>& stages() noexcept { return stages_; }
    std::vector<const EpitomeLayer*> epitome_layers() const;
    const EpitomeLayer& layer(const std::string& name) const;

private:
    Shape input_;
    std::size_t classes_;
    std::vector<Stage> stages_;
};

/// Mean softmax cross-entropy over a batch of (1, 1, K) logits.
struct LossResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<Tensor> d_logits;
};
LossResult cross_entropy(const std::vector<Tensor>& logits, const std::vector<std::size_t>& labels);

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainResult {
    Network network;
    std::vector<StepMetrics> log;
    /// Train-mode forward over the whole training set after the last SGD step;
    /// the routing maps are frozen right after it.
    double final_loss = 0.0;
    double final_accuracy = 0.0;
    std::vector<Tensor> final_logits;
    /// max |frozen map - indices used by that forward| over all layers.
    double index_drift = 0.0;
    /// max |frozen-checkpoint logits - final_logits| over the training set.
    double output_gap = 0.0;
};

/// Thrown when the loss stops being finite.
class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

TrainResult train(const ExperimentConfig& cfg);
/// {"step","loss","accuracy"} per line.
std::string metrics_jsonl(const std::vector<StepMetrics>& log);
nlohmann::json summary_json(const ExperimentConfig& cfg, const TrainResult& r);

/// "NESE", u32 version, u32 input W H C, u32 classes, u32 stage count, then
/// per stage a u32 code (0 conv2d, 1 conv1d, 2 fc, 10 relu, 11 tanh, 12 gap,
/// 13 flatten). Epitome stages continue with: name (u32 length + bytes),
/// logical dims and epitome dims (4 x u32 each), beta1, beta2, u8 flags
/// (sample_spatial, sample_in, sample_out, shared_spatial, wrap from bit 0),
/// stride, 4 x u32 padding, super-index groups (2 x u32), u32 count and that
/// many f64 epitome values, the routing map record, u8 has-bias plus C_out
/// f64, u8 has-learner plus its six tensors as f64. All little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Network& net, bool with_learners = true);
Network decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Network& net, const std::filesystem::path& path, bool with_learners = true);
Network load_checkpoint(const std::filesystem::path& path);

/// Numbers actually read back for one epitome stage.
struct StoredCounts {
    std::string name;
    std::size_t epitome = 0;
    std::size_t routing = 0;
    std::size_t bias = 0;
    std::size_t learner = 0;
};
std::vector<StoredCounts> checkpoint_stored_counts(std::span<const std::uint8_t> bytes);

} // namespace nes
