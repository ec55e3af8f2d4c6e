#pragma once

#include "nes/autograd.hpp"
#include "nes/network.hpp"

#include <string>
#include <vector>

namespace nes {

struct GradCheckOptions {
    double epitome_tolerance = 1e-5; // epitome values and biases
    double learner_tolerance = 1e-4; // learner weights and inputs
    double eps = 1e-5;
    /// Scaled indices closer than this to an integer are resampled.
    double kink_margin = 1e-3;
    bool ema = false;
};

struct LayerCheck {
    std::string description;
    GradCheckReport report;
};

/// Draws a random epitome layer of `kind` (kernel up to 3, channels up to 5,
/// random block sizes, stride and padding), a batch of two inputs and a random
/// linear loss on the outputs, then compares every parameter group against
/// central differences through learner, scaling, expansion and convolution.
LayerCheck check_random_layer(Rng& rng, LayerKind kind, const GradCheckOptions& options = {});

/// Cross-entropy of `net` on one batch; every epitome, bias and learner
/// tensor is a group.
GradCheckReport check_network(const Network& net, const std::vector<Tensor>& xs, const std::vector<std::size_t>& ys,
                              const GradCheckOptions& options = {});

struct KinkDistance {
    double relu = 1.0;  // smallest |ReLU input|
    double index = 1.0; // smallest distance of a scaled index to an integer
};

/// Kink distances of one train-mode forward of `net` on `xs`.
KinkDistance kink_distance(const Network& net, const std::vector<Tensor>& xs, bool ema);

nlohmann::json to_json(const GradCheckReport& r);

} // namespace nes
