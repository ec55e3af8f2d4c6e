#pragma once

#include "nes/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace nes {

/// Labeled samples, each a (W, H, C) feature map.
struct Dataset {
    std::vector<Tensor> samples;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;

    std::size_t size() const noexcept { return samples.size(); }
    Shape sample_shape() const;
    void validate() const;
};

enum class DatasetKind { blobs2d, waves1d };

DatasetKind dataset_kind_from_string(const std::string& name);

/// Deterministic two-class toy sets; label i % 2, so classes are balanced.
///
/// blobs2d, 8 x 8 x 3: a Gaussian bump of width 1.2 centred at a uniform point
/// of [1.5, 5.5]^2 with amplitude a ~ U(0.8, 1.2), times the colour
/// (1, 0.2, -1) for class 0 and (-1, 0.2, 1) for class 1, plus N(0, 0.2^2)
/// pixel noise.
///
/// waves1d, 32 x 1 x 1: a ~ U(0.7, 1.3) * sin(2 pi f x / 32 + phi) with f = 2
/// for class 0 and f = 5 for class 1, phi ~ U(0, 2 pi), plus N(0, 0.2^2).
Dataset generate_dataset(DatasetKind kind, std::uint64_t seed, std::size_t n);

/// One IDX array; `values` are the raw numbers, divided by 255 for u8 data.
struct IdxArray {
    std::uint8_t type = 0x08;
    Shape dims;
    std::vector<double> values;
};

IdxArray parse_idx(const std::vector<std::uint8_t>& bytes);
IdxArray read_idx(const std::filesystem::path& path);
/// Writes u8 data (values given as raw bytes 0..255).
std::vector<std::uint8_t> encode_idx_u8(const Shape& dims, const std::vector<std::uint8_t>& data);
void write_idx_u8(const std::filesystem::path& path, const Shape& dims, const std::vector<std::uint8_t>& data);

/// Images (N, A, B[, C]) become (A, B, C) maps with C = 1 for 3-D files;
/// labels are a 1-D u8 file of the same N.
Dataset ingest_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Training accuracy of a multinomial logistic regression on flattened
/// samples (full-batch gradient descent), used as a separability probe.
double linear_probe_accuracy(const Dataset& data, std::size_t steps = 300, double lr = 0.1);

} // namespace nes
