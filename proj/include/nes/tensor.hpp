#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nes {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Two shapes (or extents) that had to agree did not.
class DimensionError : public std::invalid_argument {
public:
    DimensionError(const std::string& what, const Shape& lhs, const Shape& rhs);
    const Shape& lhs() const noexcept { return lhs_; }
    const Shape& rhs() const noexcept { return rhs_; }

private:
    Shape lhs_;
    Shape rhs_;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t offset);
    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Dense row-major array of doubles. Features are (W, H, C), weights are
/// (w, h, C_in, C_out); the last index varies fastest.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t extent(std::size_t axis) const;

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double operator[](std::size_t flat) const noexcept { return data_[flat]; }
    double& operator[](std::size_t flat) noexcept { return data_[flat]; }

    /// Checked multi-index access; out-of-range indices throw std::out_of_range.
    double at(std::initializer_list<std::size_t> index) const;
    double& at(std::initializer_list<std::size_t> index);
    std::size_t offset(std::span<const std::size_t> index) const;

    /// Same data viewed under another shape with the same element count.
    Tensor reshaped(Shape shape) const;

    void fill(double value);
    Tensor& operator+=(const Tensor& other);
    Tensor& operator*=(double scale);

    bool operator==(const Tensor& other) const = default;

private:
    std::size_t offset_checked(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor lhs, const Tensor& rhs);
Tensor operator*(double scale, Tensor t);

/// Largest |a_i - b_i|; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
/// max|a - b| / max(max|b|, floor).
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-300);
double max_abs(const Tensor& t);
double dot(const Tensor& a, const Tensor& b);

/// Counter-based generator: the i-th draw is the SplitMix64 finalizer applied
/// to seed + i * 0x9E3779B97F4A7C15. Bit-identical on every platform with
/// IEEE doubles; normal() uses Box-Muller on two consecutive draws.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : seed_(seed) {}

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept;
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
    double normal() noexcept;
    /// Uniform integer in [0, n); n > 0.
    std::size_t below(std::size_t n) noexcept;

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }
    /// Independent stream derived from this seed.
    Rng fork(std::uint64_t stream) const noexcept;

private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

Tensor random_uniform(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);
Tensor random_normal(const Shape& shape, Rng& rng, double stddev = 1.0);

/// Zero padding per side.
struct Padding {
    std::size_t before_w = 0, after_w = 0, before_h = 0, after_h = 0;

    static Padding none() { return {}; }
    /// Output spatial size equals input spatial size at stride 1.
    static Padding same(std::size_t kernel_w, std::size_t kernel_h);
    bool operator==(const Padding&) const = default;
};

/// Tallies multiply and add operations actually executed.
struct MaddCounter {
    std::uint64_t multiplies = 0;
    std::uint64_t additions = 0;
    std::uint64_t total() const noexcept { return multiplies + additions; }
};

std::size_t conv_output_extent(std::size_t input, std::size_t before, std::size_t after,
                               std::size_t kernel, std::size_t stride);

/// G[t_w,t_h,c] = sum_{i,j,m} F[t_w*s+i-pad_w, t_h*s+j-pad_h, m] * W[i,j,m,c] with
/// zeros outside F. Every kernel tap is evaluated, padding included, so the
/// counter sees (2*C_in*w*h - 1) operations per output element.
Tensor conv2d_naive(const Tensor& input, const Tensor& weights, std::size_t stride,
                    const Padding& padding, MaddCounter* counter = nullptr);

/// input (L, C_in), weights (k, C_in, C_out), valid padding unless given.
Tensor conv1d_naive(const Tensor& input, const Tensor& weights, std::size_t stride,
                    std::size_t pad_before = 0, std::size_t pad_after = 0);

/// a (N_in) times d (N_in, N_out).
Tensor matmul(const Tensor& a, const Tensor& d);

} // namespace nes
