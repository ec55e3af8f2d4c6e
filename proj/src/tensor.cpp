#include "nes/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <sstream>

namespace nes {

std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape)
{
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

DimensionError::DimensionError(const std::string& what, const Shape& lhs, const Shape& rhs)
    : std::invalid_argument(what + ": " + to_string(lhs) + " vs " + to_string(rhs))
    , lhs_(lhs)
    , rhs_(rhs)
{
}

ParseError::ParseError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")")
    , offset_(offset)
{
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape))
    , data_(element_count(shape_), fill)
{
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape))
    , data_(std::move(data))
{
    if (element_count(shape_) != data_.size())
        throw DimensionError("tensor data length does not match shape", shape_, Shape{data_.size()});
}

std::size_t Tensor::extent(std::size_t axis) const
{
    if (axis >= shape_.size())
        throw std::out_of_range("axis " + std::to_string(axis) + " beyond rank of " + to_string(shape_));
    return shape_[axis];
}

std::size_t Tensor::offset(std::span<const std::size_t> index) const
{
    if (index.size() != shape_.size())
        throw DimensionError("index rank differs from tensor rank", Shape(index.begin(), index.end()), shape_);
    std::size_t flat = 0;
    for (std::size_t d = 0; d < shape_.size(); ++d) {
        if (index[d] >= shape_[d])
            throw std::out_of_range("index " + to_string(Shape(index.begin(), index.end())) +
                                    " out of range for " + to_string(shape_));
        flat = flat * shape_[d] + index[d];
    }
    return flat;
}

std::size_t Tensor::offset_checked(std::initializer_list<std::size_t> index) const
{
    return offset(std::span<const std::size_t>(index.begin(), index.size()));
}

double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset_checked(index)]; }
double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset_checked(index)]; }

Tensor Tensor::reshaped(Shape shape) const
{
    if (element_count(shape) != data_.size())
        throw DimensionError("reshape must preserve element count", shape_, shape);
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Tensor& Tensor::operator+=(const Tensor& other)
{
    if (other.shape_ != shape_) throw DimensionError("elementwise add", shape_, other.shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double scale)
{
    for (auto& v : data_) v *= scale;
    return *this;
}

Tensor operator+(Tensor lhs, const Tensor& rhs)
{
    lhs += rhs;
    return lhs;
}

Tensor operator*(double scale, Tensor t)
{
    t *= scale;
    return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) throw DimensionError("comparison", a.shape(), b.shape());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_abs(const Tensor& t)
{
    double m = 0.0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor)
{
    return max_abs_diff(a, b) / std::max(max_abs(b), floor);
}

double dot(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) throw DimensionError("dot", a.shape(), b.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t splitmix_finalize(std::uint64_t z) noexcept
{
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t Rng::next_u64() noexcept
{
    ++counter_;
    return splitmix_finalize(seed_ + counter_ * kGolden);
}

double Rng::uniform() noexcept
{
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() noexcept
{
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) noexcept
{
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
}

Rng Rng::fork(std::uint64_t stream) const noexcept
{
    return Rng(splitmix_finalize(seed_ ^ splitmix_finalize(stream + kGolden)));
}

Tensor random_uniform(const Shape& shape, Rng& rng, double lo, double hi)
{
    Tensor t(shape);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

Tensor random_normal(const Shape& shape, Rng& rng, double stddev)
{
    Tensor t(shape);
    for (auto& v : t.data()) v = stddev * rng.normal();
    return t;
}

// ---------------------------------------------------------------------------

Padding Padding::same(std::size_t kernel_w, std::size_t kernel_h)
{
    Padding p;
    p.before_w = (kernel_w - 1) / 2;
    p.after_w = kernel_w - 1 - p.before_w;
    p.before_h = (kernel_h - 1) / 2;
    p.after_h = kernel_h - 1 - p.before_h;
    return p;
}

std::size_t conv_output_extent(std::size_t input, std::size_t before, std::size_t after,
                               std::size_t kernel, std::size_t stride)
{
    if (stride == 0) throw ConfigError("stride must be >= 1");
    const std::size_t padded = input + before + after;
    if (kernel == 0 || padded < kernel)
        throw DimensionError("kernel larger than padded input", Shape{kernel}, Shape{padded});
    return (padded - kernel) / stride + 1;
}

Tensor conv2d_naive(const Tensor& input, const Tensor& weights, std::size_t stride,
                    const Padding& padding, MaddCounter* counter)
{
    if (input.rank() != 3) throw DimensionError("conv2d input must be (W,H,C)", input.shape(), Shape{0, 0, 0});
    if (weights.rank() != 4)
        throw DimensionError("conv2d weights must be (w,h,C_in,C_out)", weights.shape(), Shape{0, 0, 0, 0});
    const std::size_t W = input.extent(0), H = input.extent(1), C = input.extent(2);
    const std::size_t kw = weights.extent(0), kh = weights.extent(1), cout = weights.extent(3);
    if (weights.extent(2) != C)
        throw DimensionError("conv2d input channels differ from weight input channels", input.shape(),
                             weights.shape());
    const std::size_t ow = conv_output_extent(W, padding.before_w, padding.after_w, kw, stride);
    const std::size_t oh = conv_output_extent(H, padding.before_h, padding.after_h, kh, stride);

    Tensor out({ow, oh, cout});
    const auto F = input.data();
    const auto K = weights.data();
    auto G = out.data();
    std::uint64_t muls = 0, adds = 0;
    for (std::size_t tw = 0; tw < ow; ++tw)
        for (std::size_t th = 0; th < oh; ++th)
            for (std::size_t c = 0; c < cout; ++c) {
                double acc = 0.0;
                bool first = true;
                for (std::size_t i = 0; i < kw; ++i) {
                    const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(tw * stride + i) -
                                             static_cast<std::ptrdiff_t>(padding.before_w);
                    for (std::size_t j = 0; j < kh; ++j) {
                        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(th * stride + j) -
                                                 static_cast<std::ptrdiff_t>(padding.before_h);
                        const bool inside = x >= 0 && y >= 0 && x < static_cast<std::ptrdiff_t>(W) &&
                                            y < static_cast<std::ptrdiff_t>(H);
                        for (std::size_t m = 0; m < C; ++m) {
                            const double f = inside ? F[(static_cast<std::size_t>(x) * H +
                                                         static_cast<std::size_t>(y)) * C + m]
                                                    : 0.0;
                            const double prod = f * K[((i * kh + j) * C + m) * cout + c];
                            ++muls;
                            if (first) {
                                acc = prod;
                                first = false;
                            } else {
                                acc += prod;
                                ++adds;
                            }
                        }
                    }
                }
                G[(tw * oh + th) * cout + c] = acc;
            }
    if (counter) {
        counter->multiplies += muls;
        counter->additions += adds;
    }
    return out;
}

Tensor conv1d_naive(const Tensor& input, const Tensor& weights, std::size_t stride,
                    std::size_t pad_before, std::size_t pad_after)
{
    // Rank-1 operands are single-channel signals and kernels.
    if (input.rank() == 1 && weights.rank() == 1) {
        Tensor out = conv1d_naive(input.reshaped({input.size(), 1}), weights.reshaped({weights.size(), 1, 1}),
                                  stride, pad_before, pad_after);
        return out.reshaped({out.size()});
    }
    if (input.rank() != 2) throw DimensionError("conv1d input must be (L,C)", input.shape(), Shape{0, 0});
    if (weights.rank() != 3)
        throw DimensionError("conv1d weights must be (k,C_in,C_out)", weights.shape(), Shape{0, 0, 0});
    const std::size_t L = input.extent(0), C = input.extent(1);
    const std::size_t k = weights.extent(0), cout = weights.extent(2);
    if (weights.extent(1) != C)
        throw DimensionError("conv1d input channels differ from weight input channels", input.shape(),
                             weights.shape());
    const std::size_t ol = conv_output_extent(L, pad_before, pad_after, k, stride);
    Tensor out({ol, cout});
    for (std::size_t t = 0; t < ol; ++t)
        for (std::size_t c = 0; c < cout; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) {
                const std::ptrdiff_t x =
                    static_cast<std::ptrdiff_t>(t * stride + i) - static_cast<std::ptrdiff_t>(pad_before);
                if (x < 0 || x >= static_cast<std::ptrdiff_t>(L)) continue;
                for (std::size_t m = 0; m < C; ++m)
                    acc += input[static_cast<std::size_t>(x) * C + m] * weights[(i * C + m) * cout + c];
            }
            out[t * cout + c] = acc;
        }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& d)
{
    if (a.rank() != 1 || d.rank() != 2 || d.extent(0) != a.extent(0))
        throw DimensionError("matmul expects (N_in) x (N_in,N_out)", a.shape(), d.shape());
    const std::size_t nin = d.extent(0), nout = d.extent(1);
    Tensor out({nout});
    for (std::size_t i = 0; i < nin; ++i)
        for (std::size_t o = 0; o < nout; ++o) out[o] += a[i] * d[i * nout + o];
    return out;
}

} // namespace nes
