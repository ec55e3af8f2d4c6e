#include "nes/epitome.hpp"

#include "nes/detail/expansion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace nes {

std::size_t Dims4::operator[](std::size_t axis) const
{
    switch (axis) {
    case 0: return width;
    case 1: return height;
    case 2: return in_channels;
    case 3: return out_channels;
    default: throw std::out_of_range("Dims4 axis " + std::to_string(axis));
    }
}

Epitome::Epitome(Dims4 dims)
    : dims_(dims)
    , values_(dims.shape())
{
    if (dims.size() == 0) throw ConfigError("epitome extents must all be >= 1");
}

Epitome::Epitome(Tensor values)
    : values_(std::move(values))
{
    if (values_.rank() != 4) throw DimensionError("epitome must be 4-D", values_.shape(), Shape{0, 0, 0, 0});
    dims_ = {values_.extent(0), values_.extent(1), values_.extent(2), values_.extent(3)};
    if (dims_.size() == 0) throw ConfigError("epitome extents must all be >= 1");
}

const char* to_string(LayerKind kind)
{
    switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::fc: return "fc";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& name)
{
    if (name == "conv2d") return LayerKind::conv2d;
    if (name == "conv1d") return LayerKind::conv1d;
    if (name == "fc") return LayerKind::fc;
    throw ConfigError("unknown layer kind '" + name + "'");
}

void SubTensorSpec::validate(const Dims4& epitome) const
{
    for (std::size_t a = 0; a < 4; ++a) {
        if (!(start[a] >= 0.0) || start[a] >= static_cast<double>(epitome[a]))
            throw ConfigError("sub-tensor start " + std::to_string(start[a]) + " outside axis " +
                              std::to_string(a) + " of length " + std::to_string(epitome[a]));
        if (extent[a] == 0) throw ConfigError("sub-tensor extents must be positive");
    }
    if (extent[2] > epitome.in_channels) throw ConfigError("beta1 exceeds epitome input channels");
    if (extent[3] > epitome.out_channels) throw ConfigError("beta2 exceeds epitome output channels");
}

// ---------------------------------------------------------------------------

LayerPlan LayerPlan::make(LayerKind kind, Dims4 weights, Dims4 epitome)
{
    LayerPlan p;
    p.kind = kind;
    p.weights = weights;
    p.epitome = epitome;
    p.beta_in = epitome.in_channels;
    p.beta_out = epitome.out_channels;
    p.validate();
    return p;
}

std::size_t LayerPlan::r_in() const
{
    const std::size_t b = beta_in ? beta_in : epitome.in_channels;
    return (weights.in_channels + b - 1) / b;
}

std::size_t LayerPlan::r_out() const
{
    const std::size_t b = beta_out ? beta_out : epitome.out_channels;
    return (weights.out_channels + b - 1) / b;
}

void LayerPlan::validate() const
{
    if (weights.size() == 0) throw ConfigError("logical weight extents must all be >= 1");
    if (epitome.size() == 0) throw ConfigError("epitome extents must all be >= 1");
    if (beta_in == 0 || beta_in > epitome.in_channels)
        throw ConfigError("beta1 must be in [1, C^E_in], got " + std::to_string(beta_in));
    if (beta_out == 0 || beta_out > epitome.out_channels)
        throw ConfigError("beta2 must be in [1, C^E_out], got " + std::to_string(beta_out));
    switch (kind) {
    case LayerKind::conv2d: break;
    case LayerKind::conv1d:
        if (weights.height != 1 || epitome.height != 1)
            throw ConfigError("conv1d plans need unit height for weights and epitome");
        break;
    case LayerKind::fc:
        if (weights.width != 1 || weights.height != 1 || epitome.width != 1 || epitome.height != 1)
            throw ConfigError("fc plans need unit spatial extents");
        break;
    }
}

IndexSet IndexSet::zeros(const LayerPlan& plan)
{
    IndexSet s;
    s.in_blocks.assign(plan.r_in(), InBlockStart{});
    s.out_blocks.assign(plan.r_out(), 0.0);
    return s;
}

IndexSet IndexSet::from_flat(const LayerPlan& plan, std::span<const double> flat)
{
    if (flat.size() != plan.routing_size())
        throw ConfigError("index vector has " + std::to_string(flat.size()) + " entries, plan needs " +
                          std::to_string(plan.routing_size()));
    IndexSet s;
    const std::size_t rin = plan.r_in();
    s.in_blocks.resize(rin);
    for (std::size_t r = 0; r < rin; ++r) s.in_blocks[r] = {flat[3 * r], flat[3 * r + 1], flat[3 * r + 2]};
    s.out_blocks.assign(flat.begin() + static_cast<std::ptrdiff_t>(3 * rin), flat.end());
    return s;
}

std::vector<double> IndexSet::flat() const
{
    std::vector<double> v;
    v.reserve(count());
    for (const auto& b : in_blocks) {
        v.push_back(b.p);
        v.push_back(b.q);
        v.push_back(b.c_in);
    }
    v.insert(v.end(), out_blocks.begin(), out_blocks.end());
    return v;
}

void IndexSet::check_against(const LayerPlan& plan) const
{
    if (in_blocks.size() != plan.r_in() || out_blocks.size() != plan.r_out())
        throw ConfigError("index set has " + std::to_string(in_blocks.size()) + " input and " +
                          std::to_string(out_blocks.size()) + " filter blocks, plan needs " +
                          std::to_string(plan.r_in()) + " and " + std::to_string(plan.r_out()));
}

// ---------------------------------------------------------------------------

double interp_kernel(double a, double b) noexcept
{
    const double d = 1.0 - std::abs(a - b);
    return d > 0.0 ? d : 0.0;
}

AxisTap axis_tap(double start, std::size_t length)
{
    if (length == 0) throw ConfigError("axis length must be >= 1");
    if (!std::isfinite(start)) throw ConfigError("non-finite start index");
    const double fl = std::floor(start);
    const double frac = start - fl;
    const auto L = static_cast<long long>(length);
    long long b = static_cast<long long>(fl) % L;
    if (b < 0) b += L;
    AxisTap t;
    t.base = static_cast<std::size_t>(b);
    t.next = (t.base + 1) % length;
    t.w_base = 1.0 - frac;
    t.w_next = frac;
    return t;
}

namespace detail {

void require_in_range(const AxisTap& tap, std::size_t extent, std::size_t length, const char* axis)
{
    const std::size_t last = tap.base + (tap.fractional() ? 1 : 0) + extent - 1;
    if (last >= length)
        throw std::out_of_range(std::string("patch along ") + axis + " reaches index " + std::to_string(last) +
                                " of an axis with length " + std::to_string(length) + " and wrapping is off");
}

BlockTaps block_taps(const Epitome& e, const LayerPlan& plan, const IndexSet& indices, std::size_t r_in,
                     std::size_t r_out)
{
    const Dims4& d = e.dims();
    const InBlockStart s = effective_in_start(plan, indices, r_in);
    BlockTaps t{axis_tap(s.p, d.width), axis_tap(s.q, d.height), axis_tap(s.c_in, d.in_channels),
                axis_tap(effective_out_start(plan, indices, r_out), d.out_channels)};
    if (!plan.wrap) {
        require_in_range(t.x, plan.weights.width, d.width, "width");
        require_in_range(t.y, plan.weights.height, d.height, "height");
        require_in_range(t.k, plan.beta_in, d.in_channels, "input channels");
        require_in_range(t.o, plan.beta_out, d.out_channels, "filters");
    }
    return t;
}

} // namespace detail

InBlockStart effective_in_start(const LayerPlan& plan, const IndexSet& indices, std::size_t r)
{
    InBlockStart s = indices.in_blocks.at(r);
    if (plan.shared_spatial) {
        s.p = indices.in_blocks.at(0).p;
        s.q = indices.in_blocks.at(0).q;
    }
    if (!plan.sample_spatial) s.p = s.q = 0.0;
    if (!plan.sample_in) s.c_in = 0.0;
    return s;
}

double effective_out_start(const LayerPlan& plan, const IndexSet& indices, std::size_t r)
{
    return plan.sample_out ? indices.out_blocks.at(r) : 0.0;
}

// ---------------------------------------------------------------------------

namespace {

void check_wrap(const AxisTap& t, std::size_t extent, std::size_t length, bool wrap, const char* axis)
{
    if (!wrap) detail::require_in_range(t, extent, length, axis);
}

} // namespace

Tensor sample_spatial(const Epitome& e, double p, double q, std::size_t w, std::size_t h, bool wrap)
{
    const Dims4& d = e.dims();
    SubTensorSpec{{p, q, 0.0, 0.0}, {w, h, d.in_channels, d.out_channels}}.validate(d);
    const AxisTap tx = axis_tap(p, d.width), ty = axis_tap(q, d.height);
    check_wrap(tx, w, d.width, wrap, "width");
    check_wrap(ty, h, d.height, wrap, "height");
    const auto lx = detail::tap_list(tx), ly = detail::tap_list(ty);
    const std::size_t inner = d.in_channels * d.out_channels;
    Tensor out({w, h, d.in_channels, d.out_channels});
    const auto E = e.values().data();
    for (std::size_t i = 0; i < w; ++i)
        for (std::size_t j = 0; j < h; ++j) {
            double* dst = out.data().data() + (i * h + j) * inner;
            for (std::size_t a = 0; a < lx.count; ++a)
                for (std::size_t b = 0; b < ly.count; ++b) {
                    const double wt = lx.weight[a] * ly.weight[b];
                    const std::size_t x = detail::wrap_index(lx.start[a], i, d.width);
                    const std::size_t y = detail::wrap_index(ly.start[b], j, d.height);
                    const double* src = E.data() + (x * d.height + y) * inner;
                    for (std::size_t n = 0; n < inner; ++n) dst[n] += wt * src[n];
                }
        }
    return out;
}

Tensor sample_channel(const Epitome& e, double c_in, std::size_t beta1, bool wrap)
{
    const Dims4& d = e.dims();
    if (beta1 == 0 || beta1 > d.in_channels)
        throw ConfigError("beta1 = " + std::to_string(beta1) + " exceeds C^E_in = " + std::to_string(d.in_channels));
    SubTensorSpec{{0.0, 0.0, c_in, 0.0}, {d.width, d.height, beta1, d.out_channels}}.validate(d);
    const AxisTap tk = axis_tap(c_in, d.in_channels);
    check_wrap(tk, beta1, d.in_channels, wrap, "input channels");
    const auto lk = detail::tap_list(tk);
    Tensor out({d.width, d.height, beta1, d.out_channels});
    for (std::size_t s = 0; s < d.width * d.height; ++s)
        for (std::size_t a = 0; a < beta1; ++a)
            for (std::size_t t = 0; t < lk.count; ++t) {
                const std::size_t k = detail::wrap_index(lk.start[t], a, d.in_channels);
                for (std::size_t o = 0; o < d.out_channels; ++o)
                    out[(s * beta1 + a) * d.out_channels + o] +=
                        lk.weight[t] * e.values()[(s * d.in_channels + k) * d.out_channels + o];
            }
    return out;
}

Tensor sample_filter(const Epitome& e, double c_out, std::size_t beta2, bool wrap)
{
    const Dims4& d = e.dims();
    if (beta2 == 0 || beta2 > d.out_channels)
        throw ConfigError("beta2 = " + std::to_string(beta2) + " exceeds C^E_out = " +
                          std::to_string(d.out_channels));
    SubTensorSpec{{0.0, 0.0, 0.0, c_out}, {d.width, d.height, d.in_channels, beta2}}.validate(d);
    const AxisTap to = axis_tap(c_out, d.out_channels);
    check_wrap(to, beta2, d.out_channels, wrap, "filters");
    const auto lo = detail::tap_list(to);
    Tensor out({d.width, d.height, d.in_channels, beta2});
    for (std::size_t s = 0; s < d.width * d.height * d.in_channels; ++s)
        for (std::size_t b = 0; b < beta2; ++b)
            for (std::size_t t = 0; t < lo.count; ++t)
                out[s * beta2 + b] +=
                    lo.weight[t] * e.values()[s * d.out_channels + detail::wrap_index(lo.start[t], b, d.out_channels)];
    return out;
}

Tensor expand_weights(const Epitome& e, const LayerPlan& plan, const IndexSet& indices)
{
    plan.validate();
    if (e.dims() != plan.epitome)
        throw DimensionError("epitome does not match plan", e.dims().shape(), plan.epitome.shape());
    indices.check_against(plan);

    const Dims4& d = e.dims();
    const Dims4& wd = plan.weights;
    const std::size_t W = wd.width, H = wd.height, Cin = wd.in_channels, Cout = wd.out_channels;
    Tensor out(wd.shape());
    const auto E = e.values().data();
    auto T = out.data();

    for (std::size_t ro = 0; ro < plan.r_out(); ++ro)
        for (std::size_t ri = 0; ri < plan.r_in(); ++ri) {
            const detail::BlockTaps taps = detail::block_taps(e, plan, indices, ri, ro);
            const auto lx = detail::tap_list(taps.x), ly = detail::tap_list(taps.y);
            const auto lk = detail::tap_list(taps.k), lo = detail::tap_list(taps.o);
            const std::size_t m0 = ri * plan.beta_in, c0 = ro * plan.beta_out;
            const std::size_t mn = std::min(plan.beta_in, Cin - m0), cn = std::min(plan.beta_out, Cout - c0);
            for (std::size_t i = 0; i < W; ++i)
                for (std::size_t j = 0; j < H; ++j)
                    for (std::size_t a = 0; a < mn; ++a)
                        for (std::size_t b = 0; b < cn; ++b) {
                            double v = 0.0;
                            for (std::size_t tx = 0; tx < lx.count; ++tx) {
                                const std::size_t x = detail::wrap_index(lx.start[tx], i, d.width);
                                for (std::size_t ty = 0; ty < ly.count; ++ty) {
                                    const std::size_t y = detail::wrap_index(ly.start[ty], j, d.height);
                                    const double wxy = lx.weight[tx] * ly.weight[ty];
                                    for (std::size_t tk = 0; tk < lk.count; ++tk) {
                                        const std::size_t k = detail::wrap_index(lk.start[tk], a, d.in_channels);
                                        const std::size_t base = ((x * d.height + y) * d.in_channels + k) *
                                                                 d.out_channels;
                                        for (std::size_t to = 0; to < lo.count; ++to) {
                                            const std::size_t o =
                                                detail::wrap_index(lo.start[to], b, d.out_channels);
                                            v += wxy * lk.weight[tk] * lo.weight[to] * E[base + o];
                                        }
                                    }
                                }
                            }
                            T[((i * H + j) * Cin + m0 + a) * Cout + c0 + b] = v;
                        }
        }
    return out;
}

Tensor expand_fc(const Epitome& e, const LayerPlan& plan, const IndexSet& indices)
{
    if (plan.kind != LayerKind::fc) throw ConfigError("expand_fc needs an fc plan");
    return expand_weights(e, plan, indices).reshaped({plan.weights.in_channels, plan.weights.out_channels});
}

ConvSpec ConvSpec::same(const LayerPlan& plan)
{
    return {1, Padding::same(plan.weights.width, plan.weights.height)};
}

Tensor to_feature_map(const Tensor& x, LayerKind kind)
{
    switch (kind) {
    case LayerKind::conv2d:
        if (x.rank() != 3) throw DimensionError("conv2d layer input must be (W,H,C)", x.shape(), Shape{0, 0, 0});
        return x;
    case LayerKind::conv1d:
        if (x.rank() != 2) throw DimensionError("conv1d layer input must be (L,C)", x.shape(), Shape{0, 0});
        return x.reshaped({x.extent(0), 1, x.extent(1)});
    case LayerKind::fc:
        if (x.rank() != 1) throw DimensionError("fc layer input must be (N)", x.shape(), Shape{0});
        return x.reshaped({1, 1, x.extent(0)});
    }
    return x;
}

Tensor from_feature_map(const Tensor& g, LayerKind kind)
{
    switch (kind) {
    case LayerKind::conv2d: return g;
    case LayerKind::conv1d: return g.reshaped({g.extent(0), g.extent(2)});
    case LayerKind::fc: return g.reshaped({g.extent(2)});
    }
    return g;
}

Tensor conv_reference(const Tensor& x, const Tensor& weights, LayerKind kind, const ConvSpec& conv,
                      MaddCounter* counter)
{
    return from_feature_map(conv2d_naive(to_feature_map(x, kind), weights, conv.stride, conv.padding, counter), kind);
}

} // namespace nes
