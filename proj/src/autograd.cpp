#include "nes/autograd.hpp"

#include "nes/detail/expansion.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nes {

namespace {

struct ConvGeometry {
    std::size_t W, H, C, kw, kh, cout, ow, oh;
};

ConvGeometry geometry(const Shape& input, const Shape& weights, const Tensor& d_out, std::size_t stride,
                      const Padding& pad)
{
    if (input.size() != 3 || weights.size() != 4 || weights[2] != input[2])
        throw DimensionError("conv backward shapes", input, weights);
    ConvGeometry g{input[0], input[1], input[2], weights[0], weights[1], weights[3], 0, 0};
    g.ow = conv_output_extent(g.W, pad.before_w, pad.after_w, g.kw, stride);
    g.oh = conv_output_extent(g.H, pad.before_h, pad.after_h, g.kh, stride);
    if (d_out.shape() != Shape{g.ow, g.oh, g.cout})
        throw DimensionError("conv backward upstream gradient", d_out.shape(), Shape{g.ow, g.oh, g.cout});
    return g;
}

} // namespace

Tensor conv2d_backward_input(const Tensor& d_out, const Tensor& weights, const Shape& input_shape,
                             std::size_t stride, const Padding& padding)
{
    const ConvGeometry g = geometry(input_shape, weights.shape(), d_out, stride, padding);
    Tensor dF(input_shape);
    for (std::size_t tw = 0; tw < g.ow; ++tw)
        for (std::size_t i = 0; i < g.kw; ++i) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(tw * stride + i) -
                                     static_cast<std::ptrdiff_t>(padding.before_w);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.W)) continue;
            for (std::size_t th = 0; th < g.oh; ++th)
                for (std::size_t j = 0; j < g.kh; ++j) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(th * stride + j) -
                                             static_cast<std::ptrdiff_t>(padding.before_h);
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    const double* go = d_out.data().data() + (tw * g.oh + th) * g.cout;
                    double* df = dF.data().data() + (static_cast<std::size_t>(x) * g.H + static_cast<std::size_t>(y)) * g.C;
                    const double* w = weights.data().data() + (i * g.kh + j) * g.C * g.cout;
                    for (std::size_t m = 0; m < g.C; ++m) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < g.cout; ++c) acc += go[c] * w[m * g.cout + c];
                        df[m] += acc;
                    }
                }
        }
    return dF;
}

Tensor conv2d_backward_weights(const Tensor& d_out, const Tensor& input, const Shape& weight_shape,
                               std::size_t stride, const Padding& padding)
{
    const ConvGeometry g = geometry(input.shape(), weight_shape, d_out, stride, padding);
    Tensor dW(weight_shape);
    for (std::size_t tw = 0; tw < g.ow; ++tw)
        for (std::size_t i = 0; i < g.kw; ++i) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(tw * stride + i) -
                                     static_cast<std::ptrdiff_t>(padding.before_w);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(g.W)) continue;
            for (std::size_t th = 0; th < g.oh; ++th)
                for (std::size_t j = 0; j < g.kh; ++j) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(th * stride + j) -
                                             static_cast<std::ptrdiff_t>(padding.before_h);
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.H)) continue;
                    const double* go = d_out.data().data() + (tw * g.oh + th) * g.cout;
                    const double* f = input.data().data() + (static_cast<std::size_t>(x) * g.H + static_cast<std::size_t>(y)) * g.C;
                    double* dw = dW.data().data() + (i * g.kh + j) * g.C * g.cout;
                    for (std::size_t m = 0; m < g.C; ++m)
                        for (std::size_t c = 0; c < g.cout; ++c) dw[m * g.cout + c] += f[m] * go[c];
                }
        }
    return dW;
}

// ---------------------------------------------------------------------------

namespace {

/// Calls fn(weight_flat, epitome_flat, coefficient) for every interpolation
/// term of every weight element.
template <class Fn>
void for_each_term(const Epitome& e, const LayerPlan& plan, const IndexSet& indices, Fn&& fn)
{
    const Dims4& d = plan.epitome;
    const Dims4& wd = plan.weights;
    const std::size_t H = wd.height, Cin = wd.in_channels, Cout = wd.out_channels;
    for (std::size_t ro = 0; ro < plan.r_out(); ++ro)
        for (std::size_t ri = 0; ri < plan.r_in(); ++ri) {
            const auto taps = detail::block_taps(e, plan, indices, ri, ro);
            const auto lx = detail::tap_list(taps.x), ly = detail::tap_list(taps.y);
            const auto lk = detail::tap_list(taps.k), lo = detail::tap_list(taps.o);
            const std::size_t m0 = ri * plan.beta_in, c0 = ro * plan.beta_out;
            const std::size_t mn = std::min(plan.beta_in, Cin - m0), cn = std::min(plan.beta_out, Cout - c0);
            for (std::size_t i = 0; i < wd.width; ++i)
                for (std::size_t j = 0; j < H; ++j)
                    for (std::size_t a = 0; a < mn; ++a)
                        for (std::size_t b = 0; b < cn; ++b) {
                            const std::size_t z = ((i * H + j) * Cin + m0 + a) * Cout + c0 + b;
                            for (std::size_t tx = 0; tx < lx.count; ++tx)
                                for (std::size_t ty = 0; ty < ly.count; ++ty)
                                    for (std::size_t tk = 0; tk < lk.count; ++tk)
                                        for (std::size_t to = 0; to < lo.count; ++to) {
                                            const std::size_t x = detail::wrap_index(lx.start[tx], i, d.width);
                                            const std::size_t y = detail::wrap_index(ly.start[ty], j, d.height);
                                            const std::size_t k = detail::wrap_index(lk.start[tk], a, d.in_channels);
                                            const std::size_t o = detail::wrap_index(lo.start[to], b, d.out_channels);
                                            const std::size_t n = ((x * d.height + y) * d.in_channels + k) *
                                                                      d.out_channels + o;
                                            fn(z, n, lx.weight[tx] * ly.weight[ty] * lk.weight[tk] * lo.weight[to]);
                                        }
                        }
        }
}

} // namespace

Tensor backward_epitome(const Tensor& upstream, const LayerPlan& plan, const IndexSet& indices)
{
    plan.validate();
    indices.check_against(plan);
    if (upstream.shape() != plan.weights.shape())
        throw DimensionError("upstream gradient must match the logical weight shape", upstream.shape(),
                             plan.weights.shape());
    const Epitome shape_only(plan.epitome);
    Tensor dE(plan.epitome.shape());
    auto out = dE.data();
    const auto U = upstream.data();
    for_each_term(shape_only, plan, indices, [&](std::size_t z, std::size_t n, double alpha) { out[n] += alpha * U[z]; });
    return dE;
}

std::vector<double> backward_indices(const Tensor& upstream, const Epitome& e, const LayerPlan& plan,
                                     const IndexSet& indices)
{
    plan.validate();
    indices.check_against(plan);
    if (upstream.shape() != plan.weights.shape())
        throw DimensionError("upstream gradient must match the logical weight shape", upstream.shape(),
                             plan.weights.shape());
    if (e.dims() != plan.epitome) throw DimensionError("epitome does not match plan", e.dims().shape(), plan.epitome.shape());

    const Dims4& d = plan.epitome;
    const Dims4& wd = plan.weights;
    const std::size_t H = wd.height, Cin = wd.in_channels, Cout = wd.out_channels;
    const auto E = e.values().data();
    const auto U = upstream.data();
    std::vector<double> grad(plan.routing_size(), 0.0);
    const std::size_t out_at = 3 * plan.r_in();

    // Derivative of a tap weight list w.r.t. its start: -1 on base, +1 on next.
    auto slope = [](const detail::TapList& l, std::size_t t) { return l.count == 2 ? (t == 0 ? -1.0 : 1.0) : 0.0; };

    for (std::size_t ro = 0; ro < plan.r_out(); ++ro)
        for (std::size_t ri = 0; ri < plan.r_in(); ++ri) {
            const auto taps = detail::block_taps(e, plan, indices, ri, ro);
            const auto lx = detail::tap_list(taps.x), ly = detail::tap_list(taps.y);
            const auto lk = detail::tap_list(taps.k), lo = detail::tap_list(taps.o);
            const std::size_t m0 = ri * plan.beta_in, c0 = ro * plan.beta_out;
            const std::size_t mn = std::min(plan.beta_in, Cin - m0), cn = std::min(plan.beta_out, Cout - c0);
            double gp = 0.0, gq = 0.0, gk = 0.0, go = 0.0;
            for (std::size_t i = 0; i < wd.width; ++i)
                for (std::size_t j = 0; j < H; ++j)
                    for (std::size_t a = 0; a < mn; ++a)
                        for (std::size_t b = 0; b < cn; ++b) {
                            const double u = U[((i * H + j) * Cin + m0 + a) * Cout + c0 + b];
                            if (u == 0.0) continue;
                            for (std::size_t tx = 0; tx < lx.count; ++tx)
                                for (std::size_t ty = 0; ty < ly.count; ++ty)
                                    for (std::size_t tk = 0; tk < lk.count; ++tk)
                                        for (std::size_t to = 0; to < lo.count; ++to) {
                                            const std::size_t x = detail::wrap_index(lx.start[tx], i, d.width);
                                            const std::size_t y = detail::wrap_index(ly.start[ty], j, d.height);
                                            const std::size_t k = detail::wrap_index(lk.start[tk], a, d.in_channels);
                                            const std::size_t o = detail::wrap_index(lo.start[to], b, d.out_channels);
                                            const double v = u * E[((x * d.height + y) * d.in_channels + k) *
                                                                       d.out_channels + o];
                                            const double wx = lx.weight[tx], wy = ly.weight[ty];
                                            const double wk = lk.weight[tk], wo = lo.weight[to];
                                            gp += slope(lx, tx) * wy * wk * wo * v;
                                            gq += wx * slope(ly, ty) * wk * wo * v;
                                            gk += wx * wy * slope(lk, tk) * wo * v;
                                            go += wx * wy * wk * slope(lo, to) * v;
                                        }
                        }
            const std::size_t spatial_block = plan.shared_spatial ? 0 : ri;
            if (plan.sample_spatial) {
                grad[3 * spatial_block] += gp;
                grad[3 * spatial_block + 1] += gq;
            }
            if (plan.sample_in) grad[3 * ri + 2] += gk;
            if (plan.sample_out) grad[out_at + ro] += go;
        }
    return grad;
}

void sgd_step(Tensor& params, const Tensor& grad, double lr)
{
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (params.shape() != grad.shape()) throw DimensionError("sgd step", params.shape(), grad.shape());
    auto p = params.data();
    const auto g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

// ---------------------------------------------------------------------------

bool GradCheckReport::passed() const
{
    return std::all_of(groups.begin(), groups.end(), [](const GradCheckEntry& e) { return e.passed; });
}

GradCheckReport grad_check(const std::function<double()>& loss, std::span<ParamGroup> groups, double eps)
{
    auto eval = [&] {
        const double v = loss();
        if (!std::isfinite(v)) throw std::runtime_error("non-finite loss during gradient check");
        return v;
    };
    eval();
    GradCheckReport report;
    for (ParamGroup& g : groups) {
        if (g.values.size() != g.analytic.size())
            throw DimensionError("gradient group '" + g.name + "'", Shape{g.values.size()}, Shape{g.analytic.size()});
        double max_err = 0.0, scale = 0.0;
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            const double saved = g.values[i];
            g.values[i] = saved + eps;
            const double up = eval();
            g.values[i] = saved - eps;
            const double down = eval();
            g.values[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            max_err = std::max(max_err, std::abs(numeric - g.analytic[i]));
            scale = std::max(scale, std::abs(numeric));
        }
        GradCheckEntry e;
        e.name = g.name;
        e.max_abs_error = max_err;
        e.max_rel_error = max_err / std::max(scale, 1e-12);
        e.tolerance = g.tolerance;
        e.passed = e.max_rel_error <= g.tolerance;
        report.groups.push_back(e);
    }
    return report;
}

} // namespace nes
