#pragma once

// Independent reference implementations used as test oracles, plus random
// instance generators shared by the unit tests and the acceptance binary.

#include "nes/epitome.hpp"
#include "nes/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

namespace nes::testing {

// G summed over every periodic image of x on an axis of length L.
inline double periodic_weight(double start, std::size_t x, std::size_t L)
{
    double w = 0.0;
    const long long lo = static_cast<long long>(std::floor(start / static_cast<double>(L))) - 2;
    const long long hi = static_cast<long long>(std::ceil(start / static_cast<double>(L))) + 2;
    for (long long m = lo; m <= hi; ++m)
        w += std::max(0.0, 1.0 - std::abs(start - (static_cast<double>(x) + static_cast<double>(m * static_cast<long long>(L)))));
    return w;
}

// Brute-force tau: every weight element is the full sum over all epitome
// elements weighted by the per-axis periodic kernels.
inline Tensor oracle_expand(const Epitome& e, const LayerPlan& plan, const IndexSet& idx)
{
    const Dims4& d = e.dims();
    const Dims4& w = plan.weights;
    Tensor out(w.shape());
    for (std::size_t c = 0; c < w.out_channels; ++c) {
        const std::size_t ro = c / plan.beta_out, b = c % plan.beta_out;
        const double so = plan.sample_out ? idx.out_blocks[ro] : 0.0;
        for (std::size_t m = 0; m < w.in_channels; ++m) {
            const std::size_t ri = m / plan.beta_in, a = m % plan.beta_in;
            const InBlockStart& own = idx.in_blocks[ri];
            const InBlockStart& sp = plan.shared_spatial ? idx.in_blocks[0] : own;
            const double p = plan.sample_spatial ? sp.p : 0.0;
            const double q = plan.sample_spatial ? sp.q : 0.0;
            const double k0 = plan.sample_in ? own.c_in : 0.0;
            for (std::size_t i = 0; i < w.width; ++i)
                for (std::size_t j = 0; j < w.height; ++j) {
                    double acc = 0.0;
                    for (std::size_t x = 0; x < d.width; ++x) {
                        const double gx = periodic_weight(p + static_cast<double>(i), x, d.width);
                        if (gx == 0.0) continue;
                        for (std::size_t y = 0; y < d.height; ++y) {
                            const double gy = periodic_weight(q + static_cast<double>(j), y, d.height);
                            if (gy == 0.0) continue;
                            for (std::size_t k = 0; k < d.in_channels; ++k) {
                                const double gk = periodic_weight(k0 + static_cast<double>(a), k, d.in_channels);
                                if (gk == 0.0) continue;
                                for (std::size_t o = 0; o < d.out_channels; ++o) {
                                    const double go = periodic_weight(so + static_cast<double>(b), o, d.out_channels);
                                    acc += gx * gy * gk * go * e.values().at({x, y, k, o});
                                }
                            }
                        }
                    }
                    out.at({i, j, m, c}) = acc;
                }
        }
    }
    return out;
}

// Output-major loop conv with explicit bounds checks for padding.
inline Tensor oracle_conv(const Tensor& x, const Tensor& wt, std::size_t stride, const Padding& pad)
{
    const long long W = static_cast<long long>(x.extent(0)), H = static_cast<long long>(x.extent(1));
    const std::size_t C = x.extent(2), kw = wt.extent(0), kh = wt.extent(1), N = wt.extent(3);
    const std::size_t ow = (x.extent(0) + pad.before_w + pad.after_w - kw) / stride + 1;
    const std::size_t oh = (x.extent(1) + pad.before_h + pad.after_h - kh) / stride + 1;
    Tensor out({ow, oh, N});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t u = 0; u < ow; ++u)
            for (std::size_t v = 0; v < oh; ++v) {
                double acc = 0.0;
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < kw; ++i)
                        for (std::size_t j = 0; j < kh; ++j) {
                            const long long px = static_cast<long long>(u * stride + i) - static_cast<long long>(pad.before_w);
                            const long long py = static_cast<long long>(v * stride + j) - static_cast<long long>(pad.before_h);
                            if (px < 0 || py < 0 || px >= W || py >= H) continue;
                            acc += x.at({static_cast<std::size_t>(px), static_cast<std::size_t>(py), c}) * wt.at({i, j, c, n});
                        }
                out.at({u, v, n}) = acc;
            }
    return out;
}

struct Instance {
    LayerPlan plan;
    Epitome epitome{Dims4{}};
    IndexSet indices;
    ConvSpec conv;
    Tensor input; // natural layer shape
};

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Start on an axis of length L: integer or fractional, optionally kept at
// least `margin` away from integers.
inline double random_start(Rng& rng, std::size_t L, bool fractional, double margin = 0.0)
{
    const double base = static_cast<double>(rng.below(L));
    if (!fractional || L == 1) return base;
    return base + margin + (1.0 - 2.0 * margin) * rng.uniform();
}

inline IndexSet random_indices(Rng& rng, const LayerPlan& plan, double frac_prob = 0.7, double margin = 0.0)
{
    IndexSet s = IndexSet::zeros(plan);
    const Dims4& d = plan.epitome;
    for (auto& b : s.in_blocks) {
        b.p = random_start(rng, d.width, rng.uniform() < frac_prob, margin);
        b.q = random_start(rng, d.height, rng.uniform() < frac_prob, margin);
        b.c_in = random_start(rng, d.in_channels, rng.uniform() < frac_prob, margin);
    }
    for (auto& o : s.out_blocks) o = random_start(rng, d.out_channels, rng.uniform() < frac_prob, margin);
    return s;
}

// Channel count with exactly r blocks of size beta (last block may be partial).
inline std::size_t channels_for(Rng& rng, std::size_t beta, std::size_t r)
{
    return beta * (r - 1) + pick(rng, 1, beta);
}

inline LayerPlan random_plan(Rng& rng, LayerKind kind, std::size_t max_dim = 8)
{
    Dims4 e;
    Dims4 w;
    e.in_channels = pick(rng, 1, max_dim);
    e.out_channels = pick(rng, 1, max_dim);
    if (kind != LayerKind::fc) {
        e.width = pick(rng, 1, max_dim);
        w.width = pick(rng, 1, 4);
    }
    if (kind == LayerKind::conv2d) {
        e.height = pick(rng, 1, max_dim);
        w.height = pick(rng, 1, 4);
    }
    const std::size_t beta_in = pick(rng, 1, e.in_channels);
    const std::size_t beta_out = pick(rng, 1, e.out_channels);
    w.in_channels = channels_for(rng, beta_in, pick(rng, 1, 4));
    w.out_channels = channels_for(rng, beta_out, pick(rng, 1, 4));
    LayerPlan plan = LayerPlan::make(kind, w, e);
    plan.beta_in = beta_in;
    plan.beta_out = beta_out;
    plan.shared_spatial = rng.uniform() < 0.25;
    plan.sample_spatial = rng.uniform() < 0.9;
    plan.sample_in = rng.uniform() < 0.9;
    plan.sample_out = rng.uniform() < 0.9;
    plan.validate();
    return plan;
}

inline Instance random_instance(Rng& rng, LayerKind kind, double frac_prob = 0.7)
{
    Instance in;
    in.plan = random_plan(rng, kind);
    const Dims4& w = in.plan.weights;
    in.epitome = Epitome(random_uniform(in.plan.epitome.shape(), rng));
    in.indices = random_indices(rng, in.plan, frac_prob);
    in.conv.stride = pick(rng, 1, 2);
    std::size_t W = 1, H = 1;
    if (kind != LayerKind::fc) {
        in.conv.padding.before_w = pick(rng, 0, w.width - 1);
        in.conv.padding.after_w = pick(rng, 0, w.width - 1);
        W = pick(rng, 1, 8);
        if (W + in.conv.padding.before_w + in.conv.padding.after_w < w.width) W = w.width;
    }
    if (kind == LayerKind::conv2d) {
        in.conv.padding.before_h = pick(rng, 0, w.height - 1);
        in.conv.padding.after_h = pick(rng, 0, w.height - 1);
        H = pick(rng, 1, 8);
        if (H + in.conv.padding.before_h + in.conv.padding.after_h < w.height) H = w.height;
    }
    const Tensor fmap = random_uniform({W, H, w.in_channels}, rng);
    in.input = from_feature_map(fmap, kind);
    return in;
}

inline LayerKind kind_for(std::size_t i)
{
    static const LayerKind kinds[] = {LayerKind::conv2d, LayerKind::conv1d, LayerKind::fc};
    return kinds[i % 3];
}

} // namespace nes::testing
