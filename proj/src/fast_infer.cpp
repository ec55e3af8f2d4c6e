#include "nes/fast_infer.hpp"

#include "nes/detail/expansion.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>
#include <utility>

namespace nes {

namespace {

using detail::tap_list;
using detail::TapList;

void require_frozen(const RoutingMap& map)
{
    if (!map.frozen()) throw StateError("fast inference needs a frozen routing map");
}

void check_map(const RoutingMap& map, const LayerPlan& plan, const Dims4& epitome)
{
    plan.validate();
    if (!(map.epitome_dims() == plan.epitome) || !(epitome == plan.epitome))
        throw ConfigError("routing map, epitome and plan disagree on the epitome shape");
    map.indices().check_against(plan);
}

/// Adds the wrapped channels of the listed input blocks into `out`.
void wrap_blocks(const Tensor& f, const LayerPlan& plan, const IndexSet& indices, const std::vector<std::size_t>& blocks,
                 Tensor& out, MaddCounter* counter)
{
    const std::size_t cin = plan.weights.in_channels;
    const std::size_t ce = plan.epitome.in_channels;
    const std::size_t positions = f.extent(0) * f.extent(1);
    for (std::size_t r : blocks) {
        const AxisTap t = axis_tap(effective_in_start(plan, indices, r).c_in, ce);
        if (!plan.wrap) detail::require_in_range(t, plan.beta_in, ce, "input channels");
        const std::size_t first = r * plan.beta_in;
        const std::size_t n = std::min(plan.beta_in, cin - first);
        for (std::size_t s = 0; s < positions; ++s) {
            const double* src = f.data().data() + s * cin + first;
            double* dst = &out[s * ce];
            for (std::size_t a = 0; a < n; ++a) {
                const std::size_t k0 = (t.base + a) % ce;
                if (!t.fractional()) {
                    dst[k0] += src[a];
                } else {
                    const double hi = t.w_next * src[a];
                    dst[(t.next + a) % ce] += hi;
                    dst[k0] += src[a] - hi;
                }
            }
        }
        if (counter) {
            const std::uint64_t elems = positions * n;
            if (t.fractional()) {
                counter->multiplies += elems;
                counter->additions += 3 * elems;
            } else {
                counter->additions += elems;
            }
        }
    }
}

std::size_t integral_offset(const Shape& s, std::size_t i, std::size_t j, std::size_t p, std::size_t q)
{
    return (((i * s[1] + j) * s[2] + p) * s[3] + q) * s[4];
}

/// S(i,j,p,q,n) with any coordinate equal to -1 read as zero; arguments are
/// one past the wanted coordinate.
double corner(const Tensor& im, std::size_t i1, std::size_t j1, std::size_t p1, std::size_t q1, std::size_t n)
{
    if (i1 == 0 || j1 == 0 || p1 == 0 || q1 == 0) return 0.0;
    return im[integral_offset(im.shape(), i1 - 1, j1 - 1, p1 - 1, q1 - 1) + n];
}

struct Segment {
    std::size_t offset; // first patch offset in the segment
    std::size_t length;
    std::size_t start;  // epitome coordinate of that offset
};

/// Splits a patch of `extent` starting at `start` where it wraps the axis.
std::vector<Segment> segments(std::size_t start, std::size_t extent, std::size_t length)
{
    std::vector<Segment> out;
    std::size_t i = 0;
    while (i < extent) {
        const std::size_t s = (start + i) % length;
        const std::size_t len = std::min(extent - i, length - s);
        out.push_back({i, len, s});
        i += len;
    }
    return out;
}

/// Clips a segment to patch offsets whose input coordinate lies in [0, extent).
bool clip(const Segment& seg, long long origin, std::size_t extent, Segment& out, std::size_t& input_start)
{
    const long long lo = std::max<long long>(static_cast<long long>(seg.offset), -origin);
    const long long hi = std::min<long long>(static_cast<long long>(seg.offset + seg.length),
                                             static_cast<long long>(extent) - origin);
    if (lo >= hi) return false;
    out.offset = static_cast<std::size_t>(lo);
    out.length = static_cast<std::size_t>(hi - lo);
    out.start = seg.start + (out.offset - seg.offset);
    input_start = static_cast<std::size_t>(origin + lo);
    return true;
}

struct SpatialGroup {
    double p = 0.0, q = 0.0;
    std::vector<std::size_t> blocks;
};

std::vector<SpatialGroup> spatial_groups(const LayerPlan& plan, const IndexSet& indices)
{
    std::vector<SpatialGroup> groups;
    for (std::size_t r = 0; r < plan.r_in(); ++r) {
        const InBlockStart s = effective_in_start(plan, indices, r);
        auto it = std::find_if(groups.begin(), groups.end(),
                               [&](const SpatialGroup& g) { return g.p == s.p && g.q == s.q; });
        if (it == groups.end()) groups.push_back({s.p, s.q, {r}});
        else it->blocks.push_back(r);
    }
    return groups;
}

std::size_t max_groups(const LayerPlan& plan)
{
    return (plan.shared_spatial || !plan.sample_spatial) ? 1 : plan.r_in();
}

/// Epitome-channel output G~(t, n) of one spatial group through the integral map.
void accumulate_lookup(const IntegralMap& im, const SpatialGroup& g, const LayerPlan& plan, const ConvSpec& conv,
                       std::size_t out_w, std::size_t out_h, Tensor& gepi, MaddCounter* counter)
{
    const Dims4& d = plan.epitome;
    const std::size_t in_w = im.values.extent(0), in_h = im.values.extent(1);
    const std::size_t w = plan.weights.width, h = plan.weights.height;
    const AxisTap tx = axis_tap(g.p, d.width), ty = axis_tap(g.q, d.height);
    if (!plan.wrap) {
        detail::require_in_range(tx, w, d.width, "width");
        detail::require_in_range(ty, h, d.height, "height");
    }
    const TapList lx = tap_list(tx), ly = tap_list(ty);
    std::array<std::vector<Segment>, 2> sx, sy;
    for (std::size_t a = 0; a < lx.count; ++a) sx[a] = segments(lx.start[a], w, d.width);
    for (std::size_t b = 0; b < ly.count; ++b) sy[b] = segments(ly.start[b], h, d.height);

    const std::size_t ceo = d.out_channels;
    const Tensor& I = im.values;
    std::uint64_t mults = 0, adds = 0;
    for (std::size_t ow = 0; ow < out_w; ++ow) {
        const long long ox = static_cast<long long>(ow * conv.stride) - static_cast<long long>(conv.padding.before_w);
        for (std::size_t oh = 0; oh < out_h; ++oh) {
            const long long oy =
                static_cast<long long>(oh * conv.stride) - static_cast<long long>(conv.padding.before_h);
            double* dst = &gepi[(ow * out_h + oh) * ceo];
            for (std::size_t n = 0; n < ceo; ++n) {
                double acc = 0.0;
                bool first_term = true;
                for (std::size_t a = 0; a < lx.count; ++a)
                    for (std::size_t b = 0; b < ly.count; ++b) {
                        double window = 0.0;
                        bool first_rect = true;
                        for (const Segment& segx : sx[a]) {
                            Segment cx;
                            std::size_t ix = 0;
                            if (!clip(segx, ox, in_w, cx, ix)) continue;
                            for (const Segment& segy : sy[b]) {
                                Segment cy;
                                std::size_t iy = 0;
                                if (!clip(segy, oy, in_h, cy, iy)) continue;
                                const std::size_t i1 = ix + cx.length, j1 = iy + cy.length;
                                const std::size_t p1 = cx.start + cx.length, q1 = cy.start + cy.length;
                                double rect = corner(I, i1, j1, p1, q1, n);
                                if (ix > 0 && cx.start > 0) {
                                    rect -= corner(I, ix, j1, cx.start, q1, n);
                                    ++adds;
                                }
                                if (iy > 0 && cy.start > 0) {
                                    rect -= corner(I, i1, iy, p1, cy.start, n);
                                    ++adds;
                                }
                                if (ix > 0 && cx.start > 0 && iy > 0 && cy.start > 0) {
                                    rect += corner(I, ix, iy, cx.start, cy.start, n);
                                    ++adds;
                                }
                                if (first_rect) {
                                    window = rect;
                                    first_rect = false;
                                } else {
                                    window += rect;
                                    ++adds;
                                }
                            }
                        }
                        if (first_rect) continue;
                        const double wgt = lx.weight[a] * ly.weight[b];
                        if (wgt != 1.0) {
                            window *= wgt;
                            ++mults;
                        }
                        if (first_term) {
                            acc = window;
                            first_term = false;
                        } else {
                            acc += window;
                            ++adds;
                        }
                    }
                dst[n] += acc;
            }
        }
    }
    if (counter) {
        counter->multiplies += mults;
        counter->additions += adds;
    }
}

/// Direct path: convolve the wrapped features with the spatially sampled epitome.
Tensor direct_group(const Tensor& wrapped, const Epitome& e, const SpatialGroup& g, const LayerPlan& plan,
                    const ConvSpec& conv, MaddCounter* counter)
{
    const Dims4& d = plan.epitome;
    const AxisTap tx = axis_tap(g.p, d.width), ty = axis_tap(g.q, d.height);
    if (!plan.wrap) {
        detail::require_in_range(tx, plan.weights.width, d.width, "width");
        detail::require_in_range(ty, plan.weights.height, d.height, "height");
    }
    const Tensor theta = sample_spatial(e, g.p, g.q, plan.weights.width, plan.weights.height, plan.wrap);
    if (counter) {
        const std::uint64_t taps = (tx.fractional() ? 2 : 1) * (ty.fractional() ? 2 : 1);
        if (taps > 1) {
            counter->multiplies += taps * theta.size();
            counter->additions += (taps - 1) * theta.size();
        }
    }
    return conv2d_naive(wrapped, theta, conv.stride, conv.padding, counter);
}

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

} // namespace

Tensor channel_wrap(const Tensor& features, const RoutingMap& map, const LayerPlan& plan)
{
    require_frozen(map);
    check_map(map, plan, plan.epitome);
    if (features.rank() != 3 || features.extent(2) != plan.weights.in_channels)
        throw DimensionError("channel_wrap input must be (W,H,C_in)", features.shape(),
                             Shape{0, 0, plan.weights.in_channels});
    Tensor out({features.extent(0), features.extent(1), plan.epitome.in_channels});
    std::vector<std::size_t> all(plan.r_in());
    for (std::size_t r = 0; r < all.size(); ++r) all[r] = r;
    wrap_blocks(features, plan, map.indices(), all, out, nullptr);
    return out;
}

ProductMap build_product_map(const Tensor& wrapped, const Epitome& e, MaddCounter* counter)
{
    const Dims4& d = e.dims();
    if (wrapped.rank() != 3 || wrapped.extent(2) != d.in_channels)
        throw DimensionError("product map needs (W,H,C^E_in) features", wrapped.shape(),
                             Shape{0, 0, d.in_channels});
    const std::size_t W = wrapped.extent(0), H = wrapped.extent(1), K = d.in_channels, N = d.out_channels;
    ProductMap pm{Tensor({W, H, d.width, d.height, N})};
    const Tensor& E = e.values();
    double* out = pm.values.data().data();
    for (std::size_t s = 0; s < W * H; ++s) {
        const double* f = wrapped.data().data() + s * K;
        for (std::size_t pq = 0; pq < d.width * d.height; ++pq) {
            const double* ep = E.data().data() + pq * K * N;
            for (std::size_t n = 0; n < N; ++n) {
                double acc = f[0] * ep[n];
                for (std::size_t k = 1; k < K; ++k) acc += f[k] * ep[k * N + n];
                *out++ = acc;
            }
        }
    }
    if (counter) {
        const std::uint64_t entries = pm.values.size();
        counter->multiplies += entries * K;
        counter->additions += entries * (K - 1);
    }
    return pm;
}

IntegralMap build_integral_map(const ProductMap& p, MaddCounter* counter)
{
    if (p.values.rank() != 5) throw DimensionError("product map must be 5-D", p.values.shape(), Shape{0, 0, 0, 0, 0});
    IntegralMap im{p.values};
    Tensor& I = im.values;
    const Shape& s = I.shape();
    std::uint64_t adds = 0;
    for (std::size_t i = 0; i < s[0]; ++i)
        for (std::size_t j = 0; j < s[1]; ++j)
            for (std::size_t a = 0; a < s[2]; ++a)
                for (std::size_t b = 0; b < s[3]; ++b) {
                    const bool di = i > 0 && a > 0;
                    const bool dj = j > 0 && b > 0;
                    double* dst = &I[integral_offset(s, i, j, a, b)];
                    for (std::size_t n = 0; n < s[4]; ++n) {
                        if (di) dst[n] += I[integral_offset(s, i - 1, j, a - 1, b) + n];
                        if (dj) dst[n] += I[integral_offset(s, i, j - 1, a, b - 1) + n];
                        if (di && dj) dst[n] -= I[integral_offset(s, i - 1, j - 1, a - 1, b - 1) + n];
                    }
                    adds += s[4] * ((di ? 1 : 0) + (dj ? 1 : 0) + (di && dj ? 1 : 0));
                }
    if (counter) counter->additions += adds;
    return im;
}

double retrieve(const IntegralMap& im, std::size_t t_w, std::size_t t_h, std::size_t p, std::size_t q,
                std::size_t n, std::size_t w, std::size_t h)
{
    const Shape& s = im.values.shape();
    if (s.size() != 5) throw DimensionError("integral map must be 5-D", s, Shape{0, 0, 0, 0, 0});
    if (w == 0 || h == 0 || t_w + w > s[0] || t_h + h > s[1] || p + w > s[2] || q + h > s[3] || n >= s[4])
        throw std::out_of_range("window (" + std::to_string(t_w) + "," + std::to_string(t_h) + "," +
                                std::to_string(p) + "," + std::to_string(q) + "," + std::to_string(n) + ") of " +
                                std::to_string(w) + "x" + std::to_string(h) + " leaves integral map " +
                                to_string(s));
    const Tensor& I = im.values;
    return corner(I, t_w + w, t_h + h, p + w, q + h, n) - corner(I, t_w, t_h + h, p, q + h, n) -
           corner(I, t_w + w, t_h, p + w, q, n) + corner(I, t_w, t_h, p, q, n);
}

InferStrategy choose_strategy(const LayerPlan& plan, std::size_t in_w, std::size_t in_h,
                              const InferOptions& options)
{
    if (options.strategy != InferStrategy::automatic) return options.strategy;
    const Dims4& d = plan.epitome;
    const std::size_t entries = in_w * in_h * d.width * d.height * d.out_channels;
    return entries <= options.product_map_budget ? InferStrategy::product_map : InferStrategy::direct;
}

InferResult infer(const Tensor& features, const Epitome& e, const RoutingMap& map, const LayerPlan& plan,
                  const ConvSpec& conv, const InferOptions& options)
{
    require_frozen(map);
    check_map(map, plan, e.dims());
    const Tensor f = to_feature_map(features, plan.kind);
    if (f.extent(2) != plan.weights.in_channels)
        throw DimensionError("input channels differ from the plan", f.shape(), Shape{0, 0, plan.weights.in_channels});
    if (conv.stride == 0) throw ConfigError("stride must be >= 1");

    const Dims4& d = plan.epitome;
    const std::size_t in_w = f.extent(0), in_h = f.extent(1);
    const std::size_t out_w =
        conv_output_extent(in_w, conv.padding.before_w, conv.padding.after_w, plan.weights.width, conv.stride);
    const std::size_t out_h =
        conv_output_extent(in_h, conv.padding.before_h, conv.padding.after_h, plan.weights.height, conv.stride);
    const InferStrategy strategy = choose_strategy(plan, in_w, in_h, options);
    const IndexSet& idx = map.indices();

    MaddCounter counter;
    const auto groups = spatial_groups(plan, idx);
    Tensor gepi({out_w, out_h, d.out_channels});
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        Tensor wrapped({in_w, in_h, d.in_channels});
        wrap_blocks(f, plan, idx, groups[gi].blocks, wrapped, &counter);
        if (strategy == InferStrategy::product_map) {
            if (gi > 0) {
                // accumulate_lookup adds into gepi; count the merge separately
                counter.additions += out_w * out_h * d.out_channels;
            }
            const IntegralMap im = build_integral_map(build_product_map(wrapped, e, &counter), &counter);
            accumulate_lookup(im, groups[gi], plan, conv, out_w, out_h, gepi, &counter);
        } else {
            const Tensor part = direct_group(wrapped, e, groups[gi], plan, conv, &counter);
            if (gi == 0) {
                gepi = part;
            } else {
                gepi += part;
                counter.additions += part.size();
            }
        }
    }

    // Filter stage: each output block is an interpolated slice of gepi; blocks
    // whose start was already seen copy the earlier block.
    const std::size_t cout = plan.weights.out_channels;
    const std::size_t ceo = d.out_channels;
    const std::size_t positions = out_w * out_h;
    Tensor out({out_w, out_h, cout});
    std::map<double, std::size_t> seen;
    std::size_t copied = 0;
    for (std::size_t r = 0; r < plan.r_out(); ++r) {
        const double start = effective_out_start(plan, idx, r);
        const std::size_t first = r * plan.beta_out;
        const std::size_t n = std::min(plan.beta_out, cout - first);
        if (auto it = seen.find(start); it != seen.end()) {
            const std::size_t src = it->second * plan.beta_out;
            for (std::size_t s = 0; s < positions; ++s)
                for (std::size_t b = 0; b < n; ++b) out[s * cout + first + b] = out[s * cout + src + b];
            ++copied;
            continue;
        }
        seen.emplace(start, r);
        const AxisTap t = axis_tap(start, ceo);
        if (!plan.wrap) detail::require_in_range(t, plan.beta_out, ceo, "filters");
        for (std::size_t s = 0; s < positions; ++s)
            for (std::size_t b = 0; b < n; ++b) {
                const double lo = gepi[s * ceo + (t.base + b) % ceo];
                out[s * cout + first + b] =
                    t.fractional() ? t.w_base * lo + t.w_next * gepi[s * ceo + (t.next + b) % ceo] : lo;
            }
        if (t.fractional()) {
            counter.multiplies += 2 * positions * n;
            counter.additions += positions * n;
        }
    }

    InferResult res;
    res.output = from_feature_map(out, plan.kind);
    MaddReport& rep = res.report;
    rep.naive_madd = count_madd(plan, out_w, out_h, MaddMode::naive);
    rep.reuse_madd = count_madd(plan, out_w, out_h, MaddMode::reuse);
    rep.ratio = madd_reduction_ratio(plan, out_w, out_h);
    rep.approx_ratio = approx_reduction_ratio(plan);
    rep.measured = counter.total();
    rep.measured_multiplies = counter.multiplies;
    rep.engine_bound = engine_bound(plan, in_w, in_h, conv, strategy);
    rep.strategy = strategy == InferStrategy::product_map ? "product_map" : "direct";
    rep.spatial_groups = groups.size();
    rep.copied_filter_blocks = copied;
    return res;
}

std::uint64_t count_madd(const LayerPlan& plan, std::size_t out_w, std::size_t out_h, MaddMode mode)
{
    const Dims4& w = plan.weights;
    const Dims4& d = plan.epitome;
    const std::uint64_t HW = static_cast<std::uint64_t>(out_w) * out_h;
    if (mode == MaddMode::naive) return (2 * w.in_channels * w.width * w.height - 1) * HW * w.out_channels;
    return (2 * w.in_channels * d.width * d.height - 1) * HW * d.out_channels +
           HW * d.width * d.height * d.out_channels + 2 * plan.r_in() * HW * plan.beta_in +
           2 * plan.r_out() * plan.beta_out;
}

double madd_reduction_ratio(const LayerPlan& plan, std::size_t out_w, std::size_t out_h)
{
    const Dims4& w = plan.weights;
    const Dims4& d = plan.epitome;
    const double HW = static_cast<double>(out_w) * static_cast<double>(out_h);
    const double num = static_cast<double>(w.out_channels) * HW *
                       (2.0 * static_cast<double>(w.in_channels * w.width * w.height) - 1.0);
    const double ehw = static_cast<double>(d.width * d.height);
    const double den = static_cast<double>(d.out_channels) * HW *
                           (ehw + 2.0 * static_cast<double>(d.in_channels) * ehw - 1.0) +
                       2.0 * static_cast<double>(plan.r_in()) * HW * static_cast<double>(plan.beta_in) +
                       2.0 * static_cast<double>(plan.beta_out * plan.r_out());
    return num / den;
}

double approx_reduction_ratio(const LayerPlan& plan)
{
    return static_cast<double>(plan.weights.size()) / static_cast<double>(plan.epitome.size());
}

std::uint64_t engine_bound(const LayerPlan& plan, std::size_t in_w, std::size_t in_h, const ConvSpec& conv,
                           InferStrategy strategy)
{
    const Dims4& w = plan.weights;
    const Dims4& d = plan.epitome;
    const std::uint64_t out_w = conv_output_extent(in_w, conv.padding.before_w, conv.padding.after_w, w.width, conv.stride);
    const std::uint64_t out_h =
        conv_output_extent(in_h, conv.padding.before_h, conv.padding.after_h, w.height, conv.stride);
    const std::uint64_t O = out_w * out_h;
    const std::uint64_t in = static_cast<std::uint64_t>(in_w) * in_h;
    const std::uint64_t G = max_groups(plan);
    const std::uint64_t ehw = d.width * d.height;

    const std::uint64_t wrap = 4 * in * w.in_channels;
    std::uint64_t body = 0;
    if (strategy == InferStrategy::direct) {
        body = G * (7 * w.width * w.height * d.in_channels * d.out_channels +
                    (2 * d.in_channels * w.width * w.height - 1) * O * d.out_channels);
    } else {
        const std::uint64_t segx = ceil_div(d.width - 1 + w.width, d.width);
        const std::uint64_t segy = ceil_div(d.height - 1 + w.height, d.height);
        body = G * in * ehw * d.out_channels * (2 * d.in_channels - 1) + 3 * G * in * ehw * d.out_channels +
               G * O * d.out_channels * 4 * (4 * segx * segy + 2);
    }
    const std::uint64_t merge = (G - 1) * O * d.out_channels;
    const std::uint64_t filter = 3 * O * w.out_channels;
    return wrap + body + merge + filter;
}

nlohmann::json to_json(const MaddReport& r)
{
    return {{"layer", r.layer},
            {"naive_madd", r.naive_madd},
            {"reuse_madd", r.reuse_madd},
            {"ratio", r.ratio},
            {"approx_ratio", r.approx_ratio},
            {"measured", r.measured},
            {"measured_multiplies", r.measured_multiplies},
            {"engine_bound", r.engine_bound},
            {"strategy", r.strategy},
            {"spatial_groups", r.spatial_groups},
            {"copied_filter_blocks", r.copied_filter_blocks}};
}

nlohmann::json madd_summary(const std::vector<MaddReport>& layers)
{
    std::uint64_t naive = 0, reuse = 0, measured = 0;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : layers) {
        naive += l.naive_madd;
        reuse += l.reuse_madd;
        measured += l.measured;
        arr.push_back(to_json(l));
    }
    return {{"naive_madd", naive},
            {"reuse_madd", reuse},
            {"measured", measured},
            {"ratio", reuse ? static_cast<double>(naive) / static_cast<double>(reuse) : 0.0},
            {"layers", arr}};
}

} // namespace nes
