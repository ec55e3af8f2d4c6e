#include "nes/routing_map.hpp"

#include "nes/detail/bytes.hpp"

#include <cmath>
#include <string>

namespace nes {

namespace {

bool in_axis(double v, std::size_t dim) { return v >= 0.0 && v < static_cast<double>(dim); }

} // namespace

bool indices_in_range(const IndexSet& s, const Dims4& d)
{
    for (const auto& b : s.in_blocks)
        if (!in_axis(b.p, d.width) || !in_axis(b.q, d.height) || !in_axis(b.c_in, d.in_channels)) return false;
    for (double o : s.out_blocks)
        if (!in_axis(o, d.out_channels)) return false;
    return true;
}

RoutingMap::RoutingMap(const LayerPlan& plan, IndexSet initial, double momentum)
    : entries_(std::move(initial))
    , dims_(plan.epitome)
    , momentum_(momentum)
{
    entries_.check_against(plan);
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    check_range(entries_);
}

void RoutingMap::check_range(const IndexSet& s) const
{
    if (!indices_in_range(s, dims_)) throw ConfigError("routing-map entries must lie in [0, dim) of their axis");
}

void RoutingMap::update(const IndexSet& fresh)
{
    if (frozen_) throw StateError("routing map is frozen");
    if (fresh.in_blocks.size() != r_in() || fresh.out_blocks.size() != r_out())
        throw ConfigError("fresh index set does not match routing-map block counts");
    check_range(fresh);
    const double keep = momentum_, take = 1.0 - momentum_;
    for (std::size_t r = 0; r < r_in(); ++r) {
        auto& e = entries_.in_blocks[r];
        const auto& f = fresh.in_blocks[r];
        e.p = keep * e.p + take * f.p;
        e.q = keep * e.q + take * f.q;
        e.c_in = keep * e.c_in + take * f.c_in;
    }
    for (std::size_t r = 0; r < r_out(); ++r)
        entries_.out_blocks[r] = keep * entries_.out_blocks[r] + take * fresh.out_blocks[r];
}

const InBlockStart& RoutingMap::lookup_in(std::size_t block) const
{
    if (block >= r_in())
        throw std::out_of_range("input block " + std::to_string(block) + " of " + std::to_string(r_in()));
    return entries_.in_blocks[block];
}

double RoutingMap::lookup_out(std::size_t block) const
{
    if (block >= r_out())
        throw std::out_of_range("filter block " + std::to_string(block) + " of " + std::to_string(r_out()));
    return entries_.out_blocks[block];
}

std::vector<std::uint8_t> RoutingMap::serialize() const
{
    detail::ByteWriter w;
    w.tag("RMAP");
    w.u32(static_cast<std::uint32_t>(r_in()));
    w.u32(static_cast<std::uint32_t>(r_out()));
    for (std::size_t a = 0; a < 4; ++a) w.u32(static_cast<std::uint32_t>(dims_[a]));
    w.u8(frozen_ ? 1 : 0);
    w.f64(momentum_);
    for (double v : entries_.flat()) w.f64(v);
    return std::move(w.buffer());
}

RoutingMap RoutingMap::deserialize(std::span<const std::uint8_t> bytes)
{
    std::size_t offset = 0;
    RoutingMap m = deserialize(bytes, offset);
    if (offset != bytes.size()) throw ParseError("trailing bytes after routing map", offset);
    return m;
}

RoutingMap RoutingMap::deserialize(std::span<const std::uint8_t> bytes, std::size_t& offset)
{
    detail::ByteReader r(bytes, offset);
    r.expect_tag("RMAP", "routing map");
    const std::size_t header_at = r.offset();
    const std::uint32_t rin = r.u32(), rout = r.u32();
    RoutingMap m;
    m.dims_ = {r.u32(), r.u32(), r.u32(), r.u32()};
    if (m.dims_.size() == 0) throw ParseError("routing map has a zero epitome extent", header_at);
    const std::uint8_t frozen = r.u8();
    if (frozen > 1) throw ParseError("routing map frozen flag must be 0 or 1", r.offset() - 1);
    m.frozen_ = frozen == 1;
    const std::size_t mu_at = r.offset();
    m.momentum_ = r.f64();
    if (!(m.momentum_ >= 0.0 && m.momentum_ < 1.0)) throw ParseError("routing map momentum outside [0, 1)", mu_at);
    const std::size_t n = 3 * static_cast<std::size_t>(rin) + rout;
    r.need(8 * n, "routing map entries");
    m.entries_.in_blocks.resize(rin);
    for (auto& b : m.entries_.in_blocks) {
        b.p = r.f64();
        b.q = r.f64();
        b.c_in = r.f64();
    }
    m.entries_.out_blocks.resize(rout);
    for (auto& o : m.entries_.out_blocks) o = r.f64();
    if (!indices_in_range(m.entries_, m.dims_)) throw ParseError("routing map entry outside its axis range", mu_at + 8);
    offset = r.offset();
    return m;
}

} // namespace nes
