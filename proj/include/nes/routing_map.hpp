#pragma once

#include "nes/epitome.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace nes {

inline constexpr double kDefaultMomentum = 0.97;

/// Block-granular lookup table of starting indices, smoothed by an
/// exponential moving average during training and frozen for inference.
class RoutingMap {
public:
    RoutingMap(const LayerPlan& plan, IndexSet initial, double momentum = kDefaultMomentum);

    /// entry <- momentum * entry + (1 - momentum) * fresh.
    void update(const IndexSet& fresh);
    void freeze() noexcept { frozen_ = true; }
    bool frozen() const noexcept { return frozen_; }

    const InBlockStart& lookup_in(std::size_t block) const;
    double lookup_out(std::size_t block) const;
    const IndexSet& indices() const noexcept { return entries_; }

    double momentum() const noexcept { return momentum_; }
    const Dims4& epitome_dims() const noexcept { return dims_; }
    std::size_t r_in() const noexcept { return entries_.in_blocks.size(); }
    std::size_t r_out() const noexcept { return entries_.out_blocks.size(); }
    /// 3 * R_cin + R_cout.
    std::size_t stored_numbers() const noexcept { return entries_.count(); }

    /// "RMAP", u32 R_cin, u32 R_cout, 4 x u32 epitome dims, u8 frozen,
    /// f64 momentum, then the flat entries; all little-endian.
    std::vector<std::uint8_t> serialize() const;
    static RoutingMap deserialize(std::span<const std::uint8_t> bytes);
    /// Parses a map at `offset`; advances `offset` past it.
    static RoutingMap deserialize(std::span<const std::uint8_t> bytes, std::size_t& offset);

    bool operator==(const RoutingMap&) const = default;

private:
    RoutingMap() = default;
    void check_range(const IndexSet& s) const;

    IndexSet entries_;
    Dims4 dims_;
    double momentum_ = kDefaultMomentum;
    bool frozen_ = false;
};

/// Scaled indices keep every entry inside [0, dim) of its axis.
bool indices_in_range(const IndexSet& s, const Dims4& epitome);

} // namespace nes
