#pragma once

#include "nes/epitome.hpp"

#include <array>
#include <cstddef>

namespace nes::detail {

/// Axis taps of one (input block, filter block) pair.
struct BlockTaps {
    AxisTap x, y, k, o;
};

BlockTaps block_taps(const Epitome& e, const LayerPlan& plan, const IndexSet& indices, std::size_t r_in,
                     std::size_t r_out);

/// Epitome coordinate of patch offset `offset` from tap start `start`.
inline std::size_t wrap_index(std::size_t start, std::size_t offset, std::size_t length) noexcept
{
    return (start + offset) % length;
}

/// Throws std::out_of_range when a patch of `extent` starting at the tap
/// would cross the axis end and wrapping is off.
void require_in_range(const AxisTap& tap, std::size_t extent, std::size_t length, const char* axis);

/// Starts and weights of the (at most two) nonzero taps on an axis.
struct TapList {
    std::array<std::size_t, 2> start{};
    std::array<double, 2> weight{};
    std::size_t count = 0;
};

inline TapList tap_list(const AxisTap& t) noexcept
{
    TapList l;
    l.start[0] = t.base;
    l.weight[0] = t.w_base;
    l.count = 1;
    if (t.fractional()) {
        l.start[1] = t.next;
        l.weight[1] = t.w_next;
        l.count = 2;
    }
    return l;
}

} // namespace nes::detail
