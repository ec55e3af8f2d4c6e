#pragma once

#include "nes/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace nes::detail {

/// Little-endian writer.
class ByteWriter {
public:
    void u8(std::uint8_t v) { out_.push_back(v); }
    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v)
    {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void tag(const char (&t)[5]) { out_.insert(out_.end(), t, t + 4); }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }

    std::vector<std::uint8_t>& buffer() noexcept { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

/// Little-endian reader; every short read throws ParseError with the offset.
class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> in, std::size_t offset = 0)
        : in_(in)
        , pos_(offset)
    {
    }

    std::uint8_t u8()
    {
        need(1, "u8");
        return in_[pos_++];
    }
    std::uint32_t u32()
    {
        need(4, "u32");
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64()
    {
        need(8, "u64");
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    void expect_tag(const char (&t)[5], const char* what)
    {
        need(4, what);
        if (std::memcmp(in_.data() + pos_, t, 4) != 0)
            throw ParseError(std::string("bad ") + what + " tag, expected '" + t + "'", pos_);
        pos_ += 4;
    }

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return in_.size() - pos_; }

    void need(std::size_t n, const char* what) const
    {
        if (in_.size() - pos_ < n)
            throw ParseError(std::string("truncated input while reading ") + what, pos_);
    }

private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_;
};

} // namespace nes::detail
