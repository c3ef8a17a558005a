#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tdml {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline ByteView as_bytes(std::string_view s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline Bytes to_bytes(std::string_view s) {
    return Bytes(s.begin(), s.end());
}

inline std::string to_string(ByteView b) {
    return std::string(b.begin(), b.end());
}

/// Canonical little-endian writer. Variable-size fields carry a u32 length prefix.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f32(float v);
    void f64(double v);
    void raw(ByteView b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void bytes(ByteView b);
    void str(std::string_view s) { bytes(as_bytes(s)); }

    const Bytes& data() const& { return buf_; }
    Bytes take() && { return std::move(buf_); }

private:
    Bytes buf_;
};

/// Bounds-checked reader matching ByteWriter. Throws Error(DecodeError) on underrun.
class ByteReader {
public:
    explicit ByteReader(ByteView b) : buf_(b) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    ByteView raw(std::size_t n);
    Bytes bytes();
    std::string str();

    std::size_t remaining() const { return buf_.size() - pos_; }
    bool done() const { return pos_ == buf_.size(); }
    void expect_done() const;

private:
    ByteView buf_;
    std::size_t pos_ = 0;
};

// Lowercase only; decoding rejects uppercase and odd lengths so every value has one spelling.
std::string hex_encode(ByteView b);
Bytes hex_decode(std::string_view s);

// RFC 4648 with padding; decoding rejects non-canonical trailing bits.
std::string base64_encode(ByteView b);
Bytes base64_decode(std::string_view s);

} // namespace tdml
