#pragma once

#include "tdml/bytes.hpp"

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

namespace tdml {

/// The one digest used everywhere (chain ids, Merkle nodes, CIDs, key derivation).
inline constexpr std::string_view kDigestName = "sha256";

struct Digest {
    std::array<std::uint8_t, 32> bytes{};

    static Digest zero() { return {}; }
    static Digest from_hex(std::string_view hex);

    std::string hex() const { return hex_encode(bytes); }
    ByteView view() const { return bytes; }

    friend bool operator==(const Digest&, const Digest&) = default;
    friend auto operator<=>(const Digest&, const Digest&) = default;
};

Digest sha256(ByteView data);

/// Digest over the concatenation of several byte ranges.
Digest sha256_concat(std::initializer_list<ByteView> parts);

/// Incremental hashing for large or piecewise inputs.
class Hasher {
public:
    Hasher();
    ~Hasher();
    Hasher(const Hasher&) = delete;
    Hasher& operator=(const Hasher&) = delete;

    Hasher& update(ByteView data);
    Hasher& update(std::string_view s) { return update(as_bytes(s)); }
    Digest finish();

private:
    void* ctx_;
};

} // namespace tdml
