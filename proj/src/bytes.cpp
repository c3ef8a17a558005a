#include "tdml/bytes.hpp"

#include "tdml/error.hpp"

#include <bit>
#include <cstring>

#include <openssl/evp.h>

namespace tdml {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::EmptyBody: return "EmptyBody";
    case ErrorCode::ClockRegression: return "ClockRegression";
    case ErrorCode::AuthFailure: return "AuthFailure";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingCache: return "MissingCache";
    case ErrorCode::MissingActivation: return "MissingActivation";
    case ErrorCode::InsufficientMemory: return "InsufficientMemory";
    case ErrorCode::InsufficientCandidates: return "InsufficientCandidates";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::UnknownParty: return "UnknownParty";
    case ErrorCode::IllegalTransition: return "IllegalTransition";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::IncompleteEvidence: return "IncompleteEvidence";
    case ErrorCode::NoPayout: return "NoPayout";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    }
    return "Unknown";
}

void ByteWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::bytes(ByteView b) {
    u32(static_cast<std::uint32_t>(b.size()));
    raw(b);
}

ByteView ByteReader::raw(std::size_t n) {
    if (remaining() < n) throw Error(ErrorCode::DecodeError, "buffer underrun");
    auto out = buf_.subspan(pos_, n);
    pos_ += n;
    return out;
}

std::uint8_t ByteReader::u8() { return raw(1)[0]; }

std::uint32_t ByteReader::u32() {
    auto b = raw(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t ByteReader::u64() {
    auto b = raw(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

Bytes ByteReader::bytes() {
    auto n = u32();
    auto b = raw(n);
    return Bytes(b.begin(), b.end());
}

std::string ByteReader::str() {
    auto n = u32();
    auto b = raw(n);
    return std::string(b.begin(), b.end());
}

void ByteReader::expect_done() const {
    if (!done()) throw Error(ErrorCode::DecodeError, "trailing bytes");
}

std::string hex_encode(ByteView b) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(b.size() * 2);
    for (auto c : b) {
        out.push_back(digits[c >> 4]);
        out.push_back(digits[c & 0xf]);
    }
    return out;
}

namespace {

int hex_value(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
}

} // namespace

Bytes hex_decode(std::string_view s) {
    if (s.size() % 2 != 0) throw Error(ErrorCode::DecodeError, "odd hex length");
    Bytes out(s.size() / 2);
    for (std::size_t i = 0; i < out.size(); ++i) {
        int hi = hex_value(s[2 * i]);
        int lo = hex_value(s[2 * i + 1]);
        if (hi < 0 || lo < 0) throw Error(ErrorCode::DecodeError, "bad hex digit");
        out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
    }
    return out;
}

std::string base64_encode(ByteView b) {
    std::string out(4 * ((b.size() + 2) / 3), '\0');
    int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), b.data(),
                            static_cast<int>(b.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

Bytes base64_decode(std::string_view s) {
    if (s.size() % 4 != 0) throw Error(ErrorCode::DecodeError, "base64 length");
    if (s.empty()) return {};
    for (char c : s) {
        bool ok = (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
                  c == '+' || c == '/' || c == '=';
        if (!ok) throw Error(ErrorCode::DecodeError, "base64 alphabet");
    }
    Bytes out(s.size() / 4 * 3);
    int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(s.data()),
                            static_cast<int>(s.size()));
    if (n < 0) throw Error(ErrorCode::DecodeError, "base64 decode");
    std::size_t pad = 0;
    if (s.back() == '=') ++pad;
    if (s.size() >= 2 && s[s.size() - 2] == '=') ++pad;
    out.resize(static_cast<std::size_t>(n) - pad);
    // Reject spellings that decode to the same bytes (padding bits, stray '=').
    if (base64_encode(out) != s) throw Error(ErrorCode::DecodeError, "non-canonical base64");
    return out;
}

} // namespace tdml
