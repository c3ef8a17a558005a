#include "tdml/digest.hpp"

#include "tdml/error.hpp"

#include <openssl/evp.h>

namespace tdml {

namespace {

// fetched once; implicit fetches on every init dominate the cost of short digests
const EVP_MD* sha256_md() {
    static EVP_MD* md = EVP_MD_fetch(nullptr, "SHA256", nullptr);
    return md;
}

} // namespace

Digest Digest::from_hex(std::string_view hex) {
    auto raw = hex_decode(hex);
    if (raw.size() != 32) throw Error(ErrorCode::DecodeError, "digest must be 32 bytes");
    Digest d;
    std::copy(raw.begin(), raw.end(), d.bytes.begin());
    return d;
}

Hasher::Hasher() : ctx_(EVP_MD_CTX_new()) {
    EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), sha256_md(), nullptr);
}

Hasher::~Hasher() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

Hasher& Hasher::update(ByteView data) {
    EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data.data(), data.size());
    return *this;
}

Digest Hasher::finish() {
    Digest d;
    unsigned int len = 0;
    EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), d.bytes.data(), &len);
    EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), sha256_md(), nullptr);
    return d;
}

Digest sha256(ByteView data) {
    Digest d;
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), d.bytes.data(), &len, sha256_md(), nullptr);
    return d;
}

Digest sha256_concat(std::initializer_list<ByteView> parts) {
    Hasher h;
    for (auto p : parts) h.update(p);
    return h.finish();
}

} // namespace tdml
