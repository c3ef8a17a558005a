#pragma once

#include "tdml/bytes.hpp"
#include "tdml/digest.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tdml::ledger {

enum class TxKind : std::uint32_t {
    Genesis = 0,
    TaskAnnounce,
    ServerRegister,
    HiringAnnounce,
    TrainerRegister,
    KeyExchange,
    ShardUpload,
    GradientUpload,
    LocalModelUpload,
    ValidationResult,
    GlobalModelPublish,
    DetectionReport,
    RewardClaim,
};

std::string_view to_string(TxKind kind);
std::optional<TxKind> parse_kind(std::string_view name);

using Tick = std::uint64_t;

struct Transaction {
    Tick timestamp = 0;
    std::string author;
    TxKind kind = TxKind::Genesis;
    Bytes payload;
    Digest tx_id;

    /// Length-prefixed little-endian encoding of every field except tx_id.
    Bytes canonical_bytes() const;
    Digest compute_id() const { return sha256(canonical_bytes()); }

    friend bool operator==(const Transaction&, const Transaction&) = default;
};

Transaction make_transaction(Tick timestamp, std::string author, TxKind kind, Bytes payload);

struct BlockHeader {
    Digest prev_id;
    Digest block_id;
    Tick timestamp = 0;
    Digest merkle_root;

    friend bool operator==(const BlockHeader&, const BlockHeader&) = default;
};

Digest compute_block_id(const Digest& prev_id, Tick timestamp, const Digest& merkle_root);

struct Block {
    BlockHeader header;
    std::vector<Transaction> body;

    friend bool operator==(const Block&, const Block&) = default;
};

struct Chain {
    std::string genesis_tag;
    std::vector<Block> blocks;

    std::size_t height() const { return blocks.size(); }
    Tick head_timestamp() const { return blocks.empty() ? 0 : blocks.back().header.timestamp; }

    friend bool operator==(const Chain&, const Chain&) = default;
};

/// Pairwise hashing of tx ids; an unpaired node is promoted unchanged to the next level.
/// A single-leaf tree hashes its leaf once. Throws EmptyBody on an empty sequence.
Digest merkle_root(std::span<const Transaction> txs);

/// Creates a chain holding only the genesis block. The genesis transaction names the
/// job and the digest function so a dump is self-describing.
Chain make_chain(std::string genesis_tag, Tick tick = 0);

/// Seals `txs` into a new block at `tick`. Every transaction must carry `tick` as its
/// timestamp (one block per protocol round). Throws EmptyBody / ClockRegression.
const Block& append_block(Chain& chain, std::vector<Transaction> txs, Tick tick);

struct VerifyReport {
    bool ok = true;
    std::optional<std::size_t> first_bad_block;
    std::string reason;
};

VerifyReport verify_chain(const Chain& chain);

std::vector<Transaction> query(const Chain& chain, TxKind kind,
                               std::optional<std::string_view> author = std::nullopt);

// One JSON object per block per line, newline terminated.
std::string dump_jsonl(const Chain& chain);
/// Strict inverse of dump_jsonl: any input that would not re-dump byte-for-byte is
/// rejected with DecodeError.
Chain load_jsonl(std::string_view text);

// ---------------------------------------------------------------------------------------
// Authenticated envelopes

using Nonce = std::array<std::uint8_t, 16>;

struct SessionKey {
    std::string id;
    std::array<std::uint8_t, 32> secret{};

    friend bool operator==(const SessionKey&, const SessionKey&) = default;
};

/// Key id published on chain: a digest of the secret, never the secret itself.
std::string key_id_for(const std::array<std::uint8_t, 32>& secret);

struct Envelope {
    std::string key_id;
    Nonce nonce{};
    Bytes ciphertext;
    Digest auth_tag;

    Bytes serialize() const;
    static Envelope deserialize(ByteView raw);

    friend bool operator==(const Envelope&, const Envelope&) = default;
};

Nonce derive_nonce(std::string_view key_id, std::uint64_t counter);

Envelope seal(ByteView payload, const SessionKey& key, const Nonce& nonce);
/// Throws AuthFailure if the key id differs or the tag does not recompute.
Bytes open(const Envelope& env, const SessionKey& key);
Bytes open(ByteView serialized_envelope, const SessionKey& key);

/// Holds session keys and the per-key counters that drive deterministic nonces.
class KeyRing {
public:
    void add(const SessionKey& key);
    bool contains(std::string_view key_id) const;
    const SessionKey& get(std::string_view key_id) const;

    /// Seals with the next nonce for `key_id` and returns the serialized envelope.
    Bytes seal(std::string_view key_id, ByteView payload);
    Bytes open(ByteView serialized_envelope) const;

private:
    std::map<std::string, SessionKey, std::less<>> keys_;
    std::map<std::string, std::uint64_t, std::less<>> counters_;
};

} // namespace tdml::ledger
