#include "tdml/ledger.hpp"

#include "tdml/error.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <memory>

namespace tdml::ledger {

namespace {

constexpr std::array<std::string_view, 13> kKindNames = {
    "Genesis",          "TaskAnnounce",    "ServerRegister",   "HiringAnnounce",
    "TrainerRegister",  "KeyExchange",     "ShardUpload",      "GradientUpload",
    "LocalModelUpload", "ValidationResult", "GlobalModelPublish", "DetectionReport",
    "RewardClaim",
};

Bytes le64(std::uint64_t v) {
    ByteWriter w;
    w.u64(v);
    return std::move(w).take();
}

} // namespace

std::string_view to_string(TxKind kind) {
    auto i = static_cast<std::size_t>(kind);
    return i < kKindNames.size() ? kKindNames[i] : "Unknown";
}

std::optional<TxKind> parse_kind(std::string_view name) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i) {
        if (kKindNames[i] == name) return static_cast<TxKind>(i);
    }
    return std::nullopt;
}

Bytes Transaction::canonical_bytes() const {
    ByteWriter w;
    w.u64(timestamp);
    w.str(author);
    w.u32(static_cast<std::uint32_t>(kind));
    w.bytes(payload);
    return std::move(w).take();
}

Transaction make_transaction(Tick timestamp, std::string author, TxKind kind, Bytes payload) {
    Transaction tx{timestamp, std::move(author), kind, std::move(payload), {}};
    tx.tx_id = tx.compute_id();
    return tx;
}

Digest compute_block_id(const Digest& prev_id, Tick timestamp, const Digest& merkle_root) {
    auto ts = le64(timestamp);
    return sha256_concat({prev_id.view(), ts, merkle_root.view()});
}

Digest merkle_root(std::span<const Transaction> txs) {
    if (txs.empty()) throw Error(ErrorCode::EmptyBody, "merkle_root of empty body");
    if (txs.size() == 1) return sha256(txs[0].tx_id.view());

    std::vector<Digest> level;
    level.reserve(txs.size());
    for (const auto& tx : txs) level.push_back(tx.tx_id);
    while (level.size() > 1) {
        std::vector<Digest> next;
        next.reserve((level.size() + 1) / 2);
        for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
            next.push_back(sha256_concat({level[i].view(), level[i + 1].view()}));
        }
        if (level.size() % 2 == 1) next.push_back(level.back());
        level = std::move(next);
    }
    return level.front();
}

Chain make_chain(std::string genesis_tag, Tick tick) {
    nlohmann::ordered_json meta;
    meta["job"] = genesis_tag;
    meta["digest"] = std::string(kDigestName);
    auto tx = make_transaction(tick, "genesis", TxKind::Genesis, to_bytes(meta.dump()));

    Block block;
    block.body.push_back(std::move(tx));
    block.header.prev_id = Digest::zero();
    block.header.timestamp = tick;
    block.header.merkle_root = merkle_root(block.body);
    block.header.block_id = compute_block_id(block.header.prev_id, tick, block.header.merkle_root);

    Chain chain;
    chain.genesis_tag = std::move(genesis_tag);
    chain.blocks.push_back(std::move(block));
    return chain;
}

const Block& append_block(Chain& chain, std::vector<Transaction> txs, Tick tick) {
    if (txs.empty()) throw Error(ErrorCode::EmptyBody, "append_block with no transactions");
    if (!chain.blocks.empty() && tick < chain.head_timestamp()) {
        throw Error(ErrorCode::ClockRegression, "tick " + std::to_string(tick) + " < head " +
                                                    std::to_string(chain.head_timestamp()));
    }
    for (const auto& tx : txs) {
        if (tx.timestamp != tick) {
            throw Error(ErrorCode::ClockRegression, "transaction timestamp differs from block tick");
        }
        if (tx.kind == TxKind::Genesis) {
            throw Error(ErrorCode::InvalidArgument, "genesis transaction outside block 0");
        }
    }
    Block block;
    block.body = std::move(txs);
    block.header.prev_id = chain.blocks.empty() ? Digest::zero() : chain.blocks.back().header.block_id;
    block.header.timestamp = tick;
    block.header.merkle_root = merkle_root(block.body);
    block.header.block_id = compute_block_id(block.header.prev_id, tick, block.header.merkle_root);
    chain.blocks.push_back(std::move(block));
    return chain.blocks.back();
}

VerifyReport verify_chain(const Chain& chain) {
    auto fail = [](std::size_t i, std::string why) {
        return VerifyReport{false, i, std::move(why)};
    };
    for (std::size_t i = 0; i < chain.blocks.size(); ++i) {
        const auto& b = chain.blocks[i];
        const auto& h = b.header;
        if (b.body.empty()) return fail(i, "empty body");

        const Tick prev_ts = i == 0 ? 0 : chain.blocks[i - 1].header.timestamp;
        if (i == 0) {
            if (h.prev_id != Digest::zero()) return fail(i, "genesis prev_id not zero");
            if (b.body.size() != 1 || b.body[0].kind != TxKind::Genesis) {
                return fail(i, "malformed genesis body");
            }
        } else {
            if (h.prev_id != chain.blocks[i - 1].header.block_id) return fail(i, "prev_id link");
            if (h.timestamp < prev_ts) return fail(i, "block clock regression");
        }
        for (const auto& tx : b.body) {
            if (tx.compute_id() != tx.tx_id) return fail(i, "tx_id mismatch");
            if (tx.timestamp > h.timestamp || tx.timestamp < prev_ts) {
                return fail(i, "tx timestamp outside block window");
            }
            if (i > 0 && tx.kind == TxKind::Genesis) return fail(i, "genesis tx after block 0");
        }
        if (merkle_root(b.body) != h.merkle_root) return fail(i, "merkle_root mismatch");
        if (compute_block_id(h.prev_id, h.timestamp, h.merkle_root) != h.block_id) {
            return fail(i, "block_id mismatch");
        }
    }
    return {};
}

std::vector<Transaction> query(const Chain& chain, TxKind kind,
                               std::optional<std::string_view> author) {
    std::vector<Transaction> out;
    for (const auto& b : chain.blocks) {
        for (const auto& tx : b.body) {
            if (tx.kind != kind) continue;
            if (author && tx.author != *author) continue;
            out.push_back(tx);
        }
    }
    return out;
}

std::string dump_jsonl(const Chain& chain) {
    std::string out;
    for (std::size_t i = 0; i < chain.blocks.size(); ++i) {
        const auto& b = chain.blocks[i];
        nlohmann::ordered_json line;
        line["height"] = i;
        line["prev"] = b.header.prev_id.hex();
        line["id"] = b.header.block_id.hex();
        line["ts"] = b.header.timestamp;
        line["root"] = b.header.merkle_root.hex();
        auto txs = nlohmann::ordered_json::array();
        for (const auto& tx : b.body) {
            nlohmann::ordered_json j;
            j["kind"] = std::string(to_string(tx.kind));
            j["author"] = tx.author;
            j["payload_b64"] = base64_encode(tx.payload);
            j["txid"] = tx.tx_id.hex();
            txs.push_back(std::move(j));
        }
        line["txs"] = std::move(txs);
        out += line.dump();
        out += '\n';
    }
    return out;
}

namespace {

const nlohmann::json& field(const nlohmann::json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) throw Error(ErrorCode::DecodeError, std::string("missing field ") + key);
    return *it;
}

std::string get_string(const nlohmann::json& obj, const char* key) {
    const auto& v = field(obj, key);
    if (!v.is_string()) throw Error(ErrorCode::DecodeError, std::string("field not a string: ") + key);
    return v.get<std::string>();
}

std::uint64_t get_uint(const nlohmann::json& obj, const char* key) {
    const auto& v = field(obj, key);
    if (!v.is_number_unsigned()) {
        throw Error(ErrorCode::DecodeError, std::string("field not unsigned: ") + key);
    }
    return v.get<std::uint64_t>();
}

} // namespace

Chain load_jsonl(std::string_view text) {
    Chain chain;
    if (text.empty() || text.back() != '\n') throw Error(ErrorCode::DecodeError, "missing final newline");
    std::size_t start = 0;
    while (start < text.size()) {
        auto end = text.find('\n', start);
        auto line = text.substr(start, end - start);
        start = end + 1;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::DecodeError, std::string("block line: ") + e.what());
        }
        if (!j.is_object()) throw Error(ErrorCode::DecodeError, "block line is not an object");

        Block b;
        b.header.prev_id = Digest::from_hex(get_string(j, "prev"));
        b.header.block_id = Digest::from_hex(get_string(j, "id"));
        b.header.timestamp = get_uint(j, "ts");
        b.header.merkle_root = Digest::from_hex(get_string(j, "root"));
        const auto& txs = field(j, "txs");
        if (!txs.is_array()) throw Error(ErrorCode::DecodeError, "txs is not an array");
        for (const auto& t : txs) {
            if (!t.is_object()) throw Error(ErrorCode::DecodeError, "tx is not an object");
            Transaction tx;
            tx.timestamp = b.header.timestamp;
            tx.author = get_string(t, "author");
            auto kind = parse_kind(get_string(t, "kind"));
            if (!kind) throw Error(ErrorCode::DecodeError, "unknown tx kind");
            tx.kind = *kind;
            tx.payload = base64_decode(get_string(t, "payload_b64"));
            tx.tx_id = Digest::from_hex(get_string(t, "txid"));
            b.body.push_back(std::move(tx));
        }
        chain.blocks.push_back(std::move(b));
    }
    if (!chain.blocks.empty() && !chain.blocks[0].body.empty()) {
        try {
            auto meta = nlohmann::json::parse(tdml::to_string(chain.blocks[0].body[0].payload));
            if (meta.is_object() && meta.contains("job") && meta["job"].is_string()) {
                chain.genesis_tag = meta["job"].get<std::string>();
            }
        } catch (const nlohmann::json::exception&) {
            // left empty; verify_chain decides whether the genesis block is acceptable
        }
    }
    if (dump_jsonl(chain) != text) throw Error(ErrorCode::DecodeError, "non-canonical chain dump");
    return chain;
}

// ---------------------------------------------------------------------------------------

std::string key_id_for(const std::array<std::uint8_t, 32>& secret) {
    auto d = sha256_concat({as_bytes("tdml-key-id"), secret});
    return hex_encode(ByteView(d.bytes).first(8));
}

Bytes Envelope::serialize() const {
    ByteWriter w;
    w.str(key_id);
    w.raw(nonce);
    w.bytes(ciphertext);
    w.raw(auth_tag.view());
    return std::move(w).take();
}

Envelope Envelope::deserialize(ByteView raw) {
    ByteReader r(raw);
    Envelope env;
    env.key_id = r.str();
    auto n = r.raw(env.nonce.size());
    std::copy(n.begin(), n.end(), env.nonce.begin());
    env.ciphertext = r.bytes();
    auto t = r.raw(32);
    std::copy(t.begin(), t.end(), env.auth_tag.bytes.begin());
    r.expect_done();
    return env;
}

Nonce derive_nonce(std::string_view key_id, std::uint64_t counter) {
    auto c = le64(counter);
    auto d = sha256_concat({as_bytes("tdml-nonce"), as_bytes(key_id), c});
    Nonce n;
    std::copy_n(d.bytes.begin(), n.size(), n.begin());
    return n;
}

namespace {

// AES-256-CTR with the session secret as key and the nonce as the initial counter block.
void apply_keystream(Bytes& data, const SessionKey& key, const Nonce& nonce) {
    if (data.empty()) return;
    std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(EVP_CIPHER_CTX_new(), EVP_CIPHER_CTX_free);
    int len = 0;
    if (!ctx || EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_ctr(), nullptr, key.secret.data(), nonce.data()) != 1 ||
        EVP_EncryptUpdate(ctx.get(), data.data(), &len, data.data(), static_cast<int>(data.size())) != 1) {
        throw Error(ErrorCode::InvalidArgument, "cipher failure");
    }
}

Digest envelope_tag(const SessionKey& key, const Nonce& nonce, ByteView ciphertext) {
    return sha256_concat({key.secret, nonce, ciphertext});
}

} // namespace

Envelope seal(ByteView payload, const SessionKey& key, const Nonce& nonce) {
    Envelope env;
    env.key_id = key.id;
    env.nonce = nonce;
    env.ciphertext.assign(payload.begin(), payload.end());
    apply_keystream(env.ciphertext, key, nonce);
    env.auth_tag = envelope_tag(key, nonce, env.ciphertext);
    return env;
}

Bytes open(const Envelope& env, const SessionKey& key) {
    if (env.key_id != key.id) throw Error(ErrorCode::AuthFailure, "key id mismatch");
    if (envelope_tag(key, env.nonce, env.ciphertext) != env.auth_tag) {
        throw Error(ErrorCode::AuthFailure, "auth tag mismatch");
    }
    Bytes plain = env.ciphertext;
    apply_keystream(plain, key, env.nonce);
    return plain;
}

Bytes open(ByteView serialized_envelope, const SessionKey& key) {
    Envelope env;
    try {
        env = Envelope::deserialize(serialized_envelope);
    } catch (const Error&) {
        throw Error(ErrorCode::AuthFailure, "malformed envelope");
    }
    return open(env, key);
}

void KeyRing::add(const SessionKey& key) { keys_[key.id] = key; }

bool KeyRing::contains(std::string_view key_id) const { return keys_.find(key_id) != keys_.end(); }

const SessionKey& KeyRing::get(std::string_view key_id) const {
    auto it = keys_.find(key_id);
    if (it == keys_.end()) throw Error(ErrorCode::AuthFailure, "unknown key id");
    return it->second;
}

Bytes KeyRing::seal(std::string_view key_id, ByteView payload) {
    const auto& key = get(key_id);
    auto it = counters_.find(key_id);
    if (it == counters_.end()) it = counters_.emplace(std::string(key_id), 0).first;
    auto nonce = derive_nonce(key_id, it->second++);
    return ledger::seal(payload, key, nonce).serialize();
}

Bytes KeyRing::open(ByteView serialized_envelope) const {
    Envelope env;
    try {
        env = Envelope::deserialize(serialized_envelope);
    } catch (const Error&) {
        throw Error(ErrorCode::AuthFailure, "malformed envelope");
    }
    return ledger::open(env, get(env.key_id));
}

} // namespace tdml::ledger
