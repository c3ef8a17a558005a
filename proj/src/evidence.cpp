#include "tdml/evidence.hpp"

#include "tdml/error.hpp"
#include "tdml/rng.hpp"

#include <fstream>
#include <sstream>

namespace tdml::evidence {

using json = nlohmann::json;

namespace {

json cids_json(const std::vector<store::Cid>& cids) {
    auto a = json::array();
    for (const auto& c : cids) a.push_back(c.hex);
    return a;
}

std::vector<store::Cid> cids_from(const json& j) {
    std::vector<store::Cid> out;
    for (const auto& c : j) out.push_back({c.get<std::string>()});
    return out;
}

json assignment_json(const pipeline::ShardAssignment& a) {
    auto arr = json::array();
    for (const auto& r : a.ranges) arr.push_back({{"trainer", r.trainer}, {"lo", r.lo}, {"hi", r.hi}});
    return arr;
}

pipeline::ShardAssignment assignment_from(const json& j) {
    pipeline::ShardAssignment a;
    for (const auto& r : j) {
        a.ranges.push_back({r.at("trainer").get<std::string>(), r.at("lo").get<std::size_t>(), r.at("hi").get<std::size_t>()});
    }
    return a;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::NotFound, "missing " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

json to_json(const Manifest& m) {
    json j;
    j["job"] = m.job;
    j["client"] = m.client;
    j["mode"] = m.mode;
    j["seed"] = m.seed;
    j["arch"] = {{"dims", m.arch.dims}, {"precision_bytes", m.arch.precision_bytes}};
    j["lr"] = m.lr;
    j["epochs"] = m.epochs;
    j["top_k"] = m.top_k;
    j["batch_size"] = m.batch_size;
    j["init_model"] = {{"cid", m.init_model.hex}, {"digest", m.init_digest}};
    j["test_set"] = m.test_set.hex;
    j["job_key_id"] = m.job_key_id;
    j["flag"] = {{"tau", m.flag.tau}, {"min_gap", m.flag.min_gap}};
    j["detection"] = {{"eps", m.detection.eps}, {"min_separation", m.detection.min_separation},
                      {"sample", m.detection_sample}};
    j["budget"] = m.budget;
    j["trainer_share"] = m.trainer_share;
    auto pipes = json::array();
    for (const auto& p : m.pipelines) pipes.push_back({{"server", p.server}, {"batches", cids_json(p.batches)}});
    j["pipelines"] = pipes;
    return j;
}

Manifest manifest_from_json(const json& j) {
    Manifest m;
    m.job = j.at("job").get<std::string>();
    m.client = j.at("client").get<std::string>();
    m.mode = j.at("mode").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.arch.dims = j.at("arch").at("dims").get<std::vector<std::size_t>>();
    m.arch.precision_bytes = j.at("arch").at("precision_bytes").get<std::uint32_t>();
    m.lr = j.at("lr").get<double>();
    m.epochs = j.at("epochs").get<std::uint32_t>();
    m.top_k = j.at("top_k").get<std::uint32_t>();
    m.batch_size = j.at("batch_size").get<std::uint32_t>();
    m.init_model = {j.at("init_model").at("cid").get<std::string>()};
    m.init_digest = j.at("init_model").at("digest").get<std::string>();
    m.test_set = {j.at("test_set").get<std::string>()};
    m.job_key_id = j.at("job_key_id").get<std::string>();
    m.flag.tau = j.at("flag").at("tau").get<double>();
    m.flag.min_gap = j.at("flag").at("min_gap").get<double>();
    m.detection.eps = j.at("detection").at("eps").get<double>();
    m.detection.min_separation = j.at("detection").at("min_separation").get<double>();
    m.detection_sample = j.at("detection").at("sample").get<std::uint32_t>();
    m.budget = j.at("budget").get<std::uint64_t>();
    m.trainer_share = j.at("trainer_share").get<double>();
    for (const auto& p : j.at("pipelines")) {
        m.pipelines.push_back({p.at("server").get<std::string>(), cids_from(p.at("batches"))});
    }
    return m;
}

json to_json(const Enrollment& e) {
    return {{"server", e.server}, {"trainer", e.trainer}, {"lo", e.lo}, {"hi", e.hi}, {"from_epoch", e.from_epoch}};
}

Enrollment enrollment_from_json(const json& j) {
    return {j.at("server").get<std::string>(), j.at("trainer").get<std::string>(), j.at("lo").get<std::size_t>(),
            j.at("hi").get<std::size_t>(), j.at("from_epoch").get<std::uint64_t>()};
}

json to_json(const ShardUpload& s) {
    return {{"pipeline", s.pipeline}, {"epoch", s.epoch}, {"trainer", s.trainer}, {"lo", s.lo},
            {"hi", s.hi},             {"cid", s.cid.hex}, {"digest", s.digest}};
}

ShardUpload shard_upload_from_json(const json& j) {
    ShardUpload s;
    s.pipeline = j.at("pipeline").get<std::string>();
    s.epoch = j.at("epoch").get<std::uint64_t>();
    s.trainer = j.at("trainer").get<std::string>();
    s.lo = j.at("lo").get<std::size_t>();
    s.hi = j.at("hi").get<std::size_t>();
    s.cid = {j.at("cid").get<std::string>()};
    s.digest = j.at("digest").get<std::string>();
    return s;
}

json to_json(const GradientUpload& g) {
    return {{"pipeline", g.pipeline}, {"trainer", g.trainer}, {"epoch", g.epoch}, {"lo", g.lo},
            {"hi", g.hi},             {"cid", g.cid.hex},     {"digest", g.digest}};
}

GradientUpload gradient_upload_from_json(const json& j) {
    GradientUpload g;
    g.pipeline = j.at("pipeline").get<std::string>();
    g.trainer = j.at("trainer").get<std::string>();
    g.epoch = j.at("epoch").get<std::uint64_t>();
    g.lo = j.at("lo").get<std::size_t>();
    g.hi = j.at("hi").get<std::size_t>();
    g.cid = {j.at("cid").get<std::string>()};
    g.digest = j.at("digest").get<std::string>();
    return g;
}

json to_json(const LocalUpload& l) {
    return {{"pipeline", l.pipeline},     {"epoch", l.epoch},     {"cid", l.cid.hex},
            {"digest", l.digest},         {"train_loss", l.train_loss}, {"batches", l.batches},
            {"assignment", assignment_json(l.assignment)}};
}

LocalUpload local_upload_from_json(const json& j) {
    LocalUpload l;
    l.pipeline = j.at("pipeline").get<std::string>();
    l.epoch = j.at("epoch").get<std::uint64_t>();
    l.cid = {j.at("cid").get<std::string>()};
    l.digest = j.at("digest").get<std::string>();
    l.train_loss = j.at("train_loss").get<double>();
    l.batches = j.at("batches").get<std::size_t>();
    l.assignment = assignment_from(j.at("assignment"));
    return l;
}

json to_json(const GlobalPublish& g) {
    return {{"epoch", g.epoch},       {"version", g.version},   {"cid", g.cid.hex},
            {"digest", g.digest},     {"included", g.included}, {"flagged", g.flagged}};
}

GlobalPublish global_publish_from_json(const json& j) {
    GlobalPublish g;
    g.epoch = j.at("epoch").get<std::uint64_t>();
    g.version = j.at("version").get<std::uint64_t>();
    g.cid = {j.at("cid").get<std::string>()};
    g.digest = j.at("digest").get<std::string>();
    g.included = j.at("included").get<std::vector<std::string>>();
    g.flagged = j.at("flagged").get<std::vector<std::string>>();
    return g;
}

json to_json(const RewardClaim& r) {
    return {{"node", r.node}, {"role", r.role}, {"work_units", r.work_units}, {"payout", r.payout}};
}

RewardClaim reward_claim_from_json(const json& j) {
    return {j.at("node").get<std::string>(), j.at("role").get<std::string>(), j.at("work_units").get<std::uint64_t>(),
            j.at("payout").get<std::uint64_t>()};
}

Bytes json_bytes(const json& j) { return to_bytes(j.dump()); }

json parse_json_bytes(ByteView b) {
    try {
        return json::parse(b.begin(), b.end());
    } catch (const json::exception& e) {
        throw Error(ErrorCode::DecodeError, std::string("payload json: ") + e.what());
    }
}

std::uint64_t data_seed(std::uint64_t seed) { return derive_seed(seed, "data"); }
std::uint64_t batch_seed(std::uint64_t seed) { return derive_seed(seed, "batching"); }
std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, "init"); }
std::uint64_t order_seed(std::uint64_t seed, std::string_view pipeline, std::uint64_t epoch) {
    return derive_seed(seed, "batch-order", pipeline, {epoch});
}
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch) { return derive_seed(seed, "detect-sample", {epoch}); }
std::uint64_t attack_seed(std::uint64_t seed) { return derive_seed(seed, "attack"); }

json keyring_json(std::span<const ledger::SessionKey> keys) {
    auto arr = json::array();
    for (const auto& k : keys) arr.push_back({{"id", k.id}, {"secret", hex_encode(k.secret)}});
    return {{"keys", arr}};
}

Evidence load_evidence(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw Error(ErrorCode::NotFound, "no such directory " + dir.string());
    const auto pub = read_file(dir / kPublicChainFile);
    const auto priv = read_file(dir / kPrivateChainFile);
    const auto ring = read_file(dir / kKeyringFile);
    if (!std::filesystem::is_directory(dir / kBlobDir)) throw Error(ErrorCode::NotFound, "missing blob directory");

    Evidence ev;
    ev.public_chain = ledger::load_jsonl(pub);
    ev.private_chain = ledger::load_jsonl(priv);
    try {
        auto j = json::parse(ring);
        for (const auto& k : j.at("keys")) {
            ledger::SessionKey key;
            auto secret = hex_decode(k.at("secret").get<std::string>());
            if (secret.size() != key.secret.size()) throw Error(ErrorCode::DecodeError, "key length");
            std::copy(secret.begin(), secret.end(), key.secret.begin());
            key.id = k.at("id").get<std::string>();
            if (key.id != ledger::key_id_for(key.secret)) throw Error(ErrorCode::DecodeError, "key id mismatch");
            ev.keys.add(key);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::DecodeError, std::string("keyring: ") + e.what());
    }
    ev.store = store::BlobStore::load_dir(dir / kBlobDir);
    return ev;
}

Bytes open_blob(const Evidence& ev, const store::Cid& cid) {
    if (!ev.store.contains(cid)) throw Error(ErrorCode::IncompleteEvidence, "missing blob " + cid.hex);
    return ev.keys.open(ev.store.get(cid));
}

std::string digest_hex(ByteView plaintext) { return sha256(plaintext).hex(); }

JobRecord read_job(const Evidence& ev) {
    using ledger::TxKind;
    JobRecord rec;
    bool have_manifest = false;
    auto expect_author = [](const ledger::Transaction& tx, const std::string& who) {
        if (tx.author != who) {
            throw Error(ErrorCode::DecodeError, std::string(ledger::to_string(tx.kind)) + " authored by " + tx.author +
                                                    " on behalf of " + who);
        }
    };
    try {
        for (const auto& block : ev.private_chain.blocks) {
            for (const auto& tx : block.body) {
                switch (tx.kind) {
                case TxKind::Genesis:
                case TxKind::KeyExchange:
                    break;
                case TxKind::TaskAnnounce:
                    if (have_manifest) throw Error(ErrorCode::DecodeError, "second job manifest");
                    rec.manifest = manifest_from_json(parse_json_bytes(tx.payload));
                    expect_author(tx, rec.manifest.client);
                    have_manifest = true;
                    break;
                case TxKind::TrainerRegister: {
                    auto e = enrollment_from_json(parse_json_bytes(tx.payload));
                    expect_author(tx, e.server);
                    rec.enrollments.push_back(std::move(e));
                    break;
                }
                case TxKind::ShardUpload:
                    shard_upload_from_json(parse_json_bytes(ev.keys.open(tx.payload)));
                    break;
                case TxKind::GradientUpload: {
                    auto g = gradient_upload_from_json(parse_json_bytes(ev.keys.open(tx.payload)));
                    expect_author(tx, g.trainer);
                    auto key = std::make_tuple(g.epoch, g.pipeline, g.trainer);
                    if (!rec.gradients.emplace(key, std::move(g)).second) throw Error(ErrorCode::DecodeError, "duplicate gradient upload");
                    break;
                }
                case TxKind::LocalModelUpload: {
                    auto l = local_upload_from_json(parse_json_bytes(ev.keys.open(tx.payload)));
                    expect_author(tx, l.pipeline);
                    auto key = std::make_pair(l.epoch, l.pipeline);
                    if (!rec.locals.emplace(key, std::move(l)).second) throw Error(ErrorCode::DecodeError, "duplicate local model");
                    break;
                }
                case TxKind::ValidationResult: {
                    auto v = robust::validation_from_json(parse_json_bytes(tx.payload));
                    expect_author(tx, v.validator);
                    auto key = std::make_pair(v.epoch, v.model_author);
                    if (!rec.validations.emplace(key, std::move(v)).second) throw Error(ErrorCode::DecodeError, "duplicate validation");
                    break;
                }
                case TxKind::DetectionReport: {
                    auto d = robust::detection_from_json(parse_json_bytes(tx.payload));
                    const auto epoch = d.epoch;
                    if (!rec.detections.emplace(epoch, std::move(d)).second) throw Error(ErrorCode::DecodeError, "duplicate detection");
                    break;
                }
                case TxKind::GlobalModelPublish: {
                    auto g = global_publish_from_json(parse_json_bytes(tx.payload));
                    const auto epoch = g.epoch;
                    if (!rec.globals.emplace(epoch, std::move(g)).second) throw Error(ErrorCode::DecodeError, "duplicate global model");
                    break;
                }
                case TxKind::RewardClaim:
                    rec.claims.push_back(reward_claim_from_json(parse_json_bytes(tx.payload)));
                    break;
                default:
                    throw Error(ErrorCode::DecodeError, "unexpected transaction kind on the private chain");
                }
            }
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::DecodeError, std::string("payload schema: ") + e.what());
    }
    if (!have_manifest) throw Error(ErrorCode::DecodeError, "private chain has no job manifest");
    return rec;
}

} // namespace tdml::evidence
