#include "tdml/scenario.hpp"

#include "tdml/error.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace tdml::sim {

std::string_view to_string(Mode m) {
    switch (m) {
    case Mode::SingleNode: return "single_node";
    case Mode::FedAvg: return "fedavg";
    case Mode::Tdml: return "tdml";
    }
    return "unknown";
}

std::optional<Mode> parse_mode(std::string_view name) {
    if (name == "single_node") return Mode::SingleNode;
    if (name == "fedavg") return Mode::FedAvg;
    if (name == "tdml") return Mode::Tdml;
    return std::nullopt;
}

namespace {

using json = nlohmann::json;

void check_keys(const json& j, std::string_view where, std::initializer_list<std::string_view> allowed) {
    if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, std::string(where) + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + std::string(where));
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

pipeline::NodeSpec parse_node(const json& j, std::string_view where, std::string* server = nullptr) {
    if (server != nullptr) {
        check_keys(j, where, {"uuid", "server", "memory_bytes", "compute_score", "cpus", "address"});
        read(j, "server", *server);
    } else {
        check_keys(j, where, {"uuid", "memory_bytes", "compute_score", "cpus", "address"});
    }
    pipeline::NodeSpec n;
    n.uuid = j.at("uuid").get<std::string>();
    read(j, "memory_bytes", n.memory_bytes);
    read(j, "compute_score", n.compute_score);
    read(j, "cpus", n.cpus);
    read(j, "address", n.address);
    return n;
}

json node_json(const pipeline::NodeSpec& n) {
    json j = {{"uuid", n.uuid}, {"memory_bytes", n.memory_bytes}, {"compute_score", n.compute_score}, {"cpus", n.cpus}};
    if (!n.address.empty()) j["address"] = n.address;
    return j;
}

Scenario parse_json(const json& j) {
    check_keys(j, "scenario", {"task", "mode", "seed", "out", "client", "budget", "baseline", "model", "data",
                               "training", "robust", "rewards", "servers", "trainers", "attacks", "lies"});
    Scenario s;
    read(j, "task", s.task);
    if (j.contains("mode")) {
        auto m = parse_mode(j.at("mode").get<std::string>());
        if (!m) throw Error(ErrorCode::InvalidConfig, "mode must be single_node, fedavg or tdml");
        s.mode = *m;
    }
    read(j, "seed", s.seed);
    read(j, "out", s.out);
    read(j, "client", s.client);
    read(j, "budget", s.budget);
    if (j.contains("baseline")) {
        const auto& b = j.at("baseline");
        check_keys(b, "baseline", {"min_memory_bytes", "min_cpus"});
        read(b, "min_memory_bytes", s.baseline.min_memory_bytes);
        read(b, "min_cpus", s.baseline.min_cpus);
    }
    const auto& m = j.at("model");
    check_keys(m, "model", {"layers", "precision_bytes"});
    s.arch.dims = m.at("layers").get<std::vector<std::size_t>>();
    read(m, "precision_bytes", s.arch.precision_bytes);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, "data", {"train", "test", "dim", "classes", "separation"});
        read(d, "train", s.data.n_train);
        read(d, "test", s.data.n_test);
        read(d, "separation", s.data.separation);
        s.data.dim = d.contains("dim") ? d.at("dim").get<std::uint32_t>() : static_cast<std::uint32_t>(s.arch.dims.front());
        s.data.classes = d.contains("classes") ? d.at("classes").get<std::uint32_t>()
                                               : static_cast<std::uint32_t>(s.arch.dims.back());
    } else if (!s.arch.dims.empty()) {
        s.data.dim = static_cast<std::uint32_t>(s.arch.dims.front());
        s.data.classes = static_cast<std::uint32_t>(s.arch.dims.back());
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        check_keys(t, "training", {"epochs", "pipelines", "batch_size", "lr", "top_k"});
        read(t, "epochs", s.training.epochs);
        read(t, "pipelines", s.training.pipelines);
        read(t, "batch_size", s.training.batch_size);
        read(t, "lr", s.training.lr);
        read(t, "top_k", s.training.top_k);
    }
    if (j.contains("robust")) {
        const auto& r = j.at("robust");
        check_keys(r, "robust", {"flag_tau", "flag_min_gap", "min_separation", "detection_sample"});
        read(r, "flag_tau", s.flag.tau);
        read(r, "flag_min_gap", s.flag.min_gap);
        read(r, "min_separation", s.detection.min_separation);
        read(r, "detection_sample", s.detection_sample);
    }
    if (j.contains("rewards")) {
        const auto& r = j.at("rewards");
        check_keys(r, "rewards", {"trainer_share"});
        read(r, "trainer_share", s.trainer_share);
    }
    if (j.contains("servers")) {
        for (const auto& n : j.at("servers")) s.servers.push_back(parse_node(n, "servers[]"));
    }
    if (j.contains("trainers")) {
        for (const auto& n : j.at("trainers")) {
            TrainerEntry t;
            t.spec = parse_node(n, "trainers[]", &t.server);
            s.trainers.push_back(std::move(t));
        }
    }
    if (j.contains("attacks")) {
        for (const auto& a : j.at("attacks")) {
            check_keys(a, "attacks[]", {"kind", "target", "delta", "sigma2", "start_epoch"});
            robust::AttackConfig c;
            auto kind = robust::parse_attack(a.at("kind").get<std::string>());
            if (!kind) throw Error(ErrorCode::InvalidConfig, "attack kind must be zero_gradient, mean_shift or gaussian");
            c.kind = *kind;
            c.target = a.at("target").get<std::string>();
            read(a, "delta", c.delta);
            read(a, "sigma2", c.sigma2);
            read(a, "start_epoch", c.start_epoch);
            s.attacks.push_back(std::move(c));
        }
    }
    if (j.contains("lies")) {
        for (const auto& l : j.at("lies")) {
            check_keys(l, "lies[]", {"validator", "epoch", "model", "accuracy"});
            ValidationLie lie;
            lie.validator = l.at("validator").get<std::string>();
            lie.epoch = l.at("epoch").get<std::uint64_t>();
            lie.model = l.at("model").get<std::string>();
            lie.accuracy = l.at("accuracy").get<double>();
            s.lies.push_back(std::move(lie));
        }
    }
    s.training.seed = s.seed;
    return s;
}

} // namespace

void Scenario::validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
    arch.validate();
    training.validate();
    if (mode == Mode::SingleNode && training.pipelines != 1) fail("single_node mode runs exactly one pipeline");
    if (budget == 0) fail("budget must be positive");
    if (!(trainer_share >= 0.0 && trainer_share <= 1.0)) fail("trainer_share must lie in [0, 1]");
    if (data.dim != arch.dims.front()) fail("data.dim does not match the model input width");
    if (data.classes != arch.dims.back()) fail("data.classes does not match the model output width");
    if (data.classes < 2) fail("need at least two classes");
    if (data.n_train == 0 || data.n_test == 0) fail("train and test sets must be non-empty");
    if (client.empty()) fail("client uuid missing");
    if (!(flag.tau >= 0.0)) fail("flag_tau must be non-negative");

    std::set<std::string> ids{client};
    std::set<std::string> server_ids;
    for (const auto& s : servers) {
        if (s.uuid.empty() || !ids.insert(s.uuid).second) fail("duplicate or empty uuid '" + s.uuid + "'");
        server_ids.insert(s.uuid);
    }
    std::set<std::string> trainer_ids;
    for (const auto& t : trainers) {
        if (t.spec.uuid.empty() || !ids.insert(t.spec.uuid).second) fail("duplicate or empty uuid '" + t.spec.uuid + "'");
        if (!t.server.empty() && !server_ids.contains(t.server)) fail("trainer " + t.spec.uuid + " names unknown server " + t.server);
        trainer_ids.insert(t.spec.uuid);
    }
    if (servers.size() < training.pipelines) fail("fewer servers than pipelines");
    std::set<std::string> attacked;
    for (const auto& a : attacks) {
        if (!trainer_ids.contains(a.target)) fail("attack targets unknown trainer " + a.target);
        if (!attacked.insert(a.target).second) fail("trainer " + a.target + " has more than one attack");
        if (a.kind == robust::AttackKind::MeanShift && a.delta == 0.0) fail("mean_shift attack needs delta != 0");
        if (a.kind == robust::AttackKind::Gaussian && !(a.sigma2 > 0.0)) fail("gaussian attack needs sigma2 > 0");
        if (a.start_epoch < 1) fail("attack start_epoch must be >= 1");
    }
    for (const auto& l : lies) {
        if (!server_ids.contains(l.validator) || !server_ids.contains(l.model)) fail("lie references unknown server");
        if (l.epoch < 1 || l.epoch > training.epochs) fail("lie epoch out of range");
    }
}

Scenario parse_scenario(std::string_view text) {
    try {
        auto j = json::parse(text.begin(), text.end(), nullptr, true, true);
        auto s = parse_json(j);
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("scenario: ") + e.what());
    }
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::InvalidConfig, "cannot read scenario " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str());
}

json to_json(const Scenario& s) {
    json j;
    j["task"] = s.task;
    j["mode"] = std::string(to_string(s.mode));
    j["seed"] = s.seed;
    j["out"] = s.out;
    j["client"] = s.client;
    j["budget"] = s.budget;
    j["baseline"] = {{"min_memory_bytes", s.baseline.min_memory_bytes}, {"min_cpus", s.baseline.min_cpus}};
    j["model"] = {{"layers", s.arch.dims}, {"precision_bytes", s.arch.precision_bytes}};
    j["data"] = {{"train", s.data.n_train}, {"test", s.data.n_test}, {"dim", s.data.dim},
                 {"classes", s.data.classes}, {"separation", s.data.separation}};
    j["training"] = {{"epochs", s.training.epochs}, {"pipelines", s.training.pipelines},
                     {"batch_size", s.training.batch_size}, {"lr", s.training.lr}, {"top_k", s.training.top_k}};
    j["robust"] = {{"flag_tau", s.flag.tau}, {"flag_min_gap", s.flag.min_gap},
                   {"min_separation", s.detection.min_separation}, {"detection_sample", s.detection_sample}};
    j["rewards"] = {{"trainer_share", s.trainer_share}};
    j["servers"] = json::array();
    for (const auto& n : s.servers) j["servers"].push_back(node_json(n));
    j["trainers"] = json::array();
    for (const auto& t : s.trainers) {
        auto n = node_json(t.spec);
        if (!t.server.empty()) n["server"] = t.server;
        j["trainers"].push_back(std::move(n));
    }
    j["attacks"] = json::array();
    for (const auto& a : s.attacks) {
        j["attacks"].push_back({{"kind", std::string(robust::to_string(a.kind))}, {"target", a.target},
                                {"delta", a.delta}, {"sigma2", a.sigma2}, {"start_epoch", a.start_epoch}});
    }
    j["lies"] = json::array();
    for (const auto& l : s.lies) {
        j["lies"].push_back({{"validator", l.validator}, {"epoch", l.epoch}, {"model", l.model}, {"accuracy", l.accuracy}});
    }
    return j;
}

} // namespace tdml::sim
