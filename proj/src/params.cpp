#include "uovn/params.hpp"

#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace uovn {

Param& ParamStore::declare(const std::string& name, Tensor init, bool trainable) {
    auto [it, inserted] = params_.try_emplace(name, Param{std::move(init), trainable});
    if (!inserted) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
}

Param& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

Value BoundParams::operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Param& p = store_->get(name);
    const Value v = graph_->leaf(p.value, with_grads_ && p.trainable);
    bound_.emplace(name, v);
    return v;
}

void save_checkpoint(const std::string& dir, const ParamStore& params, const std::map<std::string, Tensor>& extra,
                     std::int64_t step, const std::string& config_hash, const std::string& config_json) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::json meta;
    meta["step"] = step;
    meta["config_hash"] = config_hash;
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, p] : params.all()) {
        write_tensor((fs::path(dir) / (name + ".uovt")).string(), p.value);
        names.push_back(name);
    }
    nlohmann::json extras = nlohmann::json::array();
    for (const auto& [name, t] : extra) {
        write_tensor((fs::path(dir) / (name + ".uovt")).string(), t);
        extras.push_back(name);
    }
    meta["params"] = names;
    meta["extra"] = extras;
    {
        std::ofstream os(fs::path(dir) / "meta.json");
        if (!os) throw IoError("cannot write meta.json in " + dir);
        os << meta.dump(2) << "\n";
    }
    if (!config_json.empty()) {
        std::ofstream os(fs::path(dir) / "config.json");
        if (!os) throw IoError("cannot write config.json in " + dir);
        os << config_json << "\n";
    }
}

Checkpoint load_checkpoint(const std::string& dir) {
    const fs::path meta_path = fs::path(dir) / "meta.json";
    std::ifstream is(meta_path);
    if (!is) throw IoError("missing checkpoint meta: " + meta_path.string());
    nlohmann::json meta;
    try {
        is >> meta;
    } catch (const std::exception& e) {
        throw IoError("malformed meta.json in " + dir + ": " + e.what());
    }
    Checkpoint ck;
    ck.step = meta.at("step").get<std::int64_t>();
    ck.config_hash = meta.at("config_hash").get<std::string>();
    for (const auto& name : meta.at("params")) {
        const std::string n = name.get<std::string>();
        ck.tensors.emplace(n, read_tensor((fs::path(dir) / (n + ".uovt")).string()));
    }
    if (meta.contains("extra")) {
        for (const auto& name : meta.at("extra")) {
            const std::string n = name.get<std::string>();
            ck.extra.emplace(n, read_tensor((fs::path(dir) / (n + ".uovt")).string()));
        }
    }
    const fs::path cfg_path = fs::path(dir) / "config.json";
    if (fs::exists(cfg_path)) {
        std::ifstream cs(cfg_path);
        std::string line, all;
        while (std::getline(cs, line)) all += line + "\n";
        ck.config_json = all;
    }
    return ck;
}

}  // namespace uovn
