#include "uovn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace uovn {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (allowed.count(it.key()) == 0) {
            throw ConfigError("unknown config key \"" + scope + it.key() + "\"");
        }
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& slot) {
    if (j.contains(key)) slot = j.at(key).get<T>();
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig cfg;
    reject_unknown(j, {"model", "loss", "optim", "data", "eval"}, "");
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m,
                       {"d_f", "k", "levels", "n_queries", "heads", "pixel_layers", "decoder_rounds", "enc_channels",
                        "text_table_rows", "text_embed_dim", "vocab_seed", "aux_losses"},
                       "model.");
        maybe(m, "d_f", cfg.model.d_f);
        maybe(m, "k", cfg.model.k);
        maybe(m, "levels", cfg.model.levels);
        maybe(m, "n_queries", cfg.model.n_queries);
        maybe(m, "heads", cfg.model.heads);
        maybe(m, "pixel_layers", cfg.model.pixel_layers);
        maybe(m, "decoder_rounds", cfg.model.decoder_rounds);
        maybe(m, "enc_channels", cfg.model.enc_channels);
        maybe(m, "text_table_rows", cfg.model.text_table_rows);
        maybe(m, "text_embed_dim", cfg.model.text_embed_dim);
        maybe(m, "vocab_seed", cfg.model.vocab_seed);
        maybe(m, "aux_losses", cfg.model.aux_losses);
    }
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        reject_unknown(l, {"lambda1", "lambda2", "lambda3", "lambda4"}, "loss.");
        maybe(l, "lambda1", cfg.loss.l1);
        maybe(l, "lambda2", cfg.loss.l2);
        maybe(l, "lambda3", cfg.loss.l3);
        maybe(l, "lambda4", cfg.loss.l4);
    }
    if (j.contains("optim")) {
        const json& o = j.at("optim");
        reject_unknown(o, {"step_size", "steps", "seed", "clip_norm", "momentum", "checkpoint_every"}, "optim.");
        maybe(o, "step_size", cfg.optim.step_size);
        maybe(o, "steps", cfg.optim.steps);
        maybe(o, "seed", cfg.optim.seed);
        maybe(o, "clip_norm", cfg.optim.clip_norm);
        maybe(o, "momentum", cfg.optim.momentum);
        maybe(o, "checkpoint_every", cfg.optim.checkpoint_every);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, {"train_paths", "generate"}, "data.");
        maybe(d, "train_paths", cfg.data.train_paths);
        if (d.contains("generate")) {
            const json& g = d.at("generate");
            reject_unknown(g, {"domains", "samples_per_domain", "image_size", "seed"}, "data.generate.");
            cfg.data.generate = true;
            maybe(g, "domains", cfg.data.gen_domains);
            maybe(g, "samples_per_domain", cfg.data.samples_per_domain);
            maybe(g, "image_size", cfg.data.image_size);
            maybe(g, "seed", cfg.data.gen_seed);
        }
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        reject_unknown(e, {"tasks"}, "eval.");
        maybe(e, "tasks", cfg.eval_tasks);
    }
    validate_run_config(cfg);
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str());
}

void validate_run_config(const RunConfig& cfg) {
    const auto& m = cfg.model;
    if (m.levels != 4) throw ConfigError("levels must be 4 (the encoder stub has four stages)");
    if (m.d_f < 4 || m.d_f % 4 != 0) throw ConfigError("d_f must be a positive multiple of 4");
    if (m.heads < 1 || m.d_f % m.heads != 0) throw ConfigError("heads must divide d_f");
    if (m.k < 1) throw ConfigError("k must be >= 1");
    if (m.n_queries < 1) throw ConfigError("n_queries must be >= 1");
    if (m.pixel_layers < 0) throw ConfigError("pixel_layers must be >= 0");
    if (m.decoder_rounds < 1) throw ConfigError("decoder_rounds must be >= 1");
    if (m.enc_channels.size() != 4) throw ConfigError("enc_channels must list four stage widths");
    if (m.text_table_rows < 1 || m.text_embed_dim < 1) throw ConfigError("text table dims must be positive");
    if (cfg.loss.l1 < 0 || cfg.loss.l2 < 0 || cfg.loss.l3 < 0 || cfg.loss.l4 < 0) {
        throw ConfigError("loss weights must be nonnegative");
    }
    if (cfg.optim.steps < 0 || cfg.optim.step_size <= 0) throw ConfigError("bad optimizer settings");
    if (cfg.optim.checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
    for (const auto& t : cfg.eval_tasks) {
        if (t != "det" && t != "ins" && t != "sem" && t != "pan") throw ConfigError("unknown eval task: " + t);
    }
    if (cfg.data.generate) {
        if (cfg.data.gen_domains.empty()) throw ConfigError("data.generate.domains must be non-empty");
        if (cfg.data.image_size % 32 != 0) throw ConfigError("image_size must be a multiple of 32");
        if (cfg.data.samples_per_domain < 1) throw ConfigError("samples_per_domain must be >= 1");
    }
}

std::string serialize_run_config(const RunConfig& cfg) {
    json j;
    j["model"] = {{"d_f", cfg.model.d_f},
                  {"k", cfg.model.k},
                  {"levels", cfg.model.levels},
                  {"n_queries", cfg.model.n_queries},
                  {"heads", cfg.model.heads},
                  {"pixel_layers", cfg.model.pixel_layers},
                  {"decoder_rounds", cfg.model.decoder_rounds},
                  {"enc_channels", cfg.model.enc_channels},
                  {"text_table_rows", cfg.model.text_table_rows},
                  {"text_embed_dim", cfg.model.text_embed_dim},
                  {"vocab_seed", cfg.model.vocab_seed},
                  {"aux_losses", cfg.model.aux_losses}};
    j["loss"] = {{"lambda1", cfg.loss.l1}, {"lambda2", cfg.loss.l2}, {"lambda3", cfg.loss.l3}, {"lambda4", cfg.loss.l4}};
    j["optim"] = {{"step_size", cfg.optim.step_size}, {"steps", cfg.optim.steps},   {"seed", cfg.optim.seed},
                  {"clip_norm", cfg.optim.clip_norm}, {"momentum", cfg.optim.momentum},
                  {"checkpoint_every", cfg.optim.checkpoint_every}};
    json d;
    d["train_paths"] = cfg.data.train_paths;
    if (cfg.data.generate) {
        d["generate"] = {{"domains", cfg.data.gen_domains},
                         {"samples_per_domain", cfg.data.samples_per_domain},
                         {"image_size", cfg.data.image_size},
                         {"seed", cfg.data.gen_seed}};
    }
    j["data"] = d;
    j["eval"] = {{"tasks", cfg.eval_tasks}};
    return j.dump(2);
}

std::string run_config_hash(const RunConfig& cfg) {
    // Run-length knobs stay out of the hash so a finished run can be extended
    // (resume) without invalidating its checkpoints.
    RunConfig canon = cfg;
    canon.optim.steps = 0;
    canon.optim.checkpoint_every = 1;
    const std::uint64_t h = fnv1a64(serialize_run_config(canon));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace uovn
