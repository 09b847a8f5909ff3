#include "uovn/encoders.hpp"

#include <cctype>
#include <cmath>

namespace uovn {

namespace {

Tensor xavier(std::vector<int> shape, int fan_in, int fan_out, RandomStream& rng) {
    Tensor t(std::move(shape));
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-a, a));
    return t;
}

}  // namespace

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, RandomStream& rng) {
    if (cfg.stage_channels.size() != 4) throw ConfigError("encoder expects 4 stage channel widths");
    int cin = 3;
    for (int s = 0; s < 4; ++s) {
        const int cout = cfg.stage_channels[static_cast<std::size_t>(s)];
        const int k = s == 0 ? 4 : 2;
        store.declare("enc.stage" + std::to_string(s + 1) + ".w",
                      xavier({k, k, cin, cout}, k * k * cin, cout, rng));
        store.declare("enc.stage" + std::to_string(s + 1) + ".b", Tensor({cout}));
        cin = cout;
    }
    store.declare("text.proj.w", xavier({cfg.text_embed_dim, cfg.d_f}, cfg.text_embed_dim, cfg.d_f, rng));
    store.declare("text.proj.b", Tensor({cfg.d_f}));
}

PyramidValues encode_image(BoundParams& params, const Tensor& image, const EncoderConfig& cfg) {
    if (image.rank() != 3 || image.dim(2) != 3) throw InputError("image must be [H,W,3]");
    const int h = image.dim(0), w = image.dim(1);
    if (h % 32 != 0 || w % 32 != 0) {
        throw InputError("image extents must be multiples of 32, got " + std::to_string(h) + "x" + std::to_string(w));
    }
    Graph& g = params.graph();
    Value x = g.constant(image);
    std::vector<Value> fine_to_coarse;
    for (int s = 0; s < 4; ++s) {
        const int stride = s == 0 ? 4 : 2;
        x = conv2d(x, params("enc.stage" + std::to_string(s + 1) + ".w"),
                   params("enc.stage" + std::to_string(s + 1) + ".b"), stride);
        x = gelu(x);
        fine_to_coarse.push_back(x);
    }
    PyramidValues pyr;
    pyr.strides = {32, 16, 8, 4};
    for (int s = 3; s >= 0; --s) pyr.levels.push_back(fine_to_coarse[static_cast<std::size_t>(s)]);
    return pyr;
}

std::vector<std::string> tokenize(const std::string& query) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char c : query) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
        if (tokens.size() == 16) return tokens;
    }
    if (!cur.empty() && tokens.size() < 16) tokens.push_back(cur);
    return tokens;
}

Tensor build_frozen_vocab(const EncoderConfig& cfg) {
    RandomStream rng(cfg.vocab_seed);
    Tensor table({cfg.text_table_rows, cfg.text_embed_dim});
    for (std::int64_t i = 0; i < table.numel(); ++i) table[i] = static_cast<float>(rng.normal());
    return table;
}

Tensor frozen_query_embeddings(const std::vector<std::string>& queries, const Tensor& vocab) {
    if (queries.empty()) throw InputError("at least one query required");
    const int rows = vocab.dim(0), dim = vocab.dim(1);
    Tensor out({static_cast<int>(queries.size()), dim});
    for (std::size_t q = 0; q < queries.size(); ++q) {
        const auto tokens = tokenize(queries[q]);
        if (tokens.empty()) throw InputError("query is empty after tokenization: \"" + queries[q] + "\"");
        for (const auto& tok : tokens) {
            const int row = static_cast<int>(fnv1a64(tok) % static_cast<std::uint64_t>(rows));
            for (int d = 0; d < dim; ++d) out.at(static_cast<int>(q), d) += vocab.at(row, d);
        }
        for (int d = 0; d < dim; ++d) out.at(static_cast<int>(q), d) /= static_cast<float>(tokens.size());
    }
    return out;
}

QueryFeatureValues encode_queries(BoundParams& params, const std::vector<std::string>& queries, const Tensor& vocab,
                                  const EncoderConfig& cfg) {
    (void)cfg;
    Graph& g = params.graph();
    const Tensor frozen = frozen_query_embeddings(queries, vocab);
    Value rows = linear_map(g.constant(frozen), params("text.proj.w"), params("text.proj.b"));
    rows = l2_normalize_rows(rows);
    QueryFeatureValues out;
    out.rows = rows;
    out.pooled = mean_rows(rows);
    return out;
}

std::string apply_prompt(const std::string& query) { return "A photo of a " + query; }

Value pool_queries(const QueryFeatureValues& f) { return mean_rows(f.rows); }

}  // namespace uovn
