#include "uovn/instance_decoder.hpp"

#include <cmath>

namespace uovn {

namespace {

Tensor xavier(std::vector<int> shape, int fan_in, int fan_out, RandomStream& rng) {
    Tensor t(std::move(shape));
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-a, a));
    return t;
}

Tensor small_normal(std::vector<int> shape, RandomStream& rng, double sd = 0.02) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(sd * rng.normal());
    return t;
}

void declare_attention(ParamStore& store, const std::string& prefix, int d, RandomStream& rng) {
    store.declare(prefix + "q.w", xavier({d, d}, d, d, rng));
    store.declare(prefix + "q.b", Tensor({d}));
    store.declare(prefix + "k.w", xavier({d, d}, d, d, rng));
    store.declare(prefix + "k.b", Tensor({d}));
    store.declare(prefix + "v.w", xavier({d, d}, d, d, rng));
    store.declare(prefix + "v.b", Tensor({d}));
    store.declare(prefix + "out.w", xavier({d, d}, d, d, rng));
    store.declare(prefix + "out.b", Tensor({d}));
    store.declare(prefix + "ln.g", Tensor::full({d}, 1.0f));
    store.declare(prefix + "ln.b", Tensor({d}));
}

int decoder_layer_count(const InstanceDecoderConfig& cfg, int levels) { return cfg.rounds * (levels - 1); }

std::string layer_prefix(int layer) { return "insdec.layer" + std::to_string(layer) + "."; }

// Block-max (logical OR) downsampling of a binary mask.
std::vector<std::uint8_t> maxpool_mask(const std::vector<std::uint8_t>& mask, int h, int w, int oh, int ow) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(oh) * ow, 0);
    const int fy = h / oh, fx = w / ow;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (mask[static_cast<std::size_t>(y) * w + x]) {
                out[static_cast<std::size_t>(std::min(y / fy, oh - 1)) * ow + std::min(x / fx, ow - 1)] = 1;
            }
        }
    }
    return out;
}

}  // namespace

void init_instance_decoder_params(ParamStore& store, const InstanceDecoderConfig& cfg, RandomStream& rng,
                                  int levels) {
    const int d = cfg.d_f;
    if (cfg.heads < 1 || d % cfg.heads != 0) throw ConfigError("heads must divide d_f");
    store.declare("insdec.query_feat", small_normal({cfg.n_queries, d}, rng));
    store.declare("insdec.query_pos", small_normal({cfg.n_queries, d}, rng));
    const int layers = decoder_layer_count(cfg, levels);
    for (int i = 0; i < layers; ++i) {
        const std::string p = layer_prefix(i);
        declare_attention(store, p + "cross.", d, rng);
        declare_attention(store, p + "self.", d, rng);
        store.declare(p + "ffn.w1", xavier({d, 4 * d}, d, 4 * d, rng));
        store.declare(p + "ffn.b1", Tensor({4 * d}));
        store.declare(p + "ffn.w2", xavier({4 * d, d}, 4 * d, d, rng));
        store.declare(p + "ffn.b2", Tensor({d}));
        store.declare(p + "ffn.ln.g", Tensor::full({d}, 1.0f));
        store.declare(p + "ffn.ln.b", Tensor({d}));
    }
    store.declare("insdec.out_mlp.w1", xavier({d, d}, d, d, rng));
    store.declare("insdec.out_mlp.b1", Tensor({d}));
    store.declare("insdec.out_mlp.w2", xavier({d, d}, d, d, rng));
    store.declare("insdec.out_mlp.b2", Tensor({d}));
}

Value masked_cross_attention(BoundParams& params, const std::string& prefix, Value queries, Value kv_tokens,
                             const Tensor& kv_pos, const std::vector<std::uint8_t>& block_mask, int heads) {
    Graph& g = params.graph();
    const int n = queries.val().dim(0);
    const int d = queries.val().dim(1);
    const int t = kv_tokens.val().dim(0);
    if (kv_tokens.val().dim(1) != d) throw DimensionError("masked_cross_attention: width mismatch");
    if (!block_mask.empty() && static_cast<int>(block_mask.size()) != n * t) {
        throw DimensionError("masked_cross_attention: mask extent mismatch");
    }
    const int dh = d / heads;

    // Additive mask; fully blocked rows are cleared (attend everywhere).
    Tensor add_mask({n, t});
    if (!block_mask.empty()) {
        for (int i = 0; i < n; ++i) {
            bool all_blocked = true;
            for (int j = 0; j < t; ++j) {
                if (!block_mask[static_cast<std::size_t>(i) * t + j]) {
                    all_blocked = false;
                    break;
                }
            }
            if (all_blocked) continue;
            for (int j = 0; j < t; ++j) {
                if (block_mask[static_cast<std::size_t>(i) * t + j]) add_mask.at(i, j) = -1e9f;
            }
        }
    }

    Value kv_in = kv_pos.numel() ? add(kv_tokens, g.constant(kv_pos)) : kv_tokens;
    Value qp = linear_map(queries, params(prefix + "q.w"), params(prefix + "q.b"));
    Value kp = linear_map(kv_in, params(prefix + "k.w"), params(prefix + "k.b"));
    Value vp = linear_map(kv_tokens, params(prefix + "v.w"), params(prefix + "v.b"));
    Value mask_c = g.constant(add_mask);

    std::vector<Value> head_outputs;
    for (int hd = 0; hd < heads; ++hd) {
        Value qh = slice(qp, 1, hd * dh, (hd + 1) * dh);
        Value kh = slice(kp, 1, hd * dh, (hd + 1) * dh);
        Value vh = slice(vp, 1, hd * dh, (hd + 1) * dh);
        Value logits = scale(matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        Value attn = softmax(add(logits, mask_c), 1);
        head_outputs.push_back(matmul(attn, vh));
    }
    return linear_map(concat(1, head_outputs), params(prefix + "out.w"), params(prefix + "out.b"));
}

InstanceEmbeddings instance_decode(BoundParams& params, const DecodedPyramid& decoded,
                                   const InstanceDecoderConfig& cfg,
                                   const std::vector<std::vector<std::uint8_t>>* frozen_blocks) {
    Graph& g = params.graph();
    const int levels = static_cast<int>(decoded.levels.size());
    if (levels < 2) throw InputError("instance_decode needs at least two pyramid levels");
    const int d = cfg.d_f;
    const int n = cfg.n_queries;
    const auto [fh, fw] = decoded.sizes.back();
    Value finest_flat = reshape(decoded.levels.back(), {fh * fw, d});

    // Coarse-level kv token sets with positional encodings.
    std::vector<Value> kv_flat;
    std::vector<Tensor> kv_pos;
    for (int l = 0; l < levels - 1; ++l) {
        const auto [h, w] = decoded.sizes[static_cast<std::size_t>(l)];
        kv_flat.push_back(reshape(decoded.levels[static_cast<std::size_t>(l)], {h * w, d}));
        kv_pos.push_back(sinusoidal_positions({{h, w}}, d));
    }

    Value state = params("insdec.query_feat");
    Value query_pos = params("insdec.query_pos");

    InstanceEmbeddings out;
    auto mask_readout = [&](Value s) { return matmul(s, finest_flat, false, true); };  // [N, fh*fw]
    out.aux_mask_logits.push_back(mask_readout(state));

    const int layer_total = cfg.rounds * (levels - 1);
    for (int i = 0; i < layer_total; ++i) {
        const int l = i % (levels - 1);
        const auto [h, w] = decoded.sizes[static_cast<std::size_t>(l)];
        std::vector<std::uint8_t> block;
        if (frozen_blocks) {
            block = (*frozen_blocks)[static_cast<std::size_t>(i)];
        } else if (i > 0) {
            // Previous layer's prediction, thresholded at the finest level
            // and max-pooled onto this level; blocked where background.
            const Tensor& logits = out.aux_mask_logits.back().val();
            block.assign(static_cast<std::size_t>(n) * h * w, 0);
            for (int q = 0; q < n; ++q) {
                std::vector<std::uint8_t> fg(static_cast<std::size_t>(fh) * fw, 0);
                for (int p = 0; p < fh * fw; ++p) fg[static_cast<std::size_t>(p)] = logits.at(q, p) > 0.0f ? 1 : 0;
                const auto pooled = maxpool_mask(fg, fh, fw, h, w);
                for (int p = 0; p < h * w; ++p) {
                    block[static_cast<std::size_t>(q) * h * w + p] = pooled[static_cast<std::size_t>(p)] ? 0 : 1;
                }
            }
        }
        out.attn_blocks.push_back(block);
        const std::string p = layer_prefix(i);
        Value q_in = add(state, query_pos);
        Value cross = masked_cross_attention(params, p + "cross.", q_in, kv_flat[static_cast<std::size_t>(l)],
                                             kv_pos[static_cast<std::size_t>(l)], block, cfg.heads);
        state = layer_norm(add(state, cross), params(p + "cross.ln.g"), params(p + "cross.ln.b"));

        // Self-attention among queries.
        {
            Value x = add(state, query_pos);
            Value qp = linear_map(x, params(p + "self.q.w"), params(p + "self.q.b"));
            Value kp = linear_map(x, params(p + "self.k.w"), params(p + "self.k.b"));
            Value vp = linear_map(state, params(p + "self.v.w"), params(p + "self.v.b"));
            const int dh = d / cfg.heads;
            std::vector<Value> head_outputs;
            for (int hd = 0; hd < cfg.heads; ++hd) {
                Value qh = slice(qp, 1, hd * dh, (hd + 1) * dh);
                Value kh = slice(kp, 1, hd * dh, (hd + 1) * dh);
                Value vh = slice(vp, 1, hd * dh, (hd + 1) * dh);
                Value attn = softmax(scale(matmul(qh, kh, false, true), 1.0 / std::sqrt(static_cast<double>(dh))), 1);
                head_outputs.push_back(matmul(attn, vh));
            }
            Value sa = linear_map(concat(1, head_outputs), params(p + "self.out.w"), params(p + "self.out.b"));
            state = layer_norm(add(state, sa), params(p + "self.ln.g"), params(p + "self.ln.b"));
        }

        Value ffn = linear_map(gelu(linear_map(state, params(p + "ffn.w1"), params(p + "ffn.b1"))),
                               params(p + "ffn.w2"), params(p + "ffn.b2"));
        state = layer_norm(add(state, ffn), params(p + "ffn.ln.g"), params(p + "ffn.ln.b"));
        out.aux_mask_logits.push_back(mask_readout(state));
    }

    out.embeddings = linear_map(gelu(linear_map(state, params("insdec.out_mlp.w1"), params("insdec.out_mlp.b1"))),
                                params("insdec.out_mlp.w2"), params("insdec.out_mlp.b2"));
    (void)g;
    return out;
}

}  // namespace uovn
