#include "uovn/mmda.hpp"

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

std::string layer_prefix(int layer) { return "pixdec.layer" + std::to_string(layer) + "."; }

// [rows, D] tensor whose every row equals `row_vec` ([D] or [1,D]).
Value broadcast_rows(Value row_vec, int rows) {
    Graph& g = *row_vec.graph;
    const int d = static_cast<int>(row_vec.val().numel());
    Value row = reshape(row_vec, {1, d});
    Value ones = g.constant(Tensor::full({rows, 1}, 1.0f));
    return matmul(ones, row);
}

}  // namespace

void init_pixel_decoder_params(ParamStore& store, const MMDAConfig& cfg, const std::vector<int>& level_widths,
                               RandomStream& rng) {
    const int d = cfg.d_f;
    const int levels = static_cast<int>(level_widths.size());
    if (cfg.heads < 1 || d % cfg.heads != 0) throw ConfigError("heads must divide d_f");
    if (cfg.k < 1) throw ConfigError("k must be >= 1");
    for (int l = 0; l < levels; ++l) {
        const int cl = level_widths[static_cast<std::size_t>(l)];
        store.declare("pixdec.proj.level" + std::to_string(l) + ".w", xavier({cl, d}, cl, d, rng));
        store.declare("pixdec.proj.level" + std::to_string(l) + ".b", Tensor({d}));
    }
    store.declare("pixdec.level_embed", small_normal({levels, d}, rng));
    for (int i = 0; i < cfg.layers; ++i) {
        const std::string p = layer_prefix(i);
        // Offset and attention-logit heads start at zero: the first pass
        // samples exactly at the reference points with uniform attention.
        store.declare(p + "offset.w", Tensor({2 * d, cfg.heads * levels * cfg.k * 2}));
        store.declare(p + "offset.b", Tensor({cfg.heads * levels * cfg.k * 2}));
        store.declare(p + "val_vis.w", xavier({d, d}, d, d, rng));
        store.declare(p + "val_vis.b", Tensor({d}));
        store.declare(p + "val_lang.w", xavier({d, d}, d, d, rng));
        store.declare(p + "val_lang.b", Tensor({d}));
        store.declare(p + "attn_vis.w", Tensor({2 * d, cfg.heads * levels * cfg.k}));
        store.declare(p + "attn_vis.b", Tensor({cfg.heads * levels * cfg.k}));
        store.declare(p + "attn_lang.w", Tensor({2 * d, d}));
        store.declare(p + "attn_lang.b", Tensor({d}));
        store.declare(p + "out.w", xavier({d, d}, d, d, rng));
        store.declare(p + "out.b", Tensor({d}));
        store.declare(p + "ln1.g", Tensor::full({d}, 1.0f));
        store.declare(p + "ln1.b", Tensor({d}));
        store.declare(p + "ffn.w1", xavier({d, 4 * d}, d, 4 * d, rng));
        store.declare(p + "ffn.b1", Tensor({4 * d}));
        store.declare(p + "ffn.w2", xavier({4 * d, d}, 4 * d, d, rng));
        store.declare(p + "ffn.b2", Tensor({d}));
        store.declare(p + "ln2.g", Tensor::full({d}, 1.0f));
        store.declare(p + "ln2.b", Tensor({d}));
    }
}

Tensor sinusoidal_positions(const std::vector<std::array<int, 2>>& sizes, int d_model) {
    if (d_model % 4 != 0) throw ConfigError("positional encoding needs d_f divisible by 4");
    int total = 0;
    for (const auto& s : sizes) total += s[0] * s[1];
    Tensor pe({total, d_model});
    const int half = d_model / 2;
    int row = 0;
    for (const auto& s : sizes) {
        const int h = s[0], w = s[1];
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x, ++row) {
                const double xn = (x + 0.5) / w;
                const double yn = (y + 0.5) / h;
                for (int k = 0; k < half / 2; ++k) {
                    const double freq = 6.283185307179586 / std::pow(10000.0, (2.0 * k) / half);
                    pe.at(row, 2 * k) = static_cast<float>(std::sin(xn * freq));
                    pe.at(row, 2 * k + 1) = static_cast<float>(std::cos(xn * freq));
                    pe.at(row, half + 2 * k) = static_cast<float>(std::sin(yn * freq));
                    pe.at(row, half + 2 * k + 1) = static_cast<float>(std::cos(yn * freq));
                }
            }
        }
    }
    return pe;
}

TokenGrids project_pyramid(BoundParams& params, const PyramidValues& pyr, const MMDAConfig& cfg) {
    Graph& g = params.graph();
    const int levels = static_cast<int>(pyr.levels.size());
    TokenGrids grids;
    std::vector<Value> parts;
    int total = 0;
    for (int l = 0; l < levels; ++l) {
        const Tensor& lv = pyr.levels[static_cast<std::size_t>(l)].val();
        grids.sizes.push_back({lv.dim(0), lv.dim(1)});
        grids.offsets.push_back(total);
        total += lv.dim(0) * lv.dim(1);
    }
    const Tensor pe = sinusoidal_positions(grids.sizes, cfg.d_f);
    for (int l = 0; l < levels; ++l) {
        const Tensor& lv = pyr.levels[static_cast<std::size_t>(l)].val();
        const int hw = lv.dim(0) * lv.dim(1);
        Value flat = reshape(pyr.levels[static_cast<std::size_t>(l)], {hw, lv.dim(2)});
        Value proj = linear_map(flat, params("pixdec.proj.level" + std::to_string(l) + ".w"),
                                params("pixdec.proj.level" + std::to_string(l) + ".b"));
        Value pos = g.constant(Tensor({hw, cfg.d_f},
                                      std::vector<float>(pe.data() + static_cast<std::size_t>(grids.offsets[static_cast<std::size_t>(l)]) * cfg.d_f,
                                                         pe.data() + (static_cast<std::size_t>(grids.offsets[static_cast<std::size_t>(l)]) + hw) * cfg.d_f)));
        Value le = slice(params("pixdec.level_embed"), 0, l, l + 1);
        proj = add(add(proj, pos), broadcast_rows(le, hw));
        parts.push_back(proj);
    }
    grids.tokens = concat(0, parts);
    grids.ref_norm = Tensor({total, 2});
    int row = 0;
    for (int l = 0; l < levels; ++l) {
        const auto [h, w] = grids.sizes[static_cast<std::size_t>(l)];
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x, ++row) {
                grids.ref_norm.at(row, 0) = static_cast<float>((x + 0.5) / w);
                grids.ref_norm.at(row, 1) = static_cast<float>((y + 0.5) / h);
            }
        }
    }
    return grids;
}

Value predict_offsets(BoundParams& params, int layer, Value token_lang_cat) {
    const std::string p = layer_prefix(layer);
    return linear_map(token_lang_cat, params(p + "offset.w"), params(p + "offset.b"));
}

Value mmda_attention(BoundParams& params, int layer, const TokenGrids& grids, Value tokens,
                     const QueryFeatureValues& queries, Value pooled_lang, const MMDAConfig& cfg, MMDADiag* diag) {
    Graph& g = params.graph();
    const int t_total = tokens.val().dim(0);
    const int d = cfg.d_f;
    const int levels = static_cast<int>(grids.sizes.size());
    const int heads = cfg.heads;
    const int dh = d / heads;
    const int k = cfg.k;
    const int c = queries.rows.val().dim(0);
    if (c < 1) throw InputError("mmda_attention requires at least one language query");
    const std::string p = layer_prefix(layer);

    Value cat = concat(1, {tokens, broadcast_rows(pooled_lang, t_total)});
    // Raw offsets are in cell units of each level: adding them to the
    // reference point expressed in that level's pixel coordinates realizes
    // the per-level grid-extent normalization.
    Value offsets = reshape(predict_offsets(params, layer, cat), {t_total, heads, levels, k * 2});

    // Per-level value maps at width d, reshaped back onto their grids.
    std::vector<Value> value_maps;
    for (int l = 0; l < levels; ++l) {
        const auto [h, w] = grids.sizes[static_cast<std::size_t>(l)];
        Value tok_l = slice(tokens, 0, grids.offsets[static_cast<std::size_t>(l)],
                            grids.offsets[static_cast<std::size_t>(l)] + h * w);
        Value vmap = linear_map(tok_l, params(p + "val_vis.w"), params(p + "val_vis.b"));
        value_maps.push_back(reshape(vmap, {h, w, d}));
    }
    Value lang_values = linear_map(queries.rows, params(p + "val_lang.w"), params(p + "val_lang.b"));

    Value vis_logits_all = linear_map(cat, params(p + "attn_vis.w"), params(p + "attn_vis.b"));
    Value lang_query_all = linear_map(cat, params(p + "attn_lang.w"), params(p + "attn_lang.b"));

    // Reference points of every token in each level's pixel coordinates,
    // repeated K times.
    std::vector<Tensor> ref_pix(static_cast<std::size_t>(levels));
    for (int l = 0; l < levels; ++l) {
        const auto [h, w] = grids.sizes[static_cast<std::size_t>(l)];
        Tensor rp({t_total * k, 2});
        for (int tt = 0; tt < t_total; ++tt) {
            const double px = grids.ref_norm.at(tt, 0) * w - 0.5;
            const double py = grids.ref_norm.at(tt, 1) * h - 0.5;
            for (int kk = 0; kk < k; ++kk) {
                rp.at(tt * k + kk, 0) = static_cast<float>(px);
                rp.at(tt * k + kk, 1) = static_cast<float>(py);
            }
        }
        ref_pix[static_cast<std::size_t>(l)] = std::move(rp);
    }

    if (diag) {
        diag->attention.emplace_back();
        diag->sampled.emplace_back();
        diag->points.emplace_back();
        diag->lang_values.emplace_back();
    }

    std::vector<Value> head_outputs;
    for (int hd = 0; hd < heads; ++hd) {
        if (diag) {
            diag->sampled.back().emplace_back();
            diag->points.back().emplace_back();
        }
        Value lv_h = slice(lang_values, 1, hd * dh, (hd + 1) * dh);  // [C, dh]
        if (diag) diag->lang_values.back().push_back(lv_h);
        std::vector<Value> level_samples;
        for (int l = 0; l < levels; ++l) {
            Value off_hl = slice(slice(offsets, 1, hd, hd + 1), 2, l, l + 1);  // [T,1,1,K*2]
            Value pts = add(g.constant(ref_pix[static_cast<std::size_t>(l)]), reshape(off_hl, {t_total * k, 2}));
            Value map_h = slice(value_maps[static_cast<std::size_t>(l)], 2, hd * dh, (hd + 1) * dh);
            Value sampled = bilinear_sample(map_h, pts);  // [T*K, dh]
            if (diag) {
                diag->sampled.back().back().push_back(sampled);
                diag->points.back().back().push_back(pts);
            }
            level_samples.push_back(reshape(sampled, {t_total, k, dh}));
        }
        Value vals_h = concat(1, level_samples);  // [T, K*L, dh]
        Value vis_logits_h = slice(vis_logits_all, 1, hd * levels * k, (hd + 1) * levels * k);
        Value lang_q_h = slice(lang_query_all, 1, hd * dh, (hd + 1) * dh);
        Value lang_logits_h = scale(matmul(lang_q_h, lv_h, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
        Value attn = softmax(concat(1, {vis_logits_h, lang_logits_h}), 1);  // [T, K*L + C]
        if (diag) diag->attention.back().push_back(attn);
        Value w_vis = slice(attn, 1, 0, levels * k);
        Value w_lang = slice(attn, 1, levels * k, levels * k + c);
        Value out_h = add(group_weighted_sum(w_vis, vals_h), matmul(w_lang, lv_h));
        head_outputs.push_back(out_h);
    }
    Value merged_in = concat(1, head_outputs);
    if (diag) diag->merged_heads.push_back(merged_in);
    Value merged = linear_map(merged_in, params(p + "out.w"), params(p + "out.b"));
    Value x = layer_norm(add(tokens, merged), params(p + "ln1.g"), params(p + "ln1.b"));
    Value ffn = linear_map(gelu(linear_map(x, params(p + "ffn.w1"), params(p + "ffn.b1"))), params(p + "ffn.w2"),
                           params(p + "ffn.b2"));
    return layer_norm(add(x, ffn), params(p + "ln2.g"), params(p + "ln2.b"));
}

DecodedPyramid pixel_decode(BoundParams& params, const PyramidValues& pyr, const QueryFeatureValues& queries,
                            const MMDAConfig& cfg, MMDADiag* diag) {
    TokenGrids grids = project_pyramid(params, pyr, cfg);
    Value tokens = grids.tokens;
    Value pooled = queries.pooled;
    for (int i = 0; i < cfg.layers; ++i) {
        tokens = mmda_attention(params, i, grids, tokens, queries, pooled, cfg, diag);
    }
    DecodedPyramid out;
    out.sizes = grids.sizes;
    for (std::size_t l = 0; l < grids.sizes.size(); ++l) {
        const auto [h, w] = grids.sizes[l];
        Value lv = slice(tokens, 0, grids.offsets[l], grids.offsets[l] + h * w);
        out.levels.push_back(reshape(lv, {h, w, cfg.d_f}));
    }
    return out;
}

}  // namespace uovn
