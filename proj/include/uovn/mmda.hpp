#pragma once

#include "uovn/encoders.hpp"
#include "uovn/params.hpp"

namespace uovn {

struct MMDAConfig {
    int k = 4;       // sampling points per scale
    int heads = 8;   // must divide d_f
    int layers = 6;  // stacked attention layers
    int d_f = 256;
};

// Flattened multi-scale token sequence plus per-level geometry.
struct TokenGrids {
    Value tokens;                       // [T, D_F], levels concatenated coarse->fine
    std::vector<std::array<int, 2>> sizes;  // per level {H_l, W_l}
    std::vector<int> offsets;           // row offset of each level in `tokens`
    Tensor ref_norm;                    // [T,2] normalized (x,y) patch centers, constant
};

// Optional capture of attention internals for verification.
struct MMDADiag {
    // per layer, per head: attention rows [T, K*L + C]
    std::vector<std::vector<Value>> attention;
    // per layer, per head, per level: sampled features [T*K, d_head] and points [T*K, 2]
    std::vector<std::vector<std::vector<Value>>> sampled;
    std::vector<std::vector<std::vector<Value>>> points;
    // per layer: concatenated head outputs [T, D_F] before the output
    // projection and residual
    std::vector<Value> merged_heads;
    // per layer, per head: language value rows [C, d_head] (post Linear 3)
    std::vector<std::vector<Value>> lang_values;
};

struct DecodedPyramid {
    std::vector<Value> levels;  // [H_l, W_l, D_F], coarse->fine
    std::vector<std::array<int, 2>> sizes;
};

void init_pixel_decoder_params(ParamStore& store, const MMDAConfig& cfg, const std::vector<int>& level_widths,
                               RandomStream& rng);

// Fixed sinusoidal encoding over normalized (x,y); d_model must be a multiple of 4.
Tensor sinusoidal_positions(const std::vector<std::array<int, 2>>& sizes, int d_model);

TokenGrids project_pyramid(BoundParams& params, const PyramidValues& pyr, const MMDAConfig& cfg);

// Raw offsets in cell units for every (head, level, point): [T, heads*L*K*2].
Value predict_offsets(BoundParams& params, int layer, Value token_lang_cat);

// One MMDA layer over the full token sequence.
Value mmda_attention(BoundParams& params, int layer, const TokenGrids& grids, Value tokens,
                     const QueryFeatureValues& queries, Value pooled_lang, const MMDAConfig& cfg,
                     MMDADiag* diag = nullptr);

DecodedPyramid pixel_decode(BoundParams& params, const PyramidValues& pyr, const QueryFeatureValues& queries,
                            const MMDAConfig& cfg, MMDADiag* diag = nullptr);

}  // namespace uovn
