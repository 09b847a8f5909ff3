#pragma once

#include "uovn/mmda.hpp"
#include "uovn/params.hpp"

namespace uovn {

struct InstanceDecoderConfig {
    int n_queries = 100;
    int rounds = 3;  // passes over the L-1 coarse levels
    int heads = 8;
    int d_f = 256;
};

struct InstanceEmbeddings {
    Value embeddings;              // O: [N, D_F]
    std::vector<Value> aux_mask_logits;  // layer count + 1 entries, [N, H_L*W_L]
    // the block mask each layer actually used (empty = unmasked layer)
    std::vector<std::vector<std::uint8_t>> attn_blocks;
};

void init_instance_decoder_params(ParamStore& store, const InstanceDecoderConfig& cfg, RandomStream& rng,
                                  int levels = 4);

// Standard multi-head cross-attention with a boolean block mask
// (true = blocked). Fully blocked rows fall back to unmasked attention.
Value masked_cross_attention(BoundParams& params, const std::string& prefix, Value queries, Value kv_tokens,
                             const Tensor& kv_pos, const std::vector<std::uint8_t>& block_mask, int heads);

// `frozen_blocks` pins the per-layer attention masks (verification harness:
// finite differences must see the same smooth branch reverse mode saw).
InstanceEmbeddings instance_decode(BoundParams& params, const DecodedPyramid& decoded,
                                   const InstanceDecoderConfig& cfg,
                                   const std::vector<std::vector<std::uint8_t>>* frozen_blocks = nullptr);

}  // namespace uovn
