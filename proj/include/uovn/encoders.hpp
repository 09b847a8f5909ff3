#pragma once

#include <string>
#include <vector>

#include "uovn/params.hpp"

namespace uovn {

// Stub encoders reproducing the shape contract of a backbone + frozen text
// encoder: a 4-stage strided conv stack and a hashed frozen embedding table
// with a trainable projection.
struct EncoderConfig {
    std::vector<int> stage_channels{64, 96, 128, 160};  // stages 1..4, strides 4/8/16/32
    int d_f = 256;
    int text_table_rows = 4096;
    int text_embed_dim = 64;
    std::uint64_t vocab_seed = 17;
};

// Multi-scale image features, ordered coarse -> fine; the last entry is the
// stride-4 map used for masks.
struct PyramidValues {
    std::vector<Value> levels;
    std::vector<int> strides;  // e.g. {32,16,8,4}
};

struct QueryFeatureValues {
    Value rows;    // [C, D_F], L2-normalized
    Value pooled;  // [D_F], arithmetic mean of rows
};

void init_encoder_params(ParamStore& store, const EncoderConfig& cfg, RandomStream& rng);

PyramidValues encode_image(BoundParams& params, const Tensor& image, const EncoderConfig& cfg);

// lowercase, split on non-alphanumerics, at most 16 tokens
std::vector<std::string> tokenize(const std::string& query);

Tensor build_frozen_vocab(const EncoderConfig& cfg);

// Frozen-space query embedding: mean of hashed token rows, one row per query.
Tensor frozen_query_embeddings(const std::vector<std::string>& queries, const Tensor& vocab);

QueryFeatureValues encode_queries(BoundParams& params, const std::vector<std::string>& queries, const Tensor& vocab,
                                  const EncoderConfig& cfg);

std::string apply_prompt(const std::string& query);

Value pool_queries(const QueryFeatureValues& f);

}  // namespace uovn
