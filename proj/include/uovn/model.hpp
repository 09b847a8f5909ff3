#pragma once

#include "uovn/config.hpp"
#include "uovn/encoders.hpp"
#include "uovn/heads.hpp"
#include "uovn/instance_decoder.hpp"
#include "uovn/mmda.hpp"

namespace uovn {

// The full network: stub encoders, MMDA pixel decoder, masked-attention
// instance decoder and the task heads, over one shared parameter store.
class UOVNModel {
  public:
    explicit UOVNModel(const ModelConfig& cfg);

    void init_params(std::uint64_t seed);
    void load_params(const std::map<std::string, Tensor>& tensors);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const Tensor& vocab() const { return vocab_; }

    EncoderConfig encoder_config() const;
    MMDAConfig mmda_config() const;
    InstanceDecoderConfig decoder_config() const;

    struct Forward {
        PyramidValues pyramid;
        QueryFeatureValues queries;
        Value encoder_pooled;  // spatial mean of the finest raw encoder level
        DecodedPyramid decoded;
        InstanceEmbeddings instances;
        Value mask_logits;  // [N, H4*W4], from the final instance embeddings
        Value boxes;        // [N, 4]
        Value sim;          // [N, C]
        int mask_h = 0, mask_w = 0;
    };

    Forward forward(BoundParams& bound, const Tensor& image, const std::vector<std::string>& query_texts,
                    MMDADiag* diag = nullptr,
                    const std::vector<std::vector<std::uint8_t>>* frozen_blocks = nullptr) const;

    // Inference with 256-query chunking: query encoding and S are computed
    // per chunk, the visual pathway once (pooled over all queries).
    PredictionSet infer(const Tensor& image, const std::vector<std::string>& query_texts,
                        const std::vector<bool>& thing_flags, int chunk_limit = 256) const;

  private:
    ModelConfig cfg_;
    ParamStore params_;
    Tensor vocab_;
};

}  // namespace uovn
