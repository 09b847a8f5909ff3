#include "uovn/model.hpp"

namespace uovn {

UOVNModel::UOVNModel(const ModelConfig& cfg) : cfg_(cfg) { vocab_ = build_frozen_vocab(encoder_config()); }

EncoderConfig UOVNModel::encoder_config() const {
    EncoderConfig e;
    e.stage_channels = cfg_.enc_channels;
    e.d_f = cfg_.d_f;
    e.text_table_rows = cfg_.text_table_rows;
    e.text_embed_dim = cfg_.text_embed_dim;
    e.vocab_seed = cfg_.vocab_seed;
    return e;
}

MMDAConfig UOVNModel::mmda_config() const {
    MMDAConfig m;
    m.k = cfg_.k;
    m.heads = cfg_.heads;
    m.layers = cfg_.pixel_layers;
    m.d_f = cfg_.d_f;
    return m;
}

InstanceDecoderConfig UOVNModel::decoder_config() const {
    InstanceDecoderConfig d;
    d.n_queries = cfg_.n_queries;
    d.rounds = cfg_.decoder_rounds;
    d.heads = cfg_.heads;
    d.d_f = cfg_.d_f;
    return d;
}

void UOVNModel::init_params(std::uint64_t seed) {
    params_ = ParamStore();
    RandomStream rng(substream_seed(seed, 0x5eed));
    init_encoder_params(params_, encoder_config(), rng);
    // Pyramid level widths coarse -> fine (reverse of the stage order).
    std::vector<int> level_widths(cfg_.enc_channels.rbegin(), cfg_.enc_channels.rend());
    init_pixel_decoder_params(params_, mmda_config(), level_widths, rng);
    init_instance_decoder_params(params_, decoder_config(), rng);
    init_head_params(params_, cfg_.d_f, rng);
}

void UOVNModel::load_params(const std::map<std::string, Tensor>& tensors) {
    for (auto& [name, p] : params_.all()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("checkpoint is missing parameter " + name);
        if (!(it->second.shape() == p.value.shape())) {
            throw IoError("checkpoint shape mismatch for " + name + ": " + shape_str(it->second.shape()) + " vs " +
                          shape_str(p.value.shape()));
        }
        p.value = it->second;
    }
}

UOVNModel::Forward UOVNModel::forward(BoundParams& bound, const Tensor& image,
                                      const std::vector<std::string>& query_texts, MMDADiag* diag,
                                      const std::vector<std::vector<std::uint8_t>>* frozen_blocks) const {
    Forward out;
    const EncoderConfig ec = encoder_config();
    out.pyramid = encode_image(bound, image, ec);
    out.queries = encode_queries(bound, query_texts, vocab_, ec);
    {
        const Tensor& finest = out.pyramid.levels.back().val();
        Value flat = reshape(out.pyramid.levels.back(), {finest.dim(0) * finest.dim(1), finest.dim(2)});
        out.encoder_pooled = mean_rows(flat);
    }
    out.decoded = pixel_decode(bound, out.pyramid, out.queries, mmda_config(), diag);
    out.instances = instance_decode(bound, out.decoded, decoder_config(), frozen_blocks);
    out.mask_logits = predict_mask_logits(out.instances.embeddings, out.decoded.levels.back());
    out.boxes = predict_boxes(bound, out.instances.embeddings);
    out.sim = similarity(out.instances.embeddings, out.queries.rows);
    out.mask_h = out.decoded.sizes.back()[0];
    out.mask_w = out.decoded.sizes.back()[1];
    return out;
}

PredictionSet UOVNModel::infer(const Tensor& image, const std::vector<std::string>& query_texts,
                               const std::vector<bool>& thing_flags, int chunk_limit) const {
    if (query_texts.empty()) throw InputError("inference requires at least one query");
    if (chunk_limit < 1) throw ConfigError("chunk limit must be positive");
    Graph g;
    BoundParams bound(g, params_, false);
    const EncoderConfig ec = encoder_config();
    const int c = static_cast<int>(query_texts.size());

    // Encode queries chunk by chunk; rows are per-query so the concatenation
    // matches an unchunked encoding exactly.
    std::vector<Value> row_chunks;
    for (int begin = 0; begin < c; begin += chunk_limit) {
        const int end = std::min(c, begin + chunk_limit);
        std::vector<std::string> part(query_texts.begin() + begin, query_texts.begin() + end);
        row_chunks.push_back(encode_queries(bound, part, vocab_, ec).rows);
    }
    QueryFeatureValues qf;
    qf.rows = row_chunks.size() == 1 ? row_chunks[0] : concat(0, row_chunks);
    qf.pooled = mean_rows(qf.rows);  // over all queries, once

    PyramidValues pyr = encode_image(bound, image, ec);
    DecodedPyramid decoded = pixel_decode(bound, pyr, qf, mmda_config());
    InstanceEmbeddings inst = instance_decode(bound, decoded, decoder_config());
    Value mask_logits = predict_mask_logits(inst.embeddings, decoded.levels.back());
    Value boxes = predict_boxes(bound, inst.embeddings);

    std::vector<Value> sim_chunks;
    for (const Value& rows : row_chunks) sim_chunks.push_back(similarity(inst.embeddings, rows));
    Value sim = sim_chunks.size() == 1 ? sim_chunks[0] : concat(1, sim_chunks);

    PredictionSet pred;
    pred.mask_h = decoded.sizes.back()[0];
    pred.mask_w = decoded.sizes.back()[1];
    pred.mask_logits = mask_logits.val();
    pred.boxes = boxes.val();
    pred.sim = sim.val();
    const int n = pred.mask_logits.dim(0);
    pred.binary.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pred.binary.push_back(binarize_mask_row(pred.mask_logits, i));
    pred.labels = classify(pred.sim);
    semantic_from_instances(pred, c);
    std::vector<bool> flags = thing_flags;
    if (flags.empty()) flags.assign(static_cast<std::size_t>(c), true);
    panoptic_merge(pred, flags);
    return pred;
}

}  // namespace uovn
