#pragma once

#include <string>
#include <vector>

#include "uovn/losses.hpp"

namespace uovn {

struct ModelConfig {
    int d_f = 256;
    int k = 4;
    int levels = 4;
    int n_queries = 100;
    int heads = 8;
    int pixel_layers = 6;
    int decoder_rounds = 3;
    std::vector<int> enc_channels{64, 96, 128, 160};  // stages 1..4 (stride 4 -> 32)
    int text_table_rows = 4096;
    int text_embed_dim = 64;
    std::uint64_t vocab_seed = 17;
    bool aux_losses = true;
};

struct OptimConfig {
    double step_size = 0.05;
    int steps = 300;
    std::uint64_t seed = 1;
    double clip_norm = 1.0;
    double momentum = 0.9;
    int checkpoint_every = 100;
};

struct DataConfig {
    std::vector<std::string> train_paths;
    bool generate = false;
    std::vector<std::string> gen_domains;
    int samples_per_domain = 8;
    int image_size = 64;
    std::uint64_t gen_seed = 5;
};

struct RunConfig {
    ModelConfig model;
    LossWeights loss;
    OptimConfig optim;
    DataConfig data;
    std::vector<std::string> eval_tasks{"det", "ins", "sem", "pan"};
};

// Strict parse: unknown keys are rejected; basic shape constraints checked.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);
std::string run_config_hash(const RunConfig& cfg);
void validate_run_config(const RunConfig& cfg);

}  // namespace uovn
