#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uovn/params.hpp"

namespace uovn {

inline constexpr double kTauObject = 0.5;      // no-object score threshold
inline constexpr double kPanopticOverlap = 0.5;  // min unclaimed fraction
inline constexpr int kPanopticMinArea = 16;      // pixels at mask resolution

void init_head_params(ParamStore& store, int d_f, RandomStream& rng);

// Mask logits: instance embeddings dotted with the finest decoded level.
Value predict_mask_logits(Value instance_emb, Value finest_level);
// S = O F^T
Value similarity(Value instance_emb, Value query_rows);
// Two-layer MLP + sigmoid -> (cx, cy, w, h) in (0,1)
Value predict_boxes(BoundParams& params, Value instance_emb);

struct Labels {
    std::vector<int> best_class;   // argmax over classes (always set)
    std::vector<double> score;     // sigmoid of the best similarity
    std::vector<bool> keep;        // false = no-object
};
// Per instance: best class by sigmoid similarity, ties to the lowest index,
// no-object when the best score <= kTauObject.
Labels classify(const Tensor& sim);

struct Segment {
    int id = 0;
    int class_id = -1;
    bool thing = true;
    double score = 0.0;
    std::int64_t area = 0;
};

struct PredictionSet {
    int mask_h = 0, mask_w = 0;
    Tensor mask_logits;                         // [N, H*W]
    std::vector<std::vector<std::uint8_t>> binary;  // N masks, strict sigmoid>0.5
    Tensor boxes;                               // [N, 4]
    Tensor sim;                                 // [N, C]
    Labels labels;
    std::vector<std::vector<std::uint8_t>> semantic_planes;  // C planes (may overlap)
    std::vector<int> semantic_map;              // resolved: class id + 1, 0 = void
    std::vector<int> panoptic_map;              // segment ids, 0 = void
    std::vector<Segment> segments;
};

std::vector<std::uint8_t> binarize_mask_row(const Tensor& logits, int row);

// Class planes as unions of member masks; `semantic_map` resolves overlaps
// to the highest-scoring claiming instance.
void semantic_from_instances(PredictionSet& pred, int num_classes);

// Greedy paint-by-score panoptic merge; same-class stuff segments fuse.
void panoptic_merge(PredictionSet& pred, const std::vector<bool>& thing_flags);

// Partition check: every pixel carries exactly one id and segment areas are
// consistent with the map.
bool panoptic_partition_ok(const PredictionSet& pred);

// Inference dump: boxes/labels/scores JSON + P5 masks + P5 panoptic map.
void dump_predictions(const std::string& dir, const PredictionSet& pred,
                      const std::vector<std::string>& class_names);

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels, int h, int w);

}  // namespace uovn
