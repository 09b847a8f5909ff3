#pragma once

#include <utility>
#include <vector>

#include "uovn/boxes.hpp"
#include "uovn/params.hpp"

namespace uovn {

struct LossWeights {
    double l1 = 2.0;  // segmentation
    double l2 = 2.0;  // detection
    double l3 = 1.0;  // classification
    double l4 = 1.0;  // adaptation
};

struct GroundTruthRegion {
    BoxD box;
    std::vector<std::uint8_t> mask;  // at mask resolution; empty in box-only domains
    int primary_query = 0;
    int class_id = 0;
};

struct GroundTruth {
    bool has_masks = true;
    bool has_boxes = true;
    int mask_h = 0, mask_w = 0;
    std::vector<GroundTruthRegion> regions;
    std::vector<std::vector<int>> query_links;  // per query: region indices (>= 1 each)
};

// (prediction, ground-truth-region) pairs, each region used exactly once.
using Assignment = std::vector<std::pair<int, int>>;

// cost(n, j) = l1*(maskBCE + dice) + l2*(smoothL1 + (1 - GIoU)) - l3*sigmoid(S[n, query(j)]),
// with modality terms gated by the ground truth's flags.
Tensor matching_cost(const Tensor& mask_logits, const Tensor& boxes, const Tensor& sim, const GroundTruth& gt,
                     const LossWeights& w);

// Minimum-cost assignment; deterministic under ties (lexicographically
// smallest by ground-truth index). Requires rows >= columns.
Assignment hungarian_match(const Tensor& cost);
double assignment_cost(const Tensor& cost, const Assignment& a);

// GIoU between a predicted box ([4] value) and a constant box, on the graph.
Value giou_value(Value box4, const BoxD& gt);

struct GatedLoss {
    Value value;
    bool present = false;  // false: modality missing, contributes 0
};

// Mean over assigned pairs of BCE + dice, summed over all provided logit
// sets (final prediction plus auxiliary decoder layers when enabled).
GatedLoss loss_seg(const std::vector<Value>& mask_logit_sets, const GroundTruth& gt, const Assignment& a);
GatedLoss loss_det(Value boxes, const GroundTruth& gt, const Assignment& a);

// S_gt[n,c] = 1 iff IoU(prediction n, any region linked to query c) > 0.5
// (mask IoU when masks exist, else box IoU). Strict inequality.
Tensor build_gt_similarity(const Tensor& mask_logits, const Tensor& boxes, const GroundTruth& gt);

Value loss_cls(Value sim, const Tensor& sim_gt);

// |cos(v1,v2) - cos(f1,f2)|
Value loss_adp_global(Value v1, Value v2, Value f1, Value f2);

// Per query: the instance rows with sigmoid(S) > 0.5, argmax row fallback.
std::vector<std::vector<int>> aggregation_selections(const Tensor& sim_plain);
Value aggregate_query_instances(const std::vector<std::vector<int>>& selections, Value instance_emb);
Value aggregate_query_instances(const Tensor& sim_plain, Value instance_emb);

// A_L = F1 F2^T, the (detached) language-similarity target of Eq-style
// instance alignment.
Tensor language_similarity_target(const Tensor& lang_rows1, const Tensor& lang_rows2);

// mean-row KL(softmax(target) || softmax(instance sims)); the language side
// is a constant target (no gradient into the text pathway).
Value loss_adp_local(Value agg1, Value agg2, const Tensor& lang_target);
Value loss_adp_local(Value agg1, Value agg2, const Tensor& lang_rows1, const Tensor& lang_rows2);

}  // namespace uovn
