#pragma once

#include <map>
#include <vector>

#include "uovn/boxes.hpp"
#include "uovn/common.hpp"

namespace uovn {

// ---- COCO-style average precision ----

// Detections of one class on one image: scores plus the IoU of every
// detection against every ground truth of that class.
struct ApImage {
    std::vector<double> scores;
    std::vector<std::vector<double>> iou;  // [det][gt]
    int num_gt = 0;
};

// 101-point interpolated AP at a single IoU threshold; greedy score-ordered
// matching to the unmatched ground truth with the highest IoU >= thr.
double average_precision(const std::vector<ApImage>& images, double iou_thr);

inline std::vector<double> coco_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
    return t;
}

struct ApClassResult {
    double ap_mean = 0.0;  // averaged over thresholds
    double ap50 = 0.0;
};
ApClassResult average_precision_class(const std::vector<ApImage>& images);

// ---- mIoU ----

// Maps hold labels 0..C with 0 = void; void is excluded and classes absent
// from the ground truth do not enter the mean.
struct MiouStats {
    std::vector<std::int64_t> inter, pred_count, gt_count;
};
void miou_accumulate(MiouStats& st, const std::vector<int>& pred, const std::vector<int>& gt, int num_classes);
double miou_finalize(const MiouStats& st);
double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes);

// ---- panoptic quality ----

struct PanSegment {
    int id = 0;
    int class_id = -1;
};

struct PqStats {
    struct ClassStats {
        double iou_sum = 0.0;
        int tp = 0, fp = 0, fn = 0;
    };
    std::map<int, ClassStats> per_class;
};

// Matches same-class segments at IoU > 0.5 with void pixels excluded from
// the union; such matches are unique (asserted).
void pq_accumulate(PqStats& st, const std::vector<int>& pred_map, const std::vector<PanSegment>& pred_segments,
                   const std::vector<int>& gt_map, const std::vector<PanSegment>& gt_segments);

struct PqResult {
    double pq = 0.0, sq = 0.0, rq = 0.0;
    bool defined = false;
    std::map<int, double> per_class;
    int tp = 0, fp = 0, fn = 0;
};
PqResult pq_finalize(const PqStats& st);

}  // namespace uovn
