#include "uovn/metrics.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>

namespace uovn {

double average_precision(const std::vector<ApImage>& images, double iou_thr) {
    struct Det {
        double score;
        std::size_t image;
        std::size_t index;
    };
    std::vector<Det> dets;
    std::int64_t total_gt = 0;
    for (std::size_t im = 0; im < images.size(); ++im) {
        total_gt += images[im].num_gt;
        for (std::size_t d = 0; d < images[im].scores.size(); ++d) {
            dets.push_back({images[im].scores[d], im, d});
        }
    }
    if (total_gt == 0) return std::numeric_limits<double>::quiet_NaN();
    std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image != b.image) return a.image < b.image;
        return a.index < b.index;
    });
    std::vector<std::vector<char>> gt_used(images.size());
    for (std::size_t im = 0; im < images.size(); ++im) gt_used[im].assign(static_cast<std::size_t>(images[im].num_gt), 0);

    std::vector<double> precision, recall;
    std::int64_t tp = 0, fp = 0;
    for (const Det& det : dets) {
        const auto& ious = images[det.image].iou[det.index];
        int best_gt = -1;
        double best_iou = iou_thr;
        for (std::size_t g = 0; g < ious.size(); ++g) {
            if (gt_used[det.image][g]) continue;
            if (ious[g] >= best_iou && (best_gt < 0 || ious[g] > best_iou)) {
                best_iou = ious[g];
                best_gt = static_cast<int>(g);
            }
        }
        if (best_gt >= 0) {
            gt_used[det.image][static_cast<std::size_t>(best_gt)] = 1;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    // 101-point interpolation: p(r) = max precision at recall >= r.
    double ap = 0.0;
    std::size_t k = precision.size();
    std::vector<double> pmax(precision.size());
    double running = 0.0;
    for (std::size_t i = precision.size(); i-- > 0;) {
        running = std::max(running, precision[i]);
        pmax[i] = running;
    }
    (void)k;
    for (int ri = 0; ri <= 100; ++ri) {
        const double r = ri / 100.0;
        double p = 0.0;
        for (std::size_t i = 0; i < recall.size(); ++i) {
            if (recall[i] >= r) {
                p = pmax[i];
                break;
            }
        }
        ap += p;
    }
    return ap / 101.0;
}

ApClassResult average_precision_class(const std::vector<ApImage>& images) {
    ApClassResult out;
    const auto thrs = coco_thresholds();
    double acc = 0.0;
    for (double t : thrs) {
        const double ap = average_precision(images, t);
        acc += ap;
        if (t == thrs.front()) out.ap50 = ap;
    }
    out.ap_mean = acc / static_cast<double>(thrs.size());
    return out;
}

void miou_accumulate(MiouStats& st, const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
    if (pred.size() != gt.size()) throw DimensionError("miou: maps differ in size");
    if (st.inter.empty()) {
        st.inter.assign(static_cast<std::size_t>(num_classes), 0);
        st.pred_count.assign(static_cast<std::size_t>(num_classes), 0);
        st.gt_count.assign(static_cast<std::size_t>(num_classes), 0);
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const int p = pred[i], g = gt[i];
        if (p >= 1 && p <= num_classes) ++st.pred_count[static_cast<std::size_t>(p - 1)];
        if (g >= 1 && g <= num_classes) ++st.gt_count[static_cast<std::size_t>(g - 1)];
        if (p == g && g >= 1 && g <= num_classes) ++st.inter[static_cast<std::size_t>(g - 1)];
    }
}

double miou_finalize(const MiouStats& st) {
    double acc = 0.0;
    int classes = 0;
    for (std::size_t c = 0; c < st.gt_count.size(); ++c) {
        if (st.gt_count[c] == 0) continue;  // absent from GT: excluded
        const std::int64_t uni = st.gt_count[c] + st.pred_count[c] - st.inter[c];
        acc += uni > 0 ? static_cast<double>(st.inter[c]) / static_cast<double>(uni) : 0.0;
        ++classes;
    }
    return classes == 0 ? 0.0 : acc / classes;
}

double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
    MiouStats st;
    miou_accumulate(st, pred, gt, num_classes);
    return miou_finalize(st);
}

void pq_accumulate(PqStats& st, const std::vector<int>& pred_map, const std::vector<PanSegment>& pred_segments,
                   const std::vector<int>& gt_map, const std::vector<PanSegment>& gt_segments) {
    if (pred_map.size() != gt_map.size()) throw DimensionError("pq: maps differ in size");
    std::map<int, std::int64_t> pred_area, gt_area, pred_void_overlap;
    std::map<std::pair<int, int>, std::int64_t> inter;
    for (std::size_t i = 0; i < pred_map.size(); ++i) {
        const int p = pred_map[i], g = gt_map[i];
        if (p != 0) ++pred_area[p];
        if (g != 0) ++gt_area[g];
        if (p != 0 && g == 0) ++pred_void_overlap[p];
        if (p != 0 && g != 0) ++inter[{p, g}];
    }
    std::map<int, int> pred_class, gt_class;
    for (const auto& s : pred_segments) pred_class[s.id] = s.class_id;
    for (const auto& s : gt_segments) gt_class[s.id] = s.class_id;

    std::map<int, int> gt_matched, pred_matched;
    for (const auto& [key, ov] : inter) {
        const auto [pid, gid] = key;
        if (pred_class.count(pid) == 0 || gt_class.count(gid) == 0) continue;
        if (pred_class[pid] != gt_class[gid]) continue;
        // Only segment pixels enter the denominator (void carries no segment).
        const double uni = static_cast<double>(pred_area[pid] + gt_area[gid] - ov);
        const double iou = uni > 0 ? static_cast<double>(ov) / uni : 0.0;
        if (iou > 0.5) {
            // IoU > 0.5 matches are provably unique per segment.
            assert(gt_matched.count(gid) == 0 && pred_matched.count(pid) == 0);
            gt_matched[gid] = pid;
            pred_matched[pid] = gid;
            auto& cs = st.per_class[gt_class[gid]];
            cs.iou_sum += iou;
            cs.tp += 1;
        }
    }
    for (const auto& s : gt_segments) {
        if (gt_area.count(s.id) == 0) continue;  // empty segment
        if (gt_matched.count(s.id) == 0) st.per_class[s.class_id].fn += 1;
    }
    for (const auto& s : pred_segments) {
        if (pred_matched.count(s.id)) continue;
        const std::int64_t area = pred_area.count(s.id) ? pred_area[s.id] : 0;
        if (area == 0) continue;
        // Predictions mostly covering void are ignored rather than penalized.
        const std::int64_t void_ov = pred_void_overlap.count(s.id) ? pred_void_overlap[s.id] : 0;
        if (static_cast<double>(void_ov) / static_cast<double>(area) > 0.5) continue;
        st.per_class[s.class_id].fp += 1;
    }
}

PqResult pq_finalize(const PqStats& st) {
    PqResult out;
    double pq_acc = 0.0, sq_acc = 0.0, rq_acc = 0.0;
    int classes = 0;
    for (const auto& [cls, cs] : st.per_class) {
        if (cs.tp + cs.fp + cs.fn == 0) continue;
        const double denom = cs.tp + 0.5 * cs.fp + 0.5 * cs.fn;
        const double pq = cs.iou_sum / denom;
        const double sq = cs.tp > 0 ? cs.iou_sum / cs.tp : 0.0;
        const double rq = cs.tp / denom;
        out.per_class[cls] = pq;
        pq_acc += pq;
        sq_acc += sq;
        rq_acc += rq;
        out.tp += cs.tp;
        out.fp += cs.fp;
        out.fn += cs.fn;
        ++classes;
    }
    if (classes > 0) {
        out.pq = pq_acc / classes;
        out.sq = sq_acc / classes;
        out.rq = rq_acc / classes;
        out.defined = true;
    }
    return out;
}

}  // namespace uovn
