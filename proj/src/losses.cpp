#include "uovn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace uovn {

namespace {

double sigmoid_d(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct Corners {
    double x1, y1, x2, y2;
};

Corners to_corners(const BoxD& b) {
    const double w = std::max(b.w, 1e-6), h = std::max(b.h, 1e-6);
    return {b.cx - w / 2, b.cy - h / 2, b.cx + w / 2, b.cy + h / 2};
}

// BCE mean + dice on one (prediction row, gt mask) pair, in double.
double mask_pair_cost(const Tensor& logits, int row, const std::vector<std::uint8_t>& gt) {
    const int p = logits.dim(1);
    double bce = 0.0, inter = 0.0, psum = 0.0, gsum = 0.0;
    for (int j = 0; j < p; ++j) {
        const double z = logits.at(row, j);
        const double t = gt[static_cast<std::size_t>(j)];
        bce += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
        const double pr = sigmoid_d(z);
        inter += pr * t;
        psum += pr;
        gsum += t;
    }
    bce /= p;
    const double dice = 1.0 - 2.0 * inter / (psum + gsum + 1.0);
    return bce + dice;
}

double smooth_l1_d(double d) {
    const double a = std::fabs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double box_pair_cost(const Tensor& boxes, int row, const BoxD& gt) {
    const BoxD p{boxes.at(row, 0), boxes.at(row, 1), boxes.at(row, 2), boxes.at(row, 3)};
    const double sl1 = smooth_l1_d(p.cx - gt.cx) + smooth_l1_d(p.cy - gt.cy) + smooth_l1_d(p.w - gt.w) +
                       smooth_l1_d(p.h - gt.h);
    return sl1 + (1.0 - giou(p, gt));
}

// Min-cost assignment of `m` rows (ground truths) onto `n` columns
// (predictions), shortest augmenting path with potentials.
std::vector<int> solve_assignment(int m, int n, const std::vector<double>& cost /* m*n, row-major */) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(m) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> match(static_cast<std::size_t>(n) + 1, 0);  // col -> row (1-based)
    std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= m; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = match[static_cast<std::size_t>(j0)];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost[static_cast<std::size_t>(i0 - 1) * n + (j - 1)] - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(match[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (match[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            match[static_cast<std::size_t>(j0)] = match[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> row_to_col(static_cast<std::size_t>(m), -1);
    for (int j = 1; j <= n; ++j) {
        if (match[static_cast<std::size_t>(j)] > 0) row_to_col[static_cast<std::size_t>(match[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
    return row_to_col;
}

double assignment_total(int m, int n, const std::vector<double>& cost, const std::vector<int>& row_to_col) {
    double t = 0.0;
    for (int i = 0; i < m; ++i) t += cost[static_cast<std::size_t>(i) * n + row_to_col[static_cast<std::size_t>(i)]];
    return t;
}

Value slice_row(Value x, int row) {
    const int cols = x.val().dim(1);
    return reshape(slice(x, 0, row, row + 1), {cols});
}

}  // namespace

double box_iou(const BoxD& a, const BoxD& b) {
    const Corners ca = to_corners(a), cb = to_corners(b);
    const double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
    const double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
    const double inter = iw * ih;
    const double area_a = (ca.x2 - ca.x1) * (ca.y2 - ca.y1);
    const double area_b = (cb.x2 - cb.x1) * (cb.y2 - cb.y1);
    const double uni = area_a + area_b - inter;
    return uni <= 0.0 ? 0.0 : inter / uni;
}

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    std::int64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool av = a[i] != 0, bv = b[i] != 0;
        inter += av && bv;
        uni += av || bv;
    }
    if (uni == 0) return 1.0;  // empty vs empty
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double giou(const BoxD& a, const BoxD& b) {
    const Corners ca = to_corners(a), cb = to_corners(b);
    const double iw = std::max(0.0, std::min(ca.x2, cb.x2) - std::max(ca.x1, cb.x1));
    const double ih = std::max(0.0, std::min(ca.y2, cb.y2) - std::max(ca.y1, cb.y1));
    const double inter = iw * ih;
    const double area_a = (ca.x2 - ca.x1) * (ca.y2 - ca.y1);
    const double area_b = (cb.x2 - cb.x1) * (cb.y2 - cb.y1);
    const double uni = area_a + area_b - inter;
    const double ew = std::max(ca.x2, cb.x2) - std::min(ca.x1, cb.x1);
    const double eh = std::max(ca.y2, cb.y2) - std::min(ca.y1, cb.y1);
    const double enclosing = ew * eh;
    return inter / uni - (enclosing - uni) / enclosing;
}

Tensor matching_cost(const Tensor& mask_logits, const Tensor& boxes, const Tensor& sim, const GroundTruth& gt,
                     const LossWeights& w) {
    const int n = sim.dim(0);
    const int m = static_cast<int>(gt.regions.size());
    Tensor cost({n, m});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            const auto& region = gt.regions[static_cast<std::size_t>(j)];
            double c = -w.l3 * sigmoid_d(sim.at(i, region.primary_query));
            if (gt.has_masks) c += w.l1 * mask_pair_cost(mask_logits, i, region.mask);
            if (gt.has_boxes) c += w.l2 * box_pair_cost(boxes, i, region.box);
            cost.at(i, j) = static_cast<float>(c);
        }
    }
    return cost;
}

Assignment hungarian_match(const Tensor& cost) {
    const int n = cost.dim(0);  // predictions
    const int m = cost.dim(1);  // ground truths
    if (n < m) throw InputError("hungarian_match: more ground truths than predictions");
    Assignment out;
    if (m == 0) return out;
    // Rows = ground truths, columns = predictions, in double.
    std::vector<double> c(static_cast<std::size_t>(m) * n);
    for (int j = 0; j < m; ++j) {
        for (int i = 0; i < n; ++i) c[static_cast<std::size_t>(j) * n + i] = cost.at(i, j);
    }
    const auto base = solve_assignment(m, n, c);
    const double best = assignment_total(m, n, c, base);
    const double tol = 1e-9 * (1.0 + std::fabs(best));

    // Lexicographically smallest optimal assignment: fix the smallest
    // feasible prediction for each ground truth in turn.
    std::vector<int> chosen(static_cast<std::size_t>(m), -1);
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    double fixed_cost = 0.0;
    for (int j = 0; j < m; ++j) {
        for (int p = 0; p < n; ++p) {
            if (used[static_cast<std::size_t>(p)]) continue;
            // Solve the subproblem with gts j+1..m-1 over the unused preds.
            std::vector<int> free_preds;
            for (int q = 0; q < n; ++q) {
                if (!used[static_cast<std::size_t>(q)] && q != p) free_preds.push_back(q);
            }
            const int sub_m = m - j - 1;
            double sub_cost = 0.0;
            if (sub_m > 0) {
                std::vector<double> sub(static_cast<std::size_t>(sub_m) * free_preds.size());
                for (int jj = 0; jj < sub_m; ++jj) {
                    for (std::size_t qq = 0; qq < free_preds.size(); ++qq) {
                        sub[static_cast<std::size_t>(jj) * free_preds.size() + qq] =
                            c[static_cast<std::size_t>(j + 1 + jj) * n + free_preds[qq]];
                    }
                }
                const auto sub_assign = solve_assignment(sub_m, static_cast<int>(free_preds.size()), sub);
                sub_cost = assignment_total(sub_m, static_cast<int>(free_preds.size()), sub, sub_assign);
            }
            const double total = fixed_cost + c[static_cast<std::size_t>(j) * n + p] + sub_cost;
            if (total <= best + tol) {
                chosen[static_cast<std::size_t>(j)] = p;
                used[static_cast<std::size_t>(p)] = 1;
                fixed_cost += c[static_cast<std::size_t>(j) * n + p];
                break;
            }
        }
        if (chosen[static_cast<std::size_t>(j)] < 0) throw NumericError("hungarian_match: refinement failed");
    }
    for (int j = 0; j < m; ++j) out.emplace_back(chosen[static_cast<std::size_t>(j)], j);
    return out;
}

double assignment_cost(const Tensor& cost, const Assignment& a) {
    double t = 0.0;
    for (const auto& [pred, gtj] : a) t += cost.at(pred, gtj);
    return t;
}

Value giou_value(Value box4, const BoxD& gt) {
    Graph& g = *box4.graph;
    if (box4.val().numel() != 4) throw DimensionError("giou_value expects a [4] box");
    Value b = reshape(box4, {4});
    auto coord = [&](int i) { return slice(b, 0, i, i + 1); };
    Value eps = g.constant(Tensor::scalar(1e-6f));
    Value w = max_ew(coord(2), eps);
    Value h = max_ew(coord(3), eps);
    Value hw = scale(w, 0.5);
    Value hh = scale(h, 0.5);
    Value x1 = sub(coord(0), hw), x2 = add(coord(0), hw);
    Value y1 = sub(coord(1), hh), y2 = add(coord(1), hh);
    const Corners cg = to_corners(gt);
    auto cnst = [&](double v) { return g.constant(Tensor::scalar(static_cast<float>(v))); };
    Value zero = cnst(0.0);
    Value iw = max_ew(sub(min_ew(x2, cnst(cg.x2)), max_ew(x1, cnst(cg.x1))), zero);
    Value ih = max_ew(sub(min_ew(y2, cnst(cg.y2)), max_ew(y1, cnst(cg.y1))), zero);
    Value inter = mul(iw, ih);
    const double area_g = (cg.x2 - cg.x1) * (cg.y2 - cg.y1);
    Value uni = sub(add(mul(w, h), cnst(area_g)), inter);
    Value ew = sub(max_ew(x2, cnst(cg.x2)), min_ew(x1, cnst(cg.x1)));
    Value eh = sub(max_ew(y2, cnst(cg.y2)), min_ew(y1, cnst(cg.y1)));
    Value enclosing = mul(ew, eh);
    return sub(div(inter, uni), div(sub(enclosing, uni), enclosing));
}

GatedLoss loss_seg(const std::vector<Value>& mask_logit_sets, const GroundTruth& gt, const Assignment& a) {
    GatedLoss out;
    if (mask_logit_sets.empty()) throw InputError("loss_seg: no logit sets");
    Graph& g = *mask_logit_sets[0].graph;
    if (!gt.has_masks || a.empty()) {
        out.value = g.constant(Tensor::scalar(0.0f));
        out.present = false;
        return out;
    }
    Value total;
    bool first = true;
    for (const Value& set : mask_logit_sets) {
        Value acc;
        bool acc_first = true;
        for (const auto& [pred, gtj] : a) {
            const auto& mask = gt.regions[static_cast<std::size_t>(gtj)].mask;
            Tensor target({static_cast<int>(mask.size())});
            for (std::size_t i = 0; i < mask.size(); ++i) target[static_cast<std::int64_t>(i)] = mask[i] ? 1.0f : 0.0f;
            Value row = slice_row(set, pred);
            Value pair_loss = add(bce_with_logits_mean(row, target), dice_loss(row, target));
            acc = acc_first ? pair_loss : add(acc, pair_loss);
            acc_first = false;
        }
        Value set_loss = scale(acc, 1.0 / static_cast<double>(a.size()));
        total = first ? set_loss : add(total, set_loss);
        first = false;
    }
    out.value = total;
    out.present = true;
    return out;
}

GatedLoss loss_det(Value boxes, const GroundTruth& gt, const Assignment& a) {
    GatedLoss out;
    Graph& g = *boxes.graph;
    if (!gt.has_boxes || a.empty()) {
        out.value = g.constant(Tensor::scalar(0.0f));
        out.present = false;
        return out;
    }
    Value acc;
    bool first = true;
    for (const auto& [pred, gtj] : a) {
        const BoxD& gb = gt.regions[static_cast<std::size_t>(gtj)].box;
        Tensor target({4});
        target[0] = static_cast<float>(gb.cx);
        target[1] = static_cast<float>(gb.cy);
        target[2] = static_cast<float>(gb.w);
        target[3] = static_cast<float>(gb.h);
        Value row = slice_row(boxes, pred);
        Value pair_loss = add(smooth_l1_sum(row, target), scale(giou_value(row, gb), -1.0, 1.0));
        acc = first ? pair_loss : add(acc, pair_loss);
        first = false;
    }
    out.value = scale(acc, 1.0 / static_cast<double>(a.size()));
    out.present = true;
    return out;
}

Tensor build_gt_similarity(const Tensor& mask_logits, const Tensor& boxes, const GroundTruth& gt) {
    const int n = mask_logits.dim(0);
    const int c = static_cast<int>(gt.query_links.size());
    Tensor s_gt({n, c});
    std::vector<std::vector<std::uint8_t>> pred_masks;
    if (gt.has_masks) {
        pred_masks.reserve(static_cast<std::size_t>(n));
        const int p = mask_logits.dim(1);
        for (int i = 0; i < n; ++i) {
            std::vector<std::uint8_t> m(static_cast<std::size_t>(p));
            for (int j = 0; j < p; ++j) m[static_cast<std::size_t>(j)] = mask_logits.at(i, j) > 0.0f ? 1 : 0;
            pred_masks.push_back(std::move(m));
        }
    }
    for (int i = 0; i < n; ++i) {
        const BoxD pb{boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)};
        for (int q = 0; q < c; ++q) {
            bool hit = false;
            for (int region : gt.query_links[static_cast<std::size_t>(q)]) {
                const auto& reg = gt.regions[static_cast<std::size_t>(region)];
                const double iou = gt.has_masks ? mask_iou(pred_masks[static_cast<std::size_t>(i)], reg.mask)
                                                : box_iou(pb, reg.box);
                if (iou > 0.5) {  // strict
                    hit = true;
                    break;
                }
            }
            s_gt.at(i, q) = hit ? 1.0f : 0.0f;
        }
    }
    return s_gt;
}

Value loss_cls(Value sim, const Tensor& sim_gt) { return bce_with_logits_mean(sim, sim_gt); }

Value loss_adp_global(Value v1, Value v2, Value f1, Value f2) {
    return abs_ew(sub(cosine(v1, v2), cosine(f1, f2)));
}

std::vector<std::vector<int>> aggregation_selections(const Tensor& sim_plain) {
    const int n = sim_plain.dim(0), c = sim_plain.dim(1);
    std::vector<std::vector<int>> out(static_cast<std::size_t>(c));
    for (int q = 0; q < c; ++q) {
        auto& selected = out[static_cast<std::size_t>(q)];
        for (int i = 0; i < n; ++i) {
            if (sim_plain.at(i, q) > 0.0f) selected.push_back(i);  // sigmoid(S) > 0.5
        }
        if (selected.empty()) {
            int best = 0;
            for (int i = 1; i < n; ++i) {
                if (sim_plain.at(i, q) > sim_plain.at(best, q)) best = i;
            }
            selected.push_back(best);
        }
    }
    return out;
}

Value aggregate_query_instances(const std::vector<std::vector<int>>& selections, Value instance_emb) {
    std::vector<Value> rows;
    for (const auto& selected : selections) {
        Value d = mean_rows(gather_rows(instance_emb, selected));
        rows.push_back(reshape(d, {1, instance_emb.val().dim(1)}));
    }
    return concat(0, rows);
}

Value aggregate_query_instances(const Tensor& sim_plain, Value instance_emb) {
    return aggregate_query_instances(aggregation_selections(sim_plain), instance_emb);
}

Tensor language_similarity_target(const Tensor& lang_rows1, const Tensor& lang_rows2) {
    const int c1 = lang_rows1.dim(0), c2 = lang_rows2.dim(0), d = lang_rows1.dim(1);
    if (lang_rows2.dim(1) != d) throw DimensionError("language_similarity_target: width mismatch");
    Tensor a_l({c1, c2});
    for (int i = 0; i < c1; ++i) {
        for (int j = 0; j < c2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < d; ++k) acc += static_cast<double>(lang_rows1.at(i, k)) * lang_rows2.at(j, k);
            a_l.at(i, j) = static_cast<float>(acc);
        }
    }
    return a_l;
}

Value loss_adp_local(Value agg1, Value agg2, const Tensor& lang_target) {
    Value a_v = matmul(agg1, agg2, false, true);
    return kl_softmax_rows_mean(a_v, lang_target);
}

Value loss_adp_local(Value agg1, Value agg2, const Tensor& lang_rows1, const Tensor& lang_rows2) {
    return loss_adp_local(agg1, agg2, language_similarity_target(lang_rows1, lang_rows2));
}

}  // namespace uovn
