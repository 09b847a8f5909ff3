#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "uovn/losses.hpp"
#include "uovn/train.hpp"

using namespace uovn;

namespace {

Tensor randn(std::vector<int> shape, RandomStream& rng, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(sd * rng.normal());
    return t;
}

double brute_force_min(const Tensor& cost) {
    const int n = cost.dim(0), m = cost.dim(1);
    std::vector<int> preds(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) preds[static_cast<std::size_t>(i)] = i;
    double best = std::numeric_limits<double>::infinity();
    // enumerate ordered selections of m predictions out of n
    std::function<void(int, double, std::uint64_t)> rec = [&](int j, double acc, std::uint64_t used) {
        if (j == m) {
            if (acc < best) best = acc;
            return;
        }
        for (int p = 0; p < n; ++p) {
            if (used & (1ull << p)) continue;
            rec(j + 1, acc + cost.at(p, j), used | (1ull << p));
        }
    };
    rec(0, 0.0, 0);
    return best;
}

}  // namespace

TEST_CASE("giou fixtures") {
    CHECK(giou({0.5, 0.5, 0.4, 0.4}, {0.5, 0.5, 0.4, 0.4}) == doctest::Approx(1.0));
    // corner boxes [0,0,2,2] and [1,1,3,3]
    const double v = giou({1.0, 1.0, 2.0, 2.0}, {2.0, 2.0, 2.0, 2.0});
    CHECK(v == doctest::Approx(-5.0 / 63).epsilon(1e-9));
    CHECK(giou({0.0, 0.0, 1.0, 1.0}, {100.0, 100.0, 1.0, 1.0}) < -0.9);
    // degenerate boxes are clamped rather than dividing by zero
    CHECK(std::isfinite(giou({0.5, 0.5, 0.0, -1.0}, {0.5, 0.5, 0.2, 0.2})));
}

TEST_CASE("giou_value matches the plain implementation") {
    RandomStream rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const BoxD a{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
        const BoxD b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5)};
        Graph g;
        Tensor box({4});
        box[0] = static_cast<float>(a.cx);
        box[1] = static_cast<float>(a.cy);
        box[2] = static_cast<float>(a.w);
        box[3] = static_cast<float>(a.h);
        const double got = giou_value(g.constant(box), b).val()[0];
        const BoxD af{box[0], box[1], box[2], box[3]};
        CHECK(got == doctest::Approx(giou(af, b)).epsilon(1e-5));
    }
}

TEST_CASE("hungarian fixtures") {
    {
        Tensor cost = Tensor::from({2, 2}, {1, 2, 2, 1});
        const Assignment a = hungarian_match(cost);
        REQUIRE(a.size() == 2);
        CHECK(a[0] == std::pair<int, int>{0, 0});
        CHECK(a[1] == std::pair<int, int>{1, 1});
        CHECK(assignment_cost(cost, a) == doctest::Approx(2.0));
    }
    {
        // rows = predictions, columns = ground truths
        Tensor cost = Tensor::from({3, 3}, {4, 1, 3, 2, 0, 5, 3, 2, 2});
        const Assignment a = hungarian_match(cost);
        CHECK(assignment_cost(cost, a) == doctest::Approx(5.0));
        CHECK(a[0] == std::pair<int, int>{1, 0});
        CHECK(a[1] == std::pair<int, int>{0, 1});
        CHECK(a[2] == std::pair<int, int>{2, 2});
    }
    {
        Tensor cost = Tensor::from({3, 3}, {0, 9, 9, 9, 0, 9, 9, 9, 0});
        const Assignment a = hungarian_match(cost);
        for (int j = 0; j < 3; ++j) CHECK(a[static_cast<std::size_t>(j)].first == j);
    }
    CHECK_THROWS_AS(hungarian_match(Tensor({2, 3})), InputError);
}

TEST_CASE("hungarian ties resolve to the lexicographically smallest assignment") {
    Tensor cost = Tensor::from({3, 2}, {1, 1, 1, 1, 1, 1});
    const Assignment a = hungarian_match(cost);
    CHECK(a[0] == std::pair<int, int>{0, 0});
    CHECK(a[1] == std::pair<int, int>{1, 1});
}

TEST_CASE("hungarian equals brute force on random matrices") {
    RandomStream rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = rng.uniform_int(1, 6);
        const int n = rng.uniform_int(m, 8);
        Tensor cost({n, m});
        for (std::int64_t i = 0; i < cost.numel(); ++i) cost[i] = static_cast<float>(rng.uniform(-3.0, 3.0));
        const Assignment a = hungarian_match(cost);
        CHECK(assignment_cost(cost, a) == doctest::Approx(brute_force_min(cost)).epsilon(1e-12));
    }
}

namespace {

GroundTruth one_region_gt(bool masks) {
    GroundTruth gt;
    gt.has_masks = masks;
    gt.mask_h = 4;
    gt.mask_w = 4;
    GroundTruthRegion r;
    r.box = {0.5, 0.5, 0.5, 0.5};
    if (masks) {
        r.mask.assign(16, 0);
        for (int i : {5, 6, 9, 10}) r.mask[static_cast<std::size_t>(i)] = 1;
    }
    r.primary_query = 0;
    gt.regions.push_back(r);
    gt.query_links = {{0}};
    return gt;
}

}  // namespace

TEST_CASE("matching_cost: dominance and modality gating") {
    GroundTruth gt = one_region_gt(true);
    Tensor mask_logits({2, 16});
    for (int p = 0; p < 16; ++p) {
        mask_logits.at(0, p) = gt.regions[0].mask[static_cast<std::size_t>(p)] ? 15.0f : -15.0f;
        mask_logits.at(1, p) = -15.0f;
    }
    Tensor boxes({2, 4});
    boxes.at(0, 0) = 0.5f;
    boxes.at(0, 1) = 0.5f;
    boxes.at(0, 2) = 0.5f;
    boxes.at(0, 3) = 0.5f;
    boxes.at(1, 0) = 0.1f;
    boxes.at(1, 1) = 0.1f;
    boxes.at(1, 2) = 0.05f;
    boxes.at(1, 3) = 0.05f;
    Tensor sim({2, 1});
    sim.at(0, 0) = 6.0f;
    sim.at(1, 0) = -6.0f;
    LossWeights w;
    const Tensor cost = matching_cost(mask_logits, boxes, sim, gt, w);
    CHECK(cost.at(0, 0) < cost.at(1, 0));  // the matching prediction dominates

    GroundTruth box_only = one_region_gt(false);
    const Tensor cost2 = matching_cost(mask_logits, boxes, sim, box_only, w);
    // no mask term: cost = l2*(smoothL1 + 1-giou) - l3*sigmoid(S)
    const double expect0 = w.l2 * (0.0 + (1.0 - giou({0.5, 0.5, 0.5, 0.5}, box_only.regions[0].box))) -
                           w.l3 * (1.0 / (1.0 + std::exp(-6.0)));
    CHECK(cost2.at(0, 0) == doctest::Approx(expect0).epsilon(1e-5));
}

TEST_CASE("loss_seg fixtures") {
    Graph g;
    GroundTruth gt;
    gt.has_masks = true;
    gt.mask_h = 1;
    gt.mask_w = 4;
    GroundTruthRegion r;
    r.mask = {1, 1, 0, 0};
    r.box = {0.25, 0.5, 0.5, 1.0};
    gt.regions.push_back(r);
    gt.query_links = {{0}};
    Assignment a{{0, 0}};

    {
        // perfect prediction: BCE ~ 0 and dice bounded by the epsilon term
        Tensor logits({1, 4});
        logits.at(0, 0) = 25.0f;
        logits.at(0, 1) = 25.0f;
        logits.at(0, 2) = -25.0f;
        logits.at(0, 3) = -25.0f;
        GatedLoss l = loss_seg({g.constant(logits)}, gt, a);
        CHECK(l.present);
        CHECK(g.scalar(l.value) < 0.25);  // 1/(2*|G|+1) floor with |G| = 2
        CHECK(g.scalar(l.value) == doctest::Approx(1.0 - 4.0 / 5.0).epsilon(1e-4));
    }
    {
        // uniform p = 0.5 on a 2-of-4 ground truth: dice term 0.6, bce ln 2
        Tensor logits({1, 4});
        GatedLoss l = loss_seg({g.constant(logits)}, gt, a);
        CHECK(g.scalar(l.value) == doctest::Approx(0.6 + std::log(2.0)).epsilon(1e-6));
    }
    {
        // no masks in the ground truth: gated off with a flag
        GroundTruth none = gt;
        none.has_masks = false;
        GatedLoss l = loss_seg({g.constant(Tensor({1, 4}))}, none, a);
        CHECK_FALSE(l.present);
        CHECK(g.scalar(l.value) == 0.0);
    }
    {
        // empty ground-truth mask: the written formula yields ~1 here (the
        // 2*sum(pg) numerator vanishes); exercised so the behavior is pinned.
        GroundTruth empty = gt;
        empty.regions[0].mask = {0, 0, 0, 0};
        Tensor logits({1, 4});
        for (int i = 0; i < 4; ++i) logits.at(0, i) = -30.0f;
        GatedLoss l = loss_seg({g.constant(logits)}, empty, a);
        CHECK(g.scalar(l.value) == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("dice closed-form fixture") {
    Graph g;
    Tensor target({4});
    target[0] = 1.0f;
    target[1] = 1.0f;
    Value d = dice_loss(g.constant(Tensor({4})), target);
    CHECK(g.scalar(d) == doctest::Approx(0.6).epsilon(1e-9));
}

TEST_CASE("loss_det fixtures") {
    Graph g;
    GroundTruth gt;
    gt.has_boxes = true;
    gt.has_masks = false;
    GroundTruthRegion r;
    r.box = {0.5, 0.5, 0.4, 0.4};
    gt.regions.push_back(r);
    gt.query_links = {{0}};
    Assignment a{{0, 0}};
    {
        Tensor boxes({1, 4});
        boxes.at(0, 0) = 0.5f;
        boxes.at(0, 1) = 0.5f;
        boxes.at(0, 2) = 0.4f;
        boxes.at(0, 3) = 0.4f;
        GatedLoss l = loss_det(g.constant(boxes), gt, a);
        CHECK(g.scalar(l.value) == doctest::Approx(0.0).epsilon(1e-6));
    }
    {
        // single coordinate off by 0.5: smooth-L1 contributes 0.125
        Tensor pred({4});
        pred[0] = 1.0f;
        Tensor target({4});
        target[0] = 0.5f;
        Value sl = smooth_l1_sum(g.constant(pred), target);
        CHECK(g.scalar(sl) == doctest::Approx(0.125).epsilon(1e-9));
    }
    {
        // the -5/63 giou case contributes 1 + 5/63
        GroundTruth g2;
        g2.has_boxes = true;
        g2.has_masks = false;
        GroundTruthRegion rr;
        rr.box = {2.0, 2.0, 2.0, 2.0};
        g2.regions.push_back(rr);
        g2.query_links = {{0}};
        Tensor boxes({1, 4});
        boxes.at(0, 0) = 1.0f;
        boxes.at(0, 1) = 1.0f;
        boxes.at(0, 2) = 2.0f;
        boxes.at(0, 3) = 2.0f;
        GatedLoss l = loss_det(g.constant(boxes), g2, a);
        // smooth-L1: |d|=1 per center coordinate, both at the linear branch
        const double sl1 = 2 * 0.5;
        CHECK(g.scalar(l.value) == doctest::Approx(sl1 + 1.0 + 5.0 / 63).epsilon(1e-6));
    }
    GroundTruth none;
    none.has_boxes = false;
    GatedLoss l = loss_det(g.constant(Tensor({1, 4})), none, {});
    CHECK_FALSE(l.present);
}

TEST_CASE("build_gt_similarity: strict boundary and many-to-many") {
    GroundTruth gt;
    gt.has_masks = true;
    gt.mask_h = 2;
    gt.mask_w = 3;
    GroundTruthRegion r1;
    r1.mask = {0, 1, 1, 0, 1, 0};  // cells {1,2,4}
    r1.box = {0.5, 0.5, 1.0, 1.0};
    gt.regions.push_back(r1);
    gt.query_links = {{0}, {0}};  // two duplicate queries over one region

    Tensor mask_logits({2, 6});
    // prediction 0 identical to the region -> IoU 1
    for (int i : {1, 2, 4}) mask_logits.at(0, i) = 9.0f;
    for (int i : {0, 3, 5}) mask_logits.at(0, i) = -9.0f;
    // prediction 1: {1,2,5} vs {1,2,4}: IoU = 2/4 = 0.5 exactly -> strict 0
    for (int i : {1, 2, 5}) mask_logits.at(1, i) = 9.0f;
    for (int i : {0, 3, 4}) mask_logits.at(1, i) = -9.0f;
    Tensor boxes({2, 4});
    const Tensor s_gt = build_gt_similarity(mask_logits, boxes, gt);
    CHECK(s_gt.at(0, 0) == 1.0f);
    CHECK(s_gt.at(0, 1) == 1.0f);  // both duplicate queries hit
    CHECK(s_gt.at(1, 0) == 0.0f);  // IoU exactly 0.5 is not enough
    CHECK(s_gt.at(1, 1) == 0.0f);

    // box route when the sample has no masks: IoU exactly 0.5 -> 0
    GroundTruth gb;
    gb.has_masks = false;
    GroundTruthRegion br;
    br.box = {0.5, 0.5, 1.0, 1.0};
    gb.regions.push_back(br);
    gb.query_links = {{0}};
    Tensor bx({1, 4});
    bx.at(0, 0) = 0.5f + 1.0f / 3.0f;
    bx.at(0, 1) = 0.5f;
    bx.at(0, 2) = 1.0f;
    bx.at(0, 3) = 1.0f;
    const Tensor s2 = build_gt_similarity(Tensor({1, 1}), bx, gb);
    const double iou = box_iou({bx.at(0, 0), 0.5, 1.0, 1.0}, br.box);
    CHECK(iou <= 0.5);
    CHECK(s2.at(0, 0) == 0.0f);
}

TEST_CASE("loss_cls fixtures") {
    Graph g;
    Tensor s_gt({2, 2});
    s_gt.at(0, 0) = 1.0f;
    s_gt.at(1, 1) = 1.0f;
    {
        Tensor s({2, 2});
        s.at(0, 0) = 22.0f;
        s.at(0, 1) = -22.0f;
        s.at(1, 0) = -22.0f;
        s.at(1, 1) = 22.0f;
        CHECK(g.scalar(loss_cls(g.constant(s), s_gt)) < 1e-8);
    }
    {
        Tensor s({2, 2});
        CHECK(g.scalar(loss_cls(g.constant(s), s_gt)) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }
}

TEST_CASE("loss_adp_global fixtures") {
    Graph g;
    {
        Value v = g.constant(Tensor::from({3}, {0.3f, -0.2f, 0.9f}));
        Value f = g.constant(Tensor::from({3}, {0.7f, 0.1f, -0.4f}));
        CHECK(g.scalar(loss_adp_global(v, v, f, f)) == doctest::Approx(0.0));
    }
    {
        // cosines 0.3 and 0.8 by construction
        Value v1 = g.constant(Tensor::from({2}, {1.0f, 0.0f}));
        Value v2 = g.constant(Tensor::from({2}, {0.3f, static_cast<float>(std::sqrt(1.0 - 0.09))}));
        Value f1 = g.constant(Tensor::from({2}, {1.0f, 0.0f}));
        Value f2 = g.constant(Tensor::from({2}, {0.8f, 0.6f}));
        CHECK(g.scalar(loss_adp_global(v1, v2, f1, f2)) == doctest::Approx(0.5).epsilon(1e-6));
    }
    {
        RandomStream rng(4);
        for (int trial = 0; trial < 30; ++trial) {
            Value v1 = g.constant(randn({4}, rng));
            Value v2 = g.constant(randn({4}, rng));
            Value f1 = g.constant(randn({4}, rng));
            Value f2 = g.constant(randn({4}, rng));
            const double l = g.scalar(loss_adp_global(v1, v2, f1, f2));
            CHECK(l >= 0.0);
            CHECK(l <= 2.0);
        }
    }
    {
        // zero-norm pooled vector: cosine defined as 0
        Value z = g.constant(Tensor({3}));
        Value f = g.constant(Tensor::from({3}, {1.0f, 0.0f, 0.0f}));
        CHECK(g.scalar(loss_adp_global(z, z, f, f)) == doctest::Approx(1.0));
    }
}

TEST_CASE("aggregate_query_instances fixtures") {
    Graph g;
    RandomStream rng(5);
    Tensor o = randn({3, 4}, rng);
    {
        Tensor sim({3, 1});
        sim.at(0, 0) = 2.0f;
        sim.at(1, 0) = -2.0f;
        sim.at(2, 0) = -2.0f;
        const Tensor agg = aggregate_query_instances(sim, g.constant(o)).val();
        for (int j = 0; j < 4; ++j) CHECK(agg.at(0, j) == o.at(0, j));
    }
    {
        Tensor sim({3, 1});
        sim.at(0, 0) = 2.0f;
        sim.at(1, 0) = 2.0f;
        sim.at(2, 0) = -2.0f;
        const Tensor agg = aggregate_query_instances(sim, g.constant(o)).val();
        for (int j = 0; j < 4; ++j) CHECK(agg.at(0, j) == doctest::Approx(0.5 * (o.at(0, j) + o.at(1, j))).epsilon(1e-6));
    }
    {
        Tensor sim({3, 1});
        sim.at(0, 0) = -5.0f;
        sim.at(1, 0) = -1.0f;  // largest -> fallback row
        sim.at(2, 0) = -2.0f;
        const Tensor agg = aggregate_query_instances(sim, g.constant(o)).val();
        for (int j = 0; j < 4; ++j) CHECK(agg.at(0, j) == o.at(1, j));
    }
}

TEST_CASE("loss_adp_local fixtures") {
    Graph g;
    RandomStream rng(6);
    const Tensor f1 = randn({3, 4}, rng);
    const Tensor f2 = randn({2, 4}, rng);
    {
        // A_V = A_L when the aggregated instances equal the language rows
        Value a1 = g.constant(f1);
        Value a2 = g.constant(f2);
        CHECK(g.scalar(loss_adp_local(a1, a2, f1, f2)) == doctest::Approx(0.0).epsilon(1e-9));
    }
    {
        // target rows ~ [1-d, d], instance rows uniform: KL -> ln 2
        Tensor lang1({1, 2});
        lang1.at(0, 0) = 20.0f;  // -> softmax ~ [1, 2e-9] against C2=2 columns
        Tensor lang2({2, 2});
        lang2.at(0, 0) = 1.0f;
        lang2.at(1, 1) = 1.0f;
        // A_L = lang1 * lang2^T = [20, 0]
        Value a1 = g.constant(Tensor({1, 2}));  // A_V = zeros -> uniform rows
        Value a2 = g.constant(Tensor({2, 2}));
        const double kl = g.scalar(loss_adp_local(a1, a2, lang1, lang2));
        CHECK(kl == doctest::Approx(std::log(2.0)).epsilon(1e-3));
    }
    {
        RandomStream r2(7);
        for (int trial = 0; trial < 30; ++trial) {
            Value a1 = g.constant(randn({3, 4}, r2));
            Value a2 = g.constant(randn({2, 4}, r2));
            CHECK(g.scalar(loss_adp_local(a1, a2, randn({3, 4}, r2), randn({2, 4}, r2))) >= 0.0);
        }
    }
}

TEST_CASE("weighted total at paper weights: unit sub-losses give 6.0") {
    LossWeights w;
    const double total = w.l1 * 1.0 + w.l2 * 1.0 + w.l3 * 1.0 + w.l4 * (0.5 + 0.5);
    CHECK(total == doctest::Approx(6.0));
    // and the graph-side combination agrees
    Graph g;
    Value one = g.constant(Tensor::scalar(1.0f));
    Value half = g.constant(Tensor::scalar(0.5f));
    Value tot = add(add(add(scale(one, w.l1), scale(one, w.l2)), scale(one, w.l3)),
                    scale(add(half, half), w.l4));
    CHECK(g.scalar(tot) == doctest::Approx(6.0));
}

TEST_CASE("removing GT masks changes only the segmentation pathway") {
    // A dominant prediction keeps the assignment stable across modalities.
    Graph g;
    GroundTruth with_masks = one_region_gt(true);
    GroundTruth box_only = one_region_gt(false);

    Tensor mask_logits({3, 16});
    for (int p = 0; p < 16; ++p) {
        mask_logits.at(0, p) = with_masks.regions[0].mask[static_cast<std::size_t>(p)] ? 12.0f : -12.0f;
        mask_logits.at(1, p) = -12.0f;
        mask_logits.at(2, p) = -12.0f;
    }
    Tensor boxes({3, 4});
    boxes.at(0, 0) = 0.5f;
    boxes.at(0, 1) = 0.5f;
    boxes.at(0, 2) = 0.5f;
    boxes.at(0, 3) = 0.5f;
    for (int i = 1; i < 3; ++i) {
        boxes.at(i, 0) = 0.05f;
        boxes.at(i, 1) = 0.05f;
        boxes.at(i, 2) = 0.02f;
        boxes.at(i, 3) = 0.02f;
    }
    Tensor sim({3, 1});
    sim.at(0, 0) = 8.0f;
    sim.at(1, 0) = -8.0f;
    sim.at(2, 0) = -8.0f;
    LossWeights w;

    auto run = [&](const GroundTruth& gt) {
        const Tensor cost = matching_cost(mask_logits, boxes, sim, gt, w);
        const Assignment a = hungarian_match(cost);
        Value box_v = g.constant(boxes);
        Value sim_v = g.constant(sim);
        Value mask_v = g.constant(mask_logits);
        GatedLoss seg = loss_seg({mask_v}, gt, a);
        GatedLoss det = loss_det(box_v, gt, a);
        const Tensor s_gt = build_gt_similarity(mask_logits, boxes, gt);
        Value cls = loss_cls(sim_v, s_gt);
        return std::tuple<Assignment, bool, double, double, double>{a, seg.present, g.scalar(seg.value),
                                                                    g.scalar(det.value), g.scalar(cls)};
    };
    const auto [a1, seg_present1, seg1, det1, cls1] = run(with_masks);
    const auto [a2, seg_present2, seg2, det2, cls2] = run(box_only);
    CHECK(a1 == a2);
    CHECK(seg_present1);
    CHECK_FALSE(seg_present2);
    CHECK(seg2 == 0.0);
    CHECK(det1 == doctest::Approx(det2).epsilon(1e-9));
    CHECK(cls1 == doctest::Approx(cls2).epsilon(1e-9));
}
