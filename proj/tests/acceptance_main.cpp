// Acceptance criteria runner: one pass/fail line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include <json.hpp>

#include "uovn/gradcheck.hpp"
#include "uovn/train.hpp"

namespace fs = std::filesystem;
using namespace uovn;

namespace {

struct Criterion {
    int id;
    std::string name;
    std::function<bool(std::string&)> run;
};

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

// ---- 1: gradient integrity ----
bool crit_gradcheck(std::string& detail) {
    const double t0 = now_seconds();
    const GradCheckSuite suite = gradcheck_suite(1);
    const double secs = now_seconds() - t0;
    bool ok = secs < 120.0;
    for (const auto& c : suite.components) ok = ok && c.max_rel_err < 1e-4;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "worst rel err %.3e over %zu components, %.1fs (budget 120s)", suite.worst,
                  suite.components.size(), secs);
    detail = buf;
    return ok;
}

// ---- 2: hungarian oracle ----
double brute_force_min(const Tensor& cost) {
    const int n = cost.dim(0), m = cost.dim(1);
    double best = std::numeric_limits<double>::infinity();
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

bool crit_hungarian(std::string& detail) {
    const double t0 = now_seconds();
    RandomStream rng(2024);
    int failures = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int m = rng.uniform_int(1, 6);
        const int n = rng.uniform_int(m, 8);
        Tensor cost({n, m});
        for (std::int64_t i = 0; i < cost.numel(); ++i) cost[i] = static_cast<float>(rng.uniform(-4.0, 4.0));
        const Assignment a = hungarian_match(cost);
        const double got = assignment_cost(cost, a);
        const double want = brute_force_min(cost);
        if (std::fabs(got - want) > 1e-9 * (1.0 + std::fabs(want))) ++failures;
    }
    const double secs = now_seconds() - t0;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%d/1000 mismatches, %.2fs (budget 10s)", failures, secs);
    detail = buf;
    return failures == 0 && secs < 10.0;
}

// ---- 3: metric oracles ----
bool crit_metric_oracles(std::string& detail) {
    bool ok = true;
    {
        ApImage img;
        img.num_gt = 1;
        img.scores = {0.7};
        img.iou = {{0.75 / 1.25}};  // 0.6 exactly
        const ApClassResult r = average_precision_class({img});
        ok = ok && std::fabs(r.ap50 - 1.0) < 1e-9 && std::fabs(r.ap_mean - 0.3) < 1e-9;
    }
    {
        std::vector<int> pred(20, 0), gt(20, 0);
        for (int i = 0; i < 10; ++i) gt[static_cast<std::size_t>(i)] = 1;
        for (int i = 2; i < 12; ++i) pred[static_cast<std::size_t>(i)] = 1;
        PqStats st;
        pq_accumulate(st, pred, {{1, 0}}, gt, {{1, 0}});
        ok = ok && std::fabs(pq_finalize(st).pq - 2.0 / 3) < 1e-9;
    }
    {
        std::vector<int> pred(20, 0), gt(20, 0);
        for (int i = 0; i < 10; ++i) gt[static_cast<std::size_t>(i)] = 1;
        for (int i = 4; i < 14; ++i) pred[static_cast<std::size_t>(i)] = 1;
        PqStats st;
        pq_accumulate(st, pred, {{1, 0}}, gt, {{1, 0}});
        ok = ok && std::fabs(pq_finalize(st).pq) < 1e-9;
    }
    {
        std::vector<int> gt{1, 1, 1, 1};
        std::vector<int> pred{1, 1, 0, 0};
        ok = ok && std::fabs(miou(pred, gt, 1) - 0.5) < 1e-9;
    }
    detail = "AP50/mAP, PQ 2/3 and 0, mIoU 0.5 fixtures exact to 1e-9";
    return ok;
}

// ---- 4: equation-level fixtures ----
bool crit_eq_fixtures(std::string& detail) {
    bool ok = true;
    {
        Tensor logits({1, 1});
        ok = ok && binarize_mask_row(logits, 0)[0] == 0;  // logit 0 -> 0
    }
    {
        // S_gt strict boundary: IoU exactly 0.5 stays 0
        GroundTruth gt;
        gt.has_masks = true;
        gt.mask_h = 1;
        gt.mask_w = 4;
        GroundTruthRegion r;
        r.mask = {1, 1, 1, 0};
        gt.regions.push_back(r);
        gt.query_links = {{0}};
        Tensor logits({1, 4});
        logits.at(0, 0) = 9.0f;
        logits.at(0, 1) = 9.0f;
        logits.at(0, 2) = -9.0f;
        logits.at(0, 3) = 9.0f;  // {0,1,3} vs {0,1,2}: IoU = 2/4
        const Tensor s = build_gt_similarity(logits, Tensor({1, 4}), gt);
        ok = ok && s.at(0, 0) == 0.0f;
    }
    ok = ok && std::fabs(giou({1.0, 1.0, 2.0, 2.0}, {2.0, 2.0, 2.0, 2.0}) + 5.0 / 63) < 1e-12;
    {
        Graph g;
        Value v = g.constant(Tensor::from({3}, {0.2f, -0.4f, 0.6f}));
        Value f = g.constant(Tensor::from({3}, {0.9f, 0.1f, 0.3f}));
        ok = ok && g.scalar(loss_adp_global(v, v, f, f)) == 0.0;
    }
    {
        Graph g;
        RandomStream rng(7);
        Tensor f1({3, 4}), f2({2, 4});
        for (std::int64_t i = 0; i < f1.numel(); ++i) f1[i] = static_cast<float>(rng.normal());
        for (std::int64_t i = 0; i < f2.numel(); ++i) f2[i] = static_cast<float>(rng.normal());
        ok = ok && std::fabs(g.scalar(loss_adp_local(g.constant(f1), g.constant(f2), f1, f2))) < 1e-9;
        for (int trial = 0; trial < 50; ++trial) {
            Tensor a1({3, 4}), a2({2, 4});
            for (std::int64_t i = 0; i < a1.numel(); ++i) a1[i] = static_cast<float>(rng.normal());
            for (std::int64_t i = 0; i < a2.numel(); ++i) a2[i] = static_cast<float>(rng.normal());
            ok = ok && g.scalar(loss_adp_local(g.constant(a1), g.constant(a2), f1, f2)) >= 0.0;
        }
    }
    {
        LossWeights w;  // paper weights 2/2/1/1
        const double total = w.l1 + w.l2 + w.l3 + w.l4 * (0.5 + 0.5);
        ok = ok && std::fabs(total - 6.0) < 1e-12;
    }
    detail = "binary rule, strict S_gt, GIoU -5/63, adaptation identities, total 6.0";
    return ok;
}

// ---- 5: MMDA degeneracy ----
bool crit_mmda_degeneracy(std::string& detail) {
    MMDAConfig cfg;
    cfg.k = 4;
    cfg.heads = 4;
    cfg.layers = 1;
    cfg.d_f = 16;
    ParamStore store;
    RandomStream rng(31);
    init_pixel_decoder_params(store, cfg, {6, 6}, rng);
    Graph g;
    BoundParams bound(g, store, false);
    RandomStream drng(32);
    Tensor l0({2, 2, 6}), l1({4, 4, 6});
    for (std::int64_t i = 0; i < l0.numel(); ++i) l0[i] = static_cast<float>(drng.normal());
    for (std::int64_t i = 0; i < l1.numel(); ++i) l1[i] = static_cast<float>(drng.normal());
    PyramidValues pyr;
    pyr.levels = {g.constant(l0), g.constant(l1)};
    pyr.strides = {8, 4};
    Tensor q({3, 16});
    for (std::int64_t i = 0; i < q.numel(); ++i) q[i] = static_cast<float>(drng.normal());
    QueryFeatureValues qf;
    qf.rows = l2_normalize_rows(g.constant(q));
    qf.pooled = mean_rows(qf.rows);
    MMDADiag diag;
    pixel_decode(bound, pyr, qf, cfg, &diag);

    TokenGrids grids = project_pyramid(bound, pyr, cfg);
    const int dh = cfg.d_f / cfg.heads;
    bool gather_exact = true;
    for (int l = 0; l < 2; ++l) {
        const auto [h, w] = grids.sizes[static_cast<std::size_t>(l)];
        const int off = grids.offsets[static_cast<std::size_t>(l)];
        Value tok_l = slice(grids.tokens, 0, off, off + h * w);
        Value vmap = linear_map(tok_l, bound("pixdec.layer0.val_vis.w"), bound("pixdec.layer0.val_vis.b"));
        for (int hd = 0; hd < cfg.heads; ++hd) {
            const Tensor& sampled = diag.sampled[0][static_cast<std::size_t>(hd)][static_cast<std::size_t>(l)].val();
            for (int cell = 0; cell < h * w; ++cell) {
                for (int k = 0; k < cfg.k; ++k) {
                    const int row = (off + cell) * cfg.k + k;
                    for (int j = 0; j < dh; ++j) {
                        gather_exact = gather_exact && sampled.at(row, j) == vmap.val().at(cell, hd * dh + j);
                    }
                }
            }
        }
    }
    bool sums_ok = true;
    for (const Value& attn : diag.attention[0]) {
        const Tensor& a = attn.val();
        for (int t = 0; t < a.dim(0); ++t) {
            double s = 0;
            for (int j = 0; j < a.dim(1); ++j) s += a.at(t, j);
            sums_ok = sums_ok && std::fabs(s - 1.0) < 1e-6;
        }
    }
    detail = std::string("zero-offset sampling ") + (gather_exact ? "bit-exact" : "MISMATCH") +
             ", attention sums within 1e-6: " + (sums_ok ? "yes" : "no");
    return gather_exact && sums_ok;
}

RunConfig overfit_config() {
    RunConfig cfg;
    cfg.model.d_f = 32;
    cfg.model.k = 4;
    cfg.model.n_queries = 8;
    cfg.model.heads = 4;
    cfg.model.pixel_layers = 2;
    cfg.model.decoder_rounds = 1;
    cfg.model.enc_channels = {16, 24, 32, 40};
    cfg.model.text_table_rows = 1024;
    cfg.model.text_embed_dim = 32;
    cfg.optim.steps = 300;
    cfg.optim.step_size = 0.05;
    cfg.optim.seed = 11;
    cfg.optim.checkpoint_every = 100;
    cfg.data.generate = true;
    cfg.data.gen_domains = {"D1", "D3"};
    cfg.data.samples_per_domain = 8;
    cfg.data.image_size = 64;
    cfg.data.gen_seed = 7;
    return cfg;
}

// ---- 6 + 9: overfit run and partition invariant ----
int g_partition_violations = -1;

bool crit_overfit(std::string& detail) {
    const double t0 = now_seconds();
    const fs::path dir = fs::temp_directory_path() / "uovn_acceptance_overfit";
    fs::remove_all(dir);
    const RunConfig cfg = overfit_config();
    const TrainResult res = cmd_train(cfg, dir.string());

    // step-1 loss vs final from the log
    double first = 0, final_total = 0;
    {
        std::ifstream is(dir / "loss.jsonl");
        std::string line;
        bool have_first = false;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            if (!have_first && j["step"].get<int>() == 1) {
                first = j["total"].get<double>();
                have_first = true;
            }
            final_total = j["total"].get<double>();
        }
    }
    const bool loss_ok = final_total < 0.1 * first;

    UOVNModel model = model_from_checkpoint(dir.string());
    const Dataset train_ds = load_training_data(cfg);
    const EvalReport det_rep = eval_dataset(model, train_ds, {"det"});
    const double ap50 = det_rep.tasks.count("det") && det_rep.tasks.at("det").run
                            ? det_rep.tasks.at("det").scalars.at("AP50")
                            : 0.0;

    const Dataset d1 = build_dataset({stock_domain("D1")}, cfg.data.samples_per_domain, cfg.data.gen_seed,
                                     cfg.data.image_size);
    const EvalReport pan_rep = eval_dataset(model, d1, {"pan"});
    const double pq = pan_rep.tasks.count("pan") && pan_rep.tasks.at("pan").run
                          ? pan_rep.tasks.at("pan").scalars.at("PQ")
                          : 0.0;
    g_partition_violations = det_rep.partition_violations + pan_rep.partition_violations;

    const double secs = now_seconds() - t0;
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "loss %.3f -> %.3f (%.1f%% drop, need >= 90%%), train AP50 %.3f (need >= 0.9), D1 PQ %.3f "
                  "(need >= 0.6), %.0fs (budget 600s)",
                  first, final_total, first > 0 ? 100.0 * (1.0 - final_total / first) : 0.0, ap50, pq, secs);
    detail = buf;
    (void)res;
    return loss_ok && ap50 >= 0.9 && pq >= 0.6 && secs < 600.0;
}

// ---- 7: adaptation efficacy ----
bool crit_adaptation(std::string& detail) {
    RunConfig cfg = overfit_config();
    cfg.data.gen_domains = {"D1", "D2"};
    cfg.optim.seed = 13;

    const fs::path base = fs::temp_directory_path() / "uovn_acceptance_adapt";
    fs::remove_all(base);
    RunConfig on = cfg;
    on.loss.l4 = 1.0;
    RunConfig off = cfg;
    off.loss.l4 = 0.0;
    cmd_train(on, (base / "on").string());
    cmd_train(off, (base / "off").string());

    std::vector<std::pair<AnnotatedSample, AnnotatedSample>> pairs;
    for (int i = 0; i < 8; ++i) {
        pairs.emplace_back(generate_sample(stock_domain("D1"), 10000 + static_cast<std::uint64_t>(i), 64),
                           generate_sample(stock_domain("D2"), 20000 + static_cast<std::uint64_t>(i), 64));
    }
    UOVNModel model_on = model_from_checkpoint((base / "on").string());
    UOVNModel model_off = model_from_checkpoint((base / "off").string());
    const double gap_on = adaptation_gap(model_on, pairs);
    const double gap_off = adaptation_gap(model_off, pairs);
    char buf[160];
    const double reduction = gap_off > 0 ? 100.0 * (1.0 - gap_on / gap_off) : 0.0;
    std::snprintf(buf, sizeof(buf), "held-out gap %.4f (l4=1) vs %.4f (l4=0): %.1f%% reduction (need >= 30%%)",
                  gap_on, gap_off, reduction);
    detail = buf;
    return gap_on <= 0.7 * gap_off;
}

// ---- 8: chunking invariance ----
bool crit_chunking(std::string& detail) {
    ModelConfig mc;
    mc.d_f = 16;
    mc.k = 2;
    mc.n_queries = 8;
    mc.heads = 2;
    mc.pixel_layers = 1;
    mc.decoder_rounds = 1;
    mc.enc_channels = {8, 8, 8, 8};
    mc.text_table_rows = 512;
    mc.text_embed_dim = 16;
    UOVNModel model(mc);
    model.init_params(77);
    RandomStream rng(78);
    Tensor image({64, 64, 3});
    for (std::int64_t i = 0; i < image.numel(); ++i) image[i] = static_cast<float>(rng.uniform());
    std::vector<std::string> queries;
    for (int i = 0; i < 300; ++i) queries.push_back("thing number " + std::to_string(i));
    const PredictionSet chunked = model.infer(image, queries, {}, 256);
    const PredictionSet whole = model.infer(image, queries, {}, 1 << 20);
    bool equal = chunked.sim.shape() == whole.sim.shape();
    for (std::int64_t i = 0; equal && i < chunked.sim.numel(); ++i) equal = chunked.sim[i] == whole.sim[i];
    for (std::int64_t i = 0; equal && i < chunked.boxes.numel(); ++i) equal = chunked.boxes[i] == whole.boxes[i];
    for (std::int64_t i = 0; equal && i < chunked.mask_logits.numel(); ++i) {
        equal = chunked.mask_logits[i] == whole.mask_logits[i];
    }
    equal = equal && chunked.binary == whole.binary && chunked.labels.best_class == whole.labels.best_class;
    detail = equal ? "C=300 chunked (256+44) outputs identical to unchunked, exact equality"
                   : "chunked and unchunked outputs differ";
    return equal;
}

// ---- 9: panoptic partition during eval ----
bool crit_partition(std::string& detail) {
    // the overfit criterion already evaluated two datasets; verify and add a
    // fresh untrained-model eval for coverage
    ModelConfig mc;
    mc.d_f = 16;
    mc.k = 2;
    mc.n_queries = 8;
    mc.heads = 2;
    mc.pixel_layers = 1;
    mc.decoder_rounds = 1;
    mc.enc_channels = {8, 8, 8, 8};
    mc.text_table_rows = 512;
    mc.text_embed_dim = 16;
    UOVNModel model(mc);
    model.init_params(91);
    const Dataset ds = build_dataset({stock_domain("D1")}, 4, 39);
    const EvalReport rep = eval_dataset(model, ds, {"pan"});
    const int total = rep.partition_violations + (g_partition_violations > 0 ? g_partition_violations : 0);
    char buf[120];
    std::snprintf(buf, sizeof(buf), "%d violation(s) across evaluation images", total);
    detail = buf;
    return total == 0 && g_partition_violations == 0;
}

}  // namespace

int main() {
    std::vector<Criterion> criteria = {
        {1, "gradient integrity", crit_gradcheck},
        {2, "hungarian oracle", crit_hungarian},
        {3, "metric oracles", crit_metric_oracles},
        {4, "equation fixtures", crit_eq_fixtures},
        {5, "mmda degeneracy", crit_mmda_degeneracy},
        {6, "overfit run", crit_overfit},
        {7, "adaptation efficacy", crit_adaptation},
        {8, "chunking invariance", crit_chunking},
        {9, "panoptic partition", crit_partition},
    };
    int failed = 0;
    for (auto& c : criteria) {
        std::string detail;
        bool ok = false;
        try {
            ok = c.run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        if (!ok) ++failed;
        std::printf("criterion %d [%s]: %s — %s\n", c.id, ok ? "PASS" : "FAIL", c.name.c_str(), detail.c_str());
        std::fflush(stdout);
    }
    if (failed) std::printf("%d criterion(s) failed\n", failed);
    else std::printf("all 9 acceptance criteria passed\n");
    return failed == 0 ? 0 : 1;
}
