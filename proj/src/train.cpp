#include "uovn/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace uovn {

namespace {

double sigmoid_d(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

Value scalar_const(Graph& g, double v) { return g.constant(Tensor::scalar(static_cast<float>(v))); }

}  // namespace

SampleLosses sample_losses(const UOVNModel::Forward& f, const GroundTruth& gt, const LossWeights& w, bool aux,
                           const SampleDecisions* frozen, SampleDecisions* record) {
    SampleLosses out;
    const Tensor& mask_logits = f.mask_logits.val();
    const Tensor& boxes = f.boxes.val();
    const Tensor& sim = f.sim.val();
    if (frozen) {
        out.assignment = frozen->assignment;
    } else {
        const Tensor cost = matching_cost(mask_logits, boxes, sim, gt, w);
        out.assignment = hungarian_match(cost);
    }

    std::vector<Value> mask_sets{f.mask_logits};
    if (aux) {
        for (const Value& v : f.instances.aux_mask_logits) mask_sets.push_back(v);
    }
    out.seg = loss_seg(mask_sets, gt, out.assignment);
    out.det = loss_det(f.boxes, gt, out.assignment);
    const Tensor s_gt = frozen ? frozen->sim_gt : build_gt_similarity(mask_logits, boxes, gt);
    out.cls = loss_cls(f.sim, s_gt);
    if (record) {
        record->assignment = out.assignment;
        record->sim_gt = s_gt;
        record->attn_blocks = f.instances.attn_blocks;
    }
    return out;
}

PairLoss paired_loss(BoundParams& bound, const UOVNModel::Forward& fa, const GroundTruth& ga,
                     const UOVNModel::Forward& fb, const GroundTruth& gb, bool cross_domain, const LossWeights& w,
                     bool aux, const PairDecisions* frozen, PairDecisions* record) {
    Graph& g = bound.graph();
    SampleLosses la = sample_losses(fa, ga, w, aux, frozen ? &frozen->a : nullptr, record ? &record->a : nullptr);
    SampleLosses lb = sample_losses(fb, gb, w, aux, frozen ? &frozen->b : nullptr, record ? &record->b : nullptr);

    Value seg = scale(add(la.seg.value, lb.seg.value), 0.5);
    Value det = scale(add(la.det.value, lb.det.value), 0.5);
    Value cls = scale(add(la.cls, lb.cls), 0.5);

    Value adp_g = scalar_const(g, 0.0);
    Value adp_l = scalar_const(g, 0.0);
    if (cross_domain && w.l4 > 0.0) {
        adp_g = loss_adp_global(fa.encoder_pooled, fb.encoder_pooled, fa.queries.pooled, fb.queries.pooled);
        const auto sel_a = frozen ? frozen->a.agg_selections : aggregation_selections(fa.sim.val());
        const auto sel_b = frozen ? frozen->b.agg_selections : aggregation_selections(fb.sim.val());
        const Tensor target = frozen ? frozen->adp_target
                                     : language_similarity_target(fa.queries.rows.val(), fb.queries.rows.val());
        if (record) {
            record->a.agg_selections = sel_a;
            record->b.agg_selections = sel_b;
            record->adp_target = target;
        }
        Value agg_a = aggregate_query_instances(sel_a, fa.instances.embeddings);
        Value agg_b = aggregate_query_instances(sel_b, fb.instances.embeddings);
        adp_l = loss_adp_local(agg_a, agg_b, target);
    }

    PairLoss out;
    out.total = add(add(add(scale(seg, w.l1), scale(det, w.l2)), scale(cls, w.l3)),
                    scale(add(adp_g, adp_l), w.l4));
    out.breakdown.seg = g.scalar(seg);
    out.breakdown.det = g.scalar(det);
    out.breakdown.cls = g.scalar(cls);
    out.breakdown.adp_g = g.scalar(adp_g);
    out.breakdown.adp_l = g.scalar(adp_l);
    out.breakdown.total = g.scalar(out.total);
    return out;
}

void SgdMomentum::step(ParamStore& params, const std::map<std::string, std::vector<float>>& grads) {
    double sq = 0.0;
    for (const auto& [name, gv] : grads) {
        for (float x : gv) sq += static_cast<double>(x) * x;
    }
    const double norm = std::sqrt(sq);
    const double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    for (const auto& [name, gv] : grads) {
        Param& p = params.get(name);
        if (!p.trainable) continue;
        auto [it, fresh] = velocity.try_emplace(name, Tensor(p.value.shape()));
        Tensor& vel = it->second;
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const double v = momentum * vel[i] + static_cast<double>(gv[static_cast<std::size_t>(i)]) * scale;
            vel[i] = static_cast<float>(v);
            p.value[i] = static_cast<float>(static_cast<double>(p.value[i]) - lr * v);
        }
    }
}

Dataset load_training_data(const RunConfig& cfg) {
    if (cfg.data.generate) {
        std::vector<DomainSpec> domains;
        for (const auto& id : cfg.data.gen_domains) domains.push_back(stock_domain(id));
        return build_dataset(domains, cfg.data.samples_per_domain, cfg.data.gen_seed, cfg.data.image_size);
    }
    if (cfg.data.train_paths.empty()) throw ConfigError("no training data configured");
    Dataset merged = read_dataset(cfg.data.train_paths[0]);
    for (std::size_t i = 1; i < cfg.data.train_paths.size(); ++i) {
        Dataset extra = read_dataset(cfg.data.train_paths[i]);
        if (extra.image_size != merged.image_size) throw ConfigError("training datasets disagree on image size");
        for (auto& s : extra.samples) merged.samples.push_back(std::move(s));
        for (const auto& d : extra.domains) {
            if (std::find(merged.domains.begin(), merged.domains.end(), d) == merged.domains.end()) {
                merged.domains.push_back(d);
            }
        }
        merged.has_masks = merged.has_masks && extra.has_masks;
    }
    assign_class_ids(merged);
    return merged;
}

namespace {

struct StepChoice {
    std::size_t sample_a = 0, sample_b = 0;
    bool cross_domain = false;
};

StepChoice choose_pair(const Dataset& ds, const std::vector<std::vector<std::size_t>>& by_domain, std::uint64_t seed,
                       int step) {
    RandomStream rng(substream_seed(seed, static_cast<std::uint64_t>(step)));
    StepChoice c;
    const int d = static_cast<int>(by_domain.size());
    if (d >= 2) {
        const int ia = rng.uniform_int(0, d - 1);
        int ib = rng.uniform_int(0, d - 2);
        if (ib >= ia) ++ib;
        const auto& da = by_domain[static_cast<std::size_t>(ia)];
        const auto& db = by_domain[static_cast<std::size_t>(ib)];
        c.sample_a = da[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(da.size()) - 1))];
        c.sample_b = db[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(db.size()) - 1))];
        c.cross_domain = true;
    } else {
        const auto& da = by_domain[0];
        c.sample_a = da[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(da.size()) - 1))];
        c.sample_b = da[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(da.size()) - 1))];
        c.cross_domain = false;
    }
    (void)ds;
    return c;
}

std::string loss_line(int step, const LossBreakdown& b) {
    nlohmann::json j;
    j["step"] = step;
    j["L_seg"] = b.seg;
    j["L_det"] = b.det;
    j["L_cls"] = b.cls;
    j["L_adp_g"] = b.adp_g;
    j["L_adp_l"] = b.adp_l;
    j["total"] = b.total;
    return j.dump();
}

void save_train_checkpoint(const std::string& out_dir, const UOVNModel& model, const SgdMomentum& opt, int step,
                           const RunConfig& cfg) {
    std::map<std::string, Tensor> extra;
    for (const auto& [name, t] : opt.velocity) extra.emplace("opt.m." + name, t);
    save_checkpoint(out_dir, model.params(), extra, step, run_config_hash(cfg), serialize_run_config(cfg));
}

}  // namespace

TrainResult cmd_train(const RunConfig& cfg, const std::string& out_dir) {
    validate_run_config(cfg);
    std::error_code ec;
    fs::create_directories(out_dir, ec);

    UOVNModel model(cfg.model);
    model.init_params(cfg.optim.seed);
    SgdMomentum opt;
    opt.lr = cfg.optim.step_size;
    opt.momentum = cfg.optim.momentum;
    opt.clip_norm = cfg.optim.clip_norm;

    int start_step = 0;
    const fs::path meta = fs::path(out_dir) / "meta.json";
    if (fs::exists(meta)) {
        Checkpoint ck = load_checkpoint(out_dir);
        if (ck.config_hash != run_config_hash(cfg)) {
            throw ConfigError("checkpoint in " + out_dir + " was written with a different config");
        }
        model.load_params(ck.tensors);
        for (const auto& [name, t] : ck.extra) {
            if (name.rfind("opt.m.", 0) == 0) opt.velocity[name.substr(6)] = t;
        }
        start_step = static_cast<int>(ck.step);
    }

    Dataset ds = load_training_data(cfg);
    if (ds.samples.empty()) throw ConfigError("training dataset is empty");
    std::vector<std::string> domain_ids;
    for (const auto& s : ds.samples) {
        if (std::find(domain_ids.begin(), domain_ids.end(), s.domain_id) == domain_ids.end()) {
            domain_ids.push_back(s.domain_id);
        }
    }
    std::vector<std::vector<std::size_t>> by_domain(domain_ids.size());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto it = std::find(domain_ids.begin(), domain_ids.end(), ds.samples[i].domain_id);
        by_domain[static_cast<std::size_t>(it - domain_ids.begin())].push_back(i);
    }

    // loss.jsonl: truncate on fresh start, keep lines <= start_step on resume.
    const fs::path log_path = fs::path(out_dir) / "loss.jsonl";
    std::vector<std::string> kept;
    if (start_step > 0 && fs::exists(log_path)) {
        std::ifstream is(log_path);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line, nullptr, false);
            if (!j.is_discarded() && j.contains("step") && j["step"].get<int>() <= start_step) kept.push_back(line);
        }
    }
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    for (const auto& l : kept) log << l << "\n";

    TrainResult result;
    result.checkpoint_dir = out_dir;
    for (int step = start_step + 1; step <= cfg.optim.steps; ++step) {
        const StepChoice choice = choose_pair(ds, by_domain, cfg.optim.seed, step);
        const AnnotatedSample& sa = ds.samples[choice.sample_a];
        const AnnotatedSample& sb = ds.samples[choice.sample_b];

        Graph g;
        BoundParams bound(g, model.params(), true);
        const UOVNModel::Forward fa = model.forward(bound, sa.image, sa.queries);
        const UOVNModel::Forward fb = model.forward(bound, sb.image, sb.queries);
        const PairLoss pl = paired_loss(bound, fa, sa.gt, fb, sb.gt, choice.cross_domain, cfg.loss,
                                        cfg.model.aux_losses);
        if (!std::isfinite(pl.breakdown.total)) {
            std::cerr << "non-finite loss at step " << step << ": " << loss_line(step, pl.breakdown) << "\n";
            throw NumericError("training aborted on non-finite loss at step " + std::to_string(step));
        }
        g.backward(pl.total);
        std::map<std::string, std::vector<float>> grads;
        for (const auto& [name, value] : bound.bound()) {
            if (model.params().get(name).trainable) grads.emplace(name, g.grad(value));
        }
        opt.step(model.params(), grads);

        log << loss_line(step, pl.breakdown) << "\n";
        log.flush();
        if (result.steps_run == 0) result.first_total = pl.breakdown.total;
        result.final_total = pl.breakdown.total;
        ++result.steps_run;
        if (step % cfg.optim.checkpoint_every == 0 || step == cfg.optim.steps) {
            save_train_checkpoint(out_dir, model, opt, step, cfg);
        }
    }
    if (cfg.optim.steps == start_step) {
        // Nothing to run; still make sure a checkpoint exists.
        if (!fs::exists(meta)) save_train_checkpoint(out_dir, model, opt, start_step, cfg);
    }
    return result;
}

UOVNModel model_from_checkpoint(const std::string& ckpt_dir, RunConfig* cfg_out) {
    Checkpoint ck = load_checkpoint(ckpt_dir);
    if (ck.config_json.empty()) throw IoError("checkpoint lacks config.json: " + ckpt_dir);
    RunConfig cfg = parse_run_config(ck.config_json);
    UOVNModel model(cfg.model);
    model.init_params(cfg.optim.seed);
    model.load_params(ck.tensors);
    if (cfg_out) *cfg_out = cfg;
    return model;
}

PredictionSet gt_as_prediction(const Dataset& ds, const AnnotatedSample& s) {
    PredictionSet pred;
    pred.mask_h = s.gt.mask_h;
    pred.mask_w = s.gt.mask_w;
    const int n = static_cast<int>(s.gt.regions.size());
    const int hw = pred.mask_h * pred.mask_w;
    const int c = static_cast<int>(ds.class_names.size());
    pred.mask_logits = Tensor({n, hw});
    pred.sim = Tensor({n, c});
    pred.boxes = Tensor({n, 4});
    for (int i = 0; i < n; ++i) {
        const auto& reg = s.gt.regions[static_cast<std::size_t>(i)];
        for (int p = 0; p < hw; ++p) {
            const bool on = s.gt.has_masks && reg.mask[static_cast<std::size_t>(p)];
            pred.mask_logits.at(i, p) = on ? 20.0f : -20.0f;
        }
        for (int q = 0; q < c; ++q) pred.sim.at(i, q) = q == reg.class_id ? 20.0f : -20.0f;
        pred.boxes.at(i, 0) = static_cast<float>(reg.box.cx);
        pred.boxes.at(i, 1) = static_cast<float>(reg.box.cy);
        pred.boxes.at(i, 2) = static_cast<float>(reg.box.w);
        pred.boxes.at(i, 3) = static_cast<float>(reg.box.h);
        pred.binary.push_back(binarize_mask_row(pred.mask_logits, i));
    }
    pred.labels = classify(pred.sim);
    semantic_from_instances(pred, c);
    std::vector<bool> flags(ds.thing_flags.begin(), ds.thing_flags.end());
    panoptic_merge(pred, flags);
    return pred;
}

EvalReport evaluate_predictions(const Dataset& ds, const std::vector<PredictionSet>& preds,
                                const std::vector<std::string>& tasks) {
    if (preds.size() != ds.samples.size()) throw DimensionError("one prediction set per sample required");
    EvalReport report;
    report.images = static_cast<int>(ds.samples.size());
    const int c = static_cast<int>(ds.class_names.size());

    auto want = [&](const std::string& t) { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); };
    auto skip = [&](const std::string& t, const std::string& why) {
        TaskReport tr;
        tr.run = false;
        tr.skip_reason = why;
        report.tasks[t] = tr;
        std::cerr << "warning: task " << t << " skipped: " << why << "\n";
    };

    std::vector<std::vector<ApImage>> det_inputs(static_cast<std::size_t>(c));
    std::vector<std::vector<ApImage>> ins_inputs(static_cast<std::size_t>(c));
    MiouStats miou_stats;
    PqStats pq_stats;

    const bool do_det = want("det");
    const bool do_ins = want("ins") && ds.has_masks;
    const bool do_sem = want("sem") && ds.has_masks;
    const bool do_pan = want("pan") && ds.has_masks;
    if (want("ins") && !ds.has_masks) skip("ins", "dataset has no masks");
    if (want("sem") && !ds.has_masks) skip("sem", "dataset has no masks");
    if (want("pan") && !ds.has_masks) skip("pan", "dataset has no masks");

    for (std::size_t si = 0; si < ds.samples.size(); ++si) {
        const AnnotatedSample& s = ds.samples[si];
        const PredictionSet& pred = preds[si];
        if (!panoptic_partition_ok(pred)) ++report.partition_violations;
        for (int cls = 0; cls < c; ++cls) {
            std::vector<int> det_idx;
            const int n = pred.sim.dim(0);
            for (int i = 0; i < n; ++i) {
                if (pred.labels.keep[static_cast<std::size_t>(i)] &&
                    pred.labels.best_class[static_cast<std::size_t>(i)] == cls) {
                    det_idx.push_back(i);
                }
            }
            std::vector<int> gt_idx;
            for (std::size_t r = 0; r < s.gt.regions.size(); ++r) {
                if (s.gt.regions[r].class_id == cls) gt_idx.push_back(static_cast<int>(r));
            }
            if (do_det) {
                ApImage img;
                img.num_gt = static_cast<int>(gt_idx.size());
                for (int i : det_idx) {
                    img.scores.push_back(pred.labels.score[static_cast<std::size_t>(i)]);
                    std::vector<double> row;
                    const BoxD pb{pred.boxes.at(i, 0), pred.boxes.at(i, 1), pred.boxes.at(i, 2), pred.boxes.at(i, 3)};
                    for (int r : gt_idx) row.push_back(box_iou(pb, s.gt.regions[static_cast<std::size_t>(r)].box));
                    img.iou.push_back(std::move(row));
                }
                det_inputs[static_cast<std::size_t>(cls)].push_back(std::move(img));
            }
            if (do_ins) {
                ApImage img;
                img.num_gt = static_cast<int>(gt_idx.size());
                for (int i : det_idx) {
                    img.scores.push_back(pred.labels.score[static_cast<std::size_t>(i)]);
                    std::vector<double> row;
                    for (int r : gt_idx) {
                        row.push_back(mask_iou(pred.binary[static_cast<std::size_t>(i)],
                                               s.gt.regions[static_cast<std::size_t>(r)].mask));
                    }
                    img.iou.push_back(std::move(row));
                }
                ins_inputs[static_cast<std::size_t>(cls)].push_back(std::move(img));
            }
        }
        if (do_sem) miou_accumulate(miou_stats, pred.semantic_map, semantic_gt_map(ds, s), c);
        if (do_pan) {
            std::vector<PanSegment> pred_segs;
            for (const auto& seg : pred.segments) pred_segs.push_back({seg.id, seg.class_id});
            std::vector<PanSegment> gt_segs;
            for (std::size_t r = 0; r < s.gt.regions.size(); ++r) {
                gt_segs.push_back({static_cast<int>(r) + 1, s.gt.regions[r].class_id});
            }
            pq_accumulate(pq_stats, pred.panoptic_map, pred_segs, panoptic_gt_map(s), gt_segs);
        }
    }

    auto finalize_ap = [&](const std::vector<std::vector<ApImage>>& inputs, const std::string& task) {
        TaskReport tr;
        tr.run = true;
        double map_acc = 0.0, ap50_acc = 0.0;
        int classes = 0;
        for (int cls = 0; cls < c; ++cls) {
            std::int64_t total_gt = 0;
            for (const auto& img : inputs[static_cast<std::size_t>(cls)]) total_gt += img.num_gt;
            if (total_gt == 0) continue;
            const ApClassResult r = average_precision_class(inputs[static_cast<std::size_t>(cls)]);
            tr.per_class[ds.class_names[static_cast<std::size_t>(cls)]] = r.ap_mean;
            map_acc += r.ap_mean;
            ap50_acc += r.ap50;
            ++classes;
        }
        if (classes > 0) {
            tr.scalars["mAP"] = map_acc / classes;
            tr.scalars["AP50"] = ap50_acc / classes;
        } else {
            tr.run = false;
            tr.skip_reason = "no ground truth in any class";
        }
        report.tasks[task] = tr;
    };
    if (do_det) finalize_ap(det_inputs, "det");
    if (do_ins) finalize_ap(ins_inputs, "ins");
    if (do_sem) {
        TaskReport tr;
        tr.run = true;
        tr.scalars["mIoU"] = miou_finalize(miou_stats);
        for (std::size_t cls = 0; cls < static_cast<std::size_t>(c); ++cls) {
            if (miou_stats.gt_count.empty() || miou_stats.gt_count[cls] == 0) continue;
            const std::int64_t uni = miou_stats.gt_count[cls] + miou_stats.pred_count[cls] - miou_stats.inter[cls];
            tr.per_class[ds.class_names[cls]] = uni > 0 ? static_cast<double>(miou_stats.inter[cls]) / uni : 0.0;
        }
        report.tasks["sem"] = tr;
    }
    if (do_pan) {
        TaskReport tr;
        tr.run = true;
        const PqResult r = pq_finalize(pq_stats);
        tr.scalars["PQ"] = r.pq;
        tr.scalars["SQ"] = r.sq;
        tr.scalars["RQ"] = r.rq;
        for (const auto& [cls, pq] : r.per_class) {
            if (cls >= 0 && cls < c) tr.per_class[ds.class_names[static_cast<std::size_t>(cls)]] = pq;
        }
        report.tasks["pan"] = tr;
    }
    return report;
}

EvalReport eval_dataset(const UOVNModel& model, const Dataset& ds, const std::vector<std::string>& tasks) {
    std::vector<std::string> prompted;
    for (const auto& name : ds.class_names) prompted.push_back(apply_prompt(name));
    std::vector<bool> flags(ds.thing_flags.begin(), ds.thing_flags.end());
    std::vector<PredictionSet> preds(ds.samples.size());
    parallel_for(ds.samples.size(), [&](std::size_t i) {
        preds[i] = model.infer(ds.samples[i].image, prompted, flags, 256);
    });
    return evaluate_predictions(ds, preds, tasks);
}

EvalReport cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, const std::vector<std::string>& tasks) {
    for (const auto& t : tasks) {
        if (t != "det" && t != "ins" && t != "sem" && t != "pan") throw ConfigError("unknown eval task: " + t);
    }
    UOVNModel model = model_from_checkpoint(ckpt_dir);
    Dataset ds = read_dataset(data_dir);
    return eval_dataset(model, ds, tasks);
}

std::string eval_report_json(const EvalReport& report) {
    nlohmann::json j;
    j["images"] = report.images;
    j["partition_violations"] = report.partition_violations;
    nlohmann::json tasks;
    for (const auto& [name, tr] : report.tasks) {
        nlohmann::json t;
        t["run"] = tr.run;
        if (!tr.run) t["skip_reason"] = tr.skip_reason;
        for (const auto& [k, v] : tr.scalars) t[k] = v;
        nlohmann::json pc;
        for (const auto& [k, v] : tr.per_class) pc[k] = v;
        t["per_class"] = pc;
        tasks[name] = t;
    }
    j["tasks"] = tasks;
    return j.dump(2);
}

void print_eval_table(const EvalReport& report, std::ostream& os) {
    os << "task  metric  value\n";
    for (const auto& [name, tr] : report.tasks) {
        if (!tr.run) {
            os << name << "  (skipped: " << tr.skip_reason << ")\n";
            continue;
        }
        for (const auto& [k, v] : tr.scalars) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%-5s %-7s %.4f", name.c_str(), k.c_str(), v);
            os << buf << "\n";
        }
        for (const auto& [k, v] : tr.per_class) {
            char buf[96];
            std::snprintf(buf, sizeof(buf), "  %-20s %.4f", k.c_str(), v);
            os << buf << "\n";
        }
    }
    os << "partition violations: " << report.partition_violations << "\n";
}

namespace {

Tensor read_image_file(const std::string& path) {
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".uovt") {
        Tensor t = read_tensor(path);
        if (t.rank() != 3 || t.dim(2) != 3) throw InputError("image container must be [H,W,3]");
        return t;
    }
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw InputError("unsupported image format (want .uovt or binary PPM): " + path);
    int w = 0, h = 0, maxval = 0;
    is >> w >> h >> maxval;
    is.get();
    if (w <= 0 || h <= 0 || maxval != 255) throw InputError("bad PPM header: " + path);
    Tensor t({h, w, 3});
    std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * 3);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
        throw IoError("truncated PPM: " + path);
    }
    for (std::size_t i = 0; i < buf.size(); ++i) t[static_cast<std::int64_t>(i)] = buf[i] / 255.0f;
    return t;
}

}  // namespace

void cmd_infer(const std::string& ckpt_dir, const std::string& image_path, const std::string& queries_semicolon,
               const std::string& out_dir) {
    std::vector<std::string> queries;
    std::string cur;
    for (char ch : queries_semicolon) {
        if (ch == ';') {
            if (!cur.empty()) queries.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) queries.push_back(cur);
    if (queries.empty()) throw InputError("no queries given");

    UOVNModel model = model_from_checkpoint(ckpt_dir);
    const Tensor image = read_image_file(image_path);
    std::vector<std::string> prompted;
    for (const auto& q : queries) prompted.push_back(apply_prompt(q));
    const PredictionSet pred = model.infer(image, prompted, {}, 256);
    dump_predictions(out_dir, pred, queries);
}

double adaptation_gap(const UOVNModel& model,
                      const std::vector<std::pair<AnnotatedSample, AnnotatedSample>>& pairs) {
    double acc = 0.0;
    for (const auto& [a, b] : pairs) {
        Graph g;
        BoundParams bound(g, model.params(), false);
        const EncoderConfig ec = model.encoder_config();
        auto pooled_of = [&](const AnnotatedSample& s, Tensor& v_out, Tensor& f_out) {
            PyramidValues pyr = encode_image(bound, s.image, ec);
            const Tensor& finest = pyr.levels.back().val();
            Value flat = reshape(pyr.levels.back(), {finest.dim(0) * finest.dim(1), finest.dim(2)});
            v_out = mean_rows(flat).val();
            f_out = encode_queries(bound, s.queries, model.vocab(), ec).pooled.val();
        };
        Tensor v1, f1, v2, f2;
        pooled_of(a, v1, f1);
        pooled_of(b, v2, f2);
        auto cosine_d = [](const Tensor& x, const Tensor& y) {
            double xy = 0, xx = 0, yy = 0;
            for (std::int64_t i = 0; i < x.numel(); ++i) {
                xy += static_cast<double>(x[i]) * y[i];
                xx += static_cast<double>(x[i]) * x[i];
                yy += static_cast<double>(y[i]) * y[i];
            }
            if (xx < 1e-40 || yy < 1e-40) return 0.0;
            return xy / std::sqrt(xx * yy);
        };
        acc += std::fabs(cosine_d(v1, v2) - cosine_d(f1, f2));
    }
    return pairs.empty() ? 0.0 : acc / static_cast<double>(pairs.size());
}

}  // namespace uovn
