#include "uovn/heads.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace fs = std::filesystem;

namespace uovn {

namespace {

Tensor xavier(std::vector<int> shape, int fan_in, int fan_out, RandomStream& rng) {
    Tensor t(std::move(shape));
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.uniform(-a, a));
    return t;
}

double sigmoid_d(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

void init_head_params(ParamStore& store, int d_f, RandomStream& rng) {
    store.declare("boxhead.w1", xavier({d_f, d_f}, d_f, d_f, rng));
    store.declare("boxhead.b1", Tensor({d_f}));
    store.declare("boxhead.w2", xavier({d_f, 4}, d_f, 4, rng));
    store.declare("boxhead.b2", Tensor({4}));
}

Value predict_mask_logits(Value instance_emb, Value finest_level) {
    const Tensor& fv = finest_level.val();
    if (fv.rank() != 3) throw DimensionError("predict_mask_logits: finest level must be [H,W,D]");
    if (fv.dim(2) != instance_emb.val().dim(1)) throw DimensionError("predict_mask_logits: width mismatch");
    Value flat = reshape(finest_level, {fv.dim(0) * fv.dim(1), fv.dim(2)});
    return matmul(instance_emb, flat, false, true);
}

Value similarity(Value instance_emb, Value query_rows) {
    if (instance_emb.val().dim(1) != query_rows.val().dim(1)) throw DimensionError("similarity: width mismatch");
    return matmul(instance_emb, query_rows, false, true);
}

Value predict_boxes(BoundParams& params, Value instance_emb) {
    Value h = gelu(linear_map(instance_emb, params("boxhead.w1"), params("boxhead.b1")));
    return sigmoid(linear_map(h, params("boxhead.w2"), params("boxhead.b2")));
}

Labels classify(const Tensor& sim) {
    const int n = sim.dim(0), c = sim.dim(1);
    if (c < 1) throw InputError("classify requires at least one class");
    Labels out;
    out.best_class.resize(static_cast<std::size_t>(n));
    out.score.resize(static_cast<std::size_t>(n));
    out.keep.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        int best = 0;
        for (int j = 1; j < c; ++j) {
            if (sim.at(i, j) > sim.at(i, best)) best = j;  // ties keep the lowest index
        }
        const double score = sigmoid_d(sim.at(i, best));
        out.best_class[static_cast<std::size_t>(i)] = best;
        out.score[static_cast<std::size_t>(i)] = score;
        out.keep[static_cast<std::size_t>(i)] = score > kTauObject;
    }
    return out;
}

std::vector<std::uint8_t> binarize_mask_row(const Tensor& logits, int row) {
    const int p = logits.dim(1);
    std::vector<std::uint8_t> out(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) {
        // strict rule: sigmoid(x) > 0.5 <=> x > 0
        out[static_cast<std::size_t>(j)] = logits.at(row, j) > 0.0f ? 1 : 0;
    }
    return out;
}

void semantic_from_instances(PredictionSet& pred, int num_classes) {
    const int hw = pred.mask_h * pred.mask_w;
    const int n = static_cast<int>(pred.binary.size());
    pred.semantic_planes.assign(static_cast<std::size_t>(num_classes),
                                std::vector<std::uint8_t>(static_cast<std::size_t>(hw), 0));
    pred.semantic_map.assign(static_cast<std::size_t>(hw), 0);
    std::vector<double> best_score(static_cast<std::size_t>(hw), -1.0);
    for (int i = 0; i < n; ++i) {
        if (!pred.labels.keep[static_cast<std::size_t>(i)]) continue;
        const int cls = pred.labels.best_class[static_cast<std::size_t>(i)];
        const double score = pred.labels.score[static_cast<std::size_t>(i)];
        for (int p = 0; p < hw; ++p) {
            if (!pred.binary[static_cast<std::size_t>(i)][static_cast<std::size_t>(p)]) continue;
            pred.semantic_planes[static_cast<std::size_t>(cls)][static_cast<std::size_t>(p)] = 1;
            if (score > best_score[static_cast<std::size_t>(p)]) {
                best_score[static_cast<std::size_t>(p)] = score;
                pred.semantic_map[static_cast<std::size_t>(p)] = cls + 1;
            }
        }
    }
}

void panoptic_merge(PredictionSet& pred, const std::vector<bool>& thing_flags) {
    const int hw = pred.mask_h * pred.mask_w;
    const int n = static_cast<int>(pred.binary.size());
    pred.panoptic_map.assign(static_cast<std::size_t>(hw), 0);
    pred.segments.clear();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return pred.labels.score[static_cast<std::size_t>(a)] > pred.labels.score[static_cast<std::size_t>(b)];
    });
    int next_id = 1;
    std::vector<int> stuff_segment(thing_flags.size(), 0);  // class -> segment id
    for (int idx : order) {
        if (!pred.labels.keep[static_cast<std::size_t>(idx)]) continue;
        const int cls = pred.labels.best_class[static_cast<std::size_t>(idx)];
        const bool thing = cls < static_cast<int>(thing_flags.size()) ? thing_flags[static_cast<std::size_t>(cls)] : true;
        const auto& mask = pred.binary[static_cast<std::size_t>(idx)];
        std::int64_t total = 0, unclaimed = 0;
        for (int p = 0; p < hw; ++p) {
            if (!mask[static_cast<std::size_t>(p)]) continue;
            ++total;
            if (pred.panoptic_map[static_cast<std::size_t>(p)] == 0) ++unclaimed;
        }
        if (total == 0) continue;
        if (static_cast<double>(unclaimed) / static_cast<double>(total) < kPanopticOverlap) continue;
        if (unclaimed < kPanopticMinArea) continue;
        int seg_id;
        if (!thing && stuff_segment[static_cast<std::size_t>(cls)] != 0) {
            seg_id = stuff_segment[static_cast<std::size_t>(cls)];
        } else {
            seg_id = next_id++;
            Segment s;
            s.id = seg_id;
            s.class_id = cls;
            s.thing = thing;
            s.score = pred.labels.score[static_cast<std::size_t>(idx)];
            pred.segments.push_back(s);
            if (!thing) stuff_segment[static_cast<std::size_t>(cls)] = seg_id;
        }
        for (int p = 0; p < hw; ++p) {
            if (mask[static_cast<std::size_t>(p)] && pred.panoptic_map[static_cast<std::size_t>(p)] == 0) {
                pred.panoptic_map[static_cast<std::size_t>(p)] = seg_id;
            }
        }
    }
    for (auto& seg : pred.segments) {
        seg.area = std::count(pred.panoptic_map.begin(), pred.panoptic_map.end(), seg.id);
    }
}

bool panoptic_partition_ok(const PredictionSet& pred) {
    const std::int64_t hw = static_cast<std::int64_t>(pred.mask_h) * pred.mask_w;
    if (static_cast<std::int64_t>(pred.panoptic_map.size()) != hw) return false;
    std::int64_t covered = 0;
    for (const auto& seg : pred.segments) covered += seg.area;
    const std::int64_t voids = std::count(pred.panoptic_map.begin(), pred.panoptic_map.end(), 0);
    for (int id : pred.panoptic_map) {
        if (id != 0 && std::none_of(pred.segments.begin(), pred.segments.end(),
                                    [&](const Segment& s) { return s.id == id; })) {
            return false;
        }
    }
    return covered + voids == hw;
}

void write_pgm(const std::string& path, const std::vector<std::uint8_t>& pixels, int h, int w) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << "P5\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void dump_predictions(const std::string& dir, const PredictionSet& pred, const std::vector<std::string>& class_names) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::json j;
    nlohmann::json items = nlohmann::json::array();
    const int n = pred.boxes.dim(0);
    for (int i = 0; i < n; ++i) {
        if (!pred.labels.keep[static_cast<std::size_t>(i)]) continue;
        nlohmann::json item;
        item["instance"] = i;
        item["box"] = {pred.boxes.at(i, 0), pred.boxes.at(i, 1), pred.boxes.at(i, 2), pred.boxes.at(i, 3)};
        const int cls = pred.labels.best_class[static_cast<std::size_t>(i)];
        item["label"] = cls < static_cast<int>(class_names.size()) ? class_names[static_cast<std::size_t>(cls)]
                                                                   : std::to_string(cls);
        item["score"] = pred.labels.score[static_cast<std::size_t>(i)];
        items.push_back(item);
        std::vector<std::uint8_t> px(pred.binary[static_cast<std::size_t>(i)].size());
        for (std::size_t p = 0; p < px.size(); ++p) px[p] = pred.binary[static_cast<std::size_t>(i)][p] ? 255 : 0;
        char name[32];
        std::snprintf(name, sizeof(name), "mask_%03d.pgm", i);
        write_pgm((fs::path(dir) / name).string(), px, pred.mask_h, pred.mask_w);
    }
    j["detections"] = items;
    std::ofstream os(fs::path(dir) / "predictions.json");
    if (!os) throw IoError("cannot write predictions.json in " + dir);
    os << j.dump(2) << "\n";
    std::vector<std::uint8_t> pan(pred.panoptic_map.size());
    for (std::size_t p = 0; p < pan.size(); ++p) {
        pan[p] = static_cast<std::uint8_t>(std::min(pred.panoptic_map[p], 255));
    }
    write_pgm((fs::path(dir) / "panoptic.pgm").string(), pan, pred.mask_h, pred.mask_w);
}

}  // namespace uovn
