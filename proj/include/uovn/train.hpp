#pragma once

#include <iosfwd>
#include <optional>

#include "uovn/metrics.hpp"
#include "uovn/model.hpp"
#include "uovn/synth.hpp"

namespace uovn {

struct LossBreakdown {
    double seg = 0, det = 0, cls = 0, adp_g = 0, adp_l = 0, total = 0;
};

struct SampleLosses {
    GatedLoss seg;
    GatedLoss det;
    Value cls;
    Assignment assignment;
};

// Decision state of one loss evaluation. The verification harness records it
// at a base point and replays it under finite-difference perturbations, so
// both differentiation routes see the same smooth branch.
struct SampleDecisions {
    Assignment assignment;
    Tensor sim_gt;
    std::vector<std::vector<int>> agg_selections;
    std::vector<std::vector<std::uint8_t>> attn_blocks;
};

struct PairDecisions {
    SampleDecisions a, b;
    Tensor adp_target;  // detached A_L of the local adaptation loss
};

// Matching + supervised losses for one forward pass.
SampleLosses sample_losses(const UOVNModel::Forward& f, const GroundTruth& gt, const LossWeights& w, bool aux,
                           const SampleDecisions* frozen = nullptr, SampleDecisions* record = nullptr);

struct PairLoss {
    Value total;
    LossBreakdown breakdown;
};

// Weighted total over a two-sample batch; adaptation terms only when the
// batch is cross-domain and lambda4 > 0.
PairLoss paired_loss(BoundParams& bound, const UOVNModel::Forward& fa, const GroundTruth& ga,
                     const UOVNModel::Forward& fb, const GroundTruth& gb, bool cross_domain, const LossWeights& w,
                     bool aux, const PairDecisions* frozen = nullptr, PairDecisions* record = nullptr);

struct SgdMomentum {
    double lr = 0.05;
    double momentum = 0.9;
    double clip_norm = 1.0;
    std::map<std::string, Tensor> velocity;

    void step(ParamStore& params, const std::map<std::string, std::vector<float>>& grads);
};

struct TrainResult {
    int steps_run = 0;
    double first_total = 0.0;
    double final_total = 0.0;
    std::string checkpoint_dir;
};

Dataset load_training_data(const RunConfig& cfg);
TrainResult cmd_train(const RunConfig& cfg, const std::string& out_dir);

UOVNModel model_from_checkpoint(const std::string& ckpt_dir, RunConfig* cfg_out = nullptr);

struct TaskReport {
    bool run = false;
    std::string skip_reason;
    std::map<std::string, double> scalars;
    std::map<std::string, double> per_class;
};

struct EvalReport {
    std::map<std::string, TaskReport> tasks;
    int images = 0;
    int partition_violations = 0;
};

// Metric aggregation over per-image predictions (the model-independent core;
// also drives the ground-truth-as-prediction oracle fixture).
EvalReport evaluate_predictions(const Dataset& ds, const std::vector<PredictionSet>& preds,
                                const std::vector<std::string>& tasks);
PredictionSet gt_as_prediction(const Dataset& ds, const AnnotatedSample& s);

EvalReport eval_dataset(const UOVNModel& model, const Dataset& ds, const std::vector<std::string>& tasks);
EvalReport cmd_eval(const std::string& ckpt_dir, const std::string& data_dir, const std::vector<std::string>& tasks);
std::string eval_report_json(const EvalReport& report);
void print_eval_table(const EvalReport& report, std::ostream& os);

void cmd_infer(const std::string& ckpt_dir, const std::string& image_path, const std::string& queries_semicolon,
               const std::string& out_dir);

// Mean |cos(v1,v2) - cos(f1,f2)| over held-out cross-domain pairs; the
// quantity the global adaptation loss drives down.
double adaptation_gap(const UOVNModel& model, const std::vector<std::pair<AnnotatedSample, AnnotatedSample>>& pairs);

struct GradCheckComponent {
    std::string name;
    double max_rel_err = 0.0;
    std::int64_t coords = 0;
};

struct GradCheckSuite {
    std::vector<GradCheckComponent> components;
    double worst = 0.0;
};

struct GradCheckHooks {
    std::string only;            // run just this component (empty = all)
    std::string tamper_component;  // corrupt this component's analytic grads
};

GradCheckSuite gradcheck_suite(std::uint64_t seed, const GradCheckHooks& hooks = {});

}  // namespace uovn
