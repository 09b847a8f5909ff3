#include <memory>

#include "uovn/gradcheck.hpp"
#include "uovn/train.hpp"

namespace uovn {

namespace {

Tensor randn(std::vector<int> shape, RandomStream& rng, double sd = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(sd * rng.normal());
    return t;
}

// Random readout so the scalar mixes every output coordinate; scaled so the
// scalar stays O(1) and f32 rounding does not drown the difference quotient.
Value readout(Graph& g, Value x, std::uint64_t seed) {
    RandomStream rng(seed);
    Tensor c(x.val().shape());
    const double s = 1.0 / std::sqrt(static_cast<double>(x.val().numel()));
    for (std::int64_t i = 0; i < c.numel(); ++i) c[i] = static_cast<float>(s * rng.normal());
    return sum(mul(x, g.constant(c)));
}

struct Component {
    std::string name;
    ScalarFn fn;
    std::vector<Tensor> point;
    GradCheckOptions opts;
};

void add_kernel_components(std::vector<Component>& out, std::uint64_t seed) {
    {
        RandomStream rng(substream_seed(seed, 1));
        Component c;
        c.name = "linear_map";
        c.point = {randn({3, 4}, rng, 0.7), randn({4, 5}, rng, 0.7), randn({5}, rng, 0.5)};
        c.fn = [](Graph& g, const std::vector<Value>& p) {
            return readout(g, linear_map(p[0], p[1], p[2]), 11);
        };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 2));
        Component c;
        c.name = "matmul";
        c.point = {randn({3, 4}, rng, 0.7), randn({4, 2}, rng, 0.7)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, matmul(p[0], p[1]), 12); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 3));
        Component c;
        c.name = "softmax";
        c.point = {randn({3, 5}, rng, 1.0)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, softmax(p[0], 1), 13); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 4));
        Component c;
        c.name = "sigmoid";
        c.point = {randn({7}, rng, 1.5)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, sigmoid(p[0]), 14); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 5));
        Component c;
        c.name = "gelu";
        c.point = {randn({7}, rng, 1.2)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, gelu(p[0]), 15); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 6));
        Component c;
        c.name = "layer_norm";
        c.point = {randn({3, 6}, rng, 1.0), randn({6}, rng, 0.5), randn({6}, rng, 0.5)};
        c.fn = [](Graph& g, const std::vector<Value>& p) {
            return readout(g, layer_norm(p[0], p[1], p[2]), 16);
        };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 7));
        Component c;
        c.name = "l2_normalize";
        c.point = {randn({3, 5}, rng, 1.0)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, l2_normalize_rows(p[0]), 17); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 8));
        Component c;
        c.name = "bilinear_sample";
        Tensor map = randn({5, 6, 3}, rng, 1.0);
        Tensor pts({7, 2});
        for (int i = 0; i < 7; ++i) {
            // interior, fractional part in [0.3, 0.7]: clear of lattice kinks
            pts.at(i, 0) = static_cast<float>(rng.uniform_int(0, 4) + 0.3 + 0.4 * rng.uniform());
            pts.at(i, 1) = static_cast<float>(rng.uniform_int(0, 3) + 0.3 + 0.4 * rng.uniform());
        }
        c.point = {std::move(map), std::move(pts)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, bilinear_sample(p[0], p[1]), 18); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 9));
        Component c;
        c.name = "conv2d";
        c.point = {randn({6, 6, 2}, rng, 0.8), randn({2, 2, 2, 3}, rng, 0.6), randn({3}, rng, 0.3)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, conv2d(p[0], p[1], p[2], 2), 19); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 10));
        Component c;
        c.name = "group_weighted_sum";
        c.point = {randn({4, 3}, rng, 0.7), randn({4, 3, 2}, rng, 0.7)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, group_weighted_sum(p[0], p[1]), 20); };
        out.push_back(std::move(c));
    }
}

void add_loss_components(std::vector<Component>& out, std::uint64_t seed) {
    {
        Component c;
        c.name = "giou";
        // corners clear of the reference box's corners: min/max stay on one branch
        c.point = {Tensor::from({4}, {0.42f, 0.56f, 0.26f, 0.30f})};
        c.fn = [](Graph&, const std::vector<Value>& p) { return giou_value(p[0], BoxD{0.5, 0.5, 0.35, 0.3}); };
        out.push_back(std::move(c));
    }
    {
        Component c;
        c.name = "smooth_l1";
        c.point = {Tensor::from({4}, {0.3f, -0.6f, 1.8f, -2.5f})};
        c.fn = [](Graph&, const std::vector<Value>& p) {
            Tensor target({4});
            return smooth_l1_sum(p[0], target);
        };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 21));
        Component c;
        c.name = "loss_cls_bce";
        Tensor targets({3, 4});
        for (std::int64_t i = 0; i < targets.numel(); ++i) targets[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
        c.point = {randn({3, 4}, rng, 1.5)};
        const Tensor t = targets;
        c.fn = [t](Graph&, const std::vector<Value>& p) { return loss_cls(p[0], t); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 22));
        Component c;
        c.name = "dice";
        Tensor target({9});
        for (std::int64_t i = 0; i < 9; ++i) target[i] = i % 3 == 0 ? 1.0f : 0.0f;
        c.point = {randn({9}, rng, 1.0)};
        const Tensor t = target;
        c.fn = [t](Graph&, const std::vector<Value>& p) { return dice_loss(p[0], t); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 23));
        Component c;
        c.name = "kl_softmax_rows";
        const Tensor target = randn({3, 4}, rng, 1.0);
        c.point = {randn({3, 4}, rng, 1.0)};
        c.fn = [target](Graph&, const std::vector<Value>& p) { return kl_softmax_rows_mean(p[0], target); };
        out.push_back(std::move(c));
    }
    {
        Component c;
        c.name = "loss_adp_global";
        // cosines 0.3 and ~0.8: a comfortable margin from the |.| kink
        c.point = {Tensor::from({2}, {1.0f, 0.0f}), Tensor::from({2}, {0.3f, 0.9539392f}),
                   Tensor::from({2}, {0.0f, 1.0f}), Tensor::from({2}, {0.6f, 0.8f})};
        c.fn = [](Graph&, const std::vector<Value>& p) { return loss_adp_global(p[0], p[1], p[2], p[3]); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 24));
        Component c;
        c.name = "loss_adp_local";
        // gating margins: |sim| >= 0.3 keeps the >0 selections stable
        Tensor sim1({4, 3}), sim2({3, 3});
        for (std::int64_t i = 0; i < sim1.numel(); ++i) sim1[i] = static_cast<float>((rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.3, 2.0));
        for (std::int64_t i = 0; i < sim2.numel(); ++i) sim2[i] = static_cast<float>((rng.uniform() < 0.5 ? -1 : 1) * rng.uniform(0.3, 2.0));
        const Tensor f1 = randn({3, 6}, rng, 0.5);
        const Tensor f2 = randn({3, 6}, rng, 0.5);
        c.point = {randn({4, 6}, rng, 0.7), randn({3, 6}, rng, 0.7)};
        const Tensor s1 = sim1, s2 = sim2;
        c.fn = [s1, s2, f1, f2](Graph&, const std::vector<Value>& p) {
            return loss_adp_local(aggregate_query_instances(s1, p[0]), aggregate_query_instances(s2, p[1]), f1, f2);
        };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 25));
        Component c;
        c.name = "similarity_head";
        c.point = {randn({2, 6}, rng, 0.7), randn({3, 6}, rng, 0.7)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, similarity(p[0], p[1]), 25); };
        out.push_back(std::move(c));
    }
    {
        RandomStream rng(substream_seed(seed, 26));
        Component c;
        c.name = "mask_head";
        c.point = {randn({2, 6}, rng, 0.7), randn({3, 4, 6}, rng, 0.7)};
        c.fn = [](Graph& g, const std::vector<Value>& p) { return readout(g, predict_mask_logits(p[0], p[1]), 26); };
        out.push_back(std::move(c));
    }
}

void add_module_components(std::vector<Component>& out, std::uint64_t seed) {
    {
        // One MMDA layer on a two-level toy pyramid.
        MMDAConfig cfg;
        cfg.k = 2;
        cfg.heads = 2;
        cfg.layers = 1;
        cfg.d_f = 8;
        auto store = std::make_shared<ParamStore>();
        RandomStream prng(substream_seed(seed, 30));
        init_pixel_decoder_params(*store, cfg, {4, 4}, prng);
        // Move sampling points off the bilinear lattice (and attention off
        // uniform): checking derivatives exactly on the interpolation kinks
        // would compare different one-sided slopes. Reference points live on
        // a 1/16 grid, so odd-1/32 offsets maximize the kink clearance.
        {
            Tensor& ow = store->get("pixdec.layer0.offset.w").value;
            for (std::int64_t i = 0; i < ow.numel(); ++i) ow[i] = static_cast<float>(0.001 * prng.normal());
            Tensor& ob = store->get("pixdec.layer0.offset.b").value;
            const float mids[3] = {13.0f / 32, 15.0f / 32, 11.0f / 32};
            for (std::int64_t i = 0; i < ob.numel(); ++i) ob[i] = mids[i % 3];
            Tensor& aw = store->get("pixdec.layer0.attn_vis.w").value;
            for (std::int64_t i = 0; i < aw.numel(); ++i) aw[i] = static_cast<float>(0.1 * prng.normal());
            Tensor& lw = store->get("pixdec.layer0.attn_lang.w").value;
            for (std::int64_t i = 0; i < lw.numel(); ++i) lw[i] = static_cast<float>(0.1 * prng.normal());
        }
        RandomStream rng(substream_seed(seed, 31));
        Component c;
        c.name = "mmda_layer";
        c.point = {randn({2, 2, 4}, rng, 0.7), randn({4, 4, 4}, rng, 0.7), randn({3, 8}, rng, 0.7)};
        std::vector<std::string> names;
        for (const auto& [name, p] : store->all()) {
            names.push_back(name);
            c.point.push_back(p.value);
        }
        c.fn = [store, names, cfg](Graph& g, const std::vector<Value>& p) {
            BoundParams bound(g, *store, true);
            for (std::size_t i = 0; i < names.size(); ++i) bound.preset(names[i], p[3 + i]);
            PyramidValues pyr;
            pyr.levels = {p[0], p[1]};
            pyr.strides = {16, 8};
            QueryFeatureValues qf;
            qf.rows = l2_normalize_rows(p[2]);
            qf.pooled = mean_rows(qf.rows);
            DecodedPyramid dec = pixel_decode(bound, pyr, qf, cfg);
            Value acc = readout(g, dec.levels[0], 31);
            return add(acc, readout(g, dec.levels[1], 32));
        };
        c.opts.max_coords_per_tensor = 24;
        c.opts.eps = 5e-3;
        out.push_back(std::move(c));
    }
    {
        // Instance decoder round on a two-level decoded pyramid.
        InstanceDecoderConfig cfg;
        cfg.n_queries = 2;
        cfg.rounds = 1;
        cfg.heads = 2;
        cfg.d_f = 8;
        auto store = std::make_shared<ParamStore>();
        RandomStream prng(substream_seed(seed, 33));
        init_instance_decoder_params(*store, cfg, prng, 2);
        RandomStream rng(substream_seed(seed, 34));
        Component c;
        c.name = "instance_decoder";
        c.point = {randn({2, 2, 8}, rng, 0.7), randn({4, 4, 8}, rng, 0.7)};
        std::vector<std::string> names;
        for (const auto& [name, p] : store->all()) {
            names.push_back(name);
            c.point.push_back(p.value);
        }
        c.fn = [store, names, cfg](Graph& g, const std::vector<Value>& p) {
            BoundParams bound(g, *store, true);
            for (std::size_t i = 0; i < names.size(); ++i) bound.preset(names[i], p[2 + i]);
            DecodedPyramid dec;
            dec.levels = {p[0], p[1]};
            dec.sizes = {{2, 2}, {4, 4}};
            InstanceEmbeddings inst = instance_decode(bound, dec, cfg);
            Value acc = readout(g, inst.embeddings, 34);
            return add(acc, scale(readout(g, inst.aux_mask_logits.back(), 35), 0.1));
        };
        c.opts.max_coords_per_tensor = 24;
        out.push_back(std::move(c));
    }
    {
        // Box head through the detection loss.
        auto store = std::make_shared<ParamStore>();
        RandomStream prng(substream_seed(seed, 36));
        init_head_params(*store, 6, prng);
        RandomStream rng(substream_seed(seed, 37));
        Component c;
        c.name = "box_head_det";
        c.point = {randn({2, 6}, rng, 0.7)};
        std::vector<std::string> names;
        for (const auto& [name, p] : store->all()) {
            names.push_back(name);
            c.point.push_back(p.value);
        }
        c.fn = [store, names](Graph& g, const std::vector<Value>& p) {
            BoundParams bound(g, *store, true);
            for (std::size_t i = 0; i < names.size(); ++i) bound.preset(names[i], p[1 + i]);
            Value boxes = predict_boxes(bound, p[0]);
            GroundTruth gt;
            gt.has_masks = false;
            gt.has_boxes = true;
            gt.regions.resize(2);
            gt.regions[0].box = {0.40, 0.45, 0.30, 0.25};
            gt.regions[1].box = {0.62, 0.58, 0.22, 0.34};
            Assignment a{{0, 0}, {1, 1}};
            return loss_det(boxes, gt, a).value;
        };
        out.push_back(std::move(c));
    }
}

std::shared_ptr<Component> build_total_loss_component(std::uint64_t seed) {
    ModelConfig mc;
    mc.d_f = 8;
    mc.k = 2;
    mc.levels = 4;
    mc.n_queries = 8;
    mc.heads = 2;
    mc.pixel_layers = 1;
    mc.decoder_rounds = 1;
    mc.enc_channels = {4, 4, 4, 4};
    mc.text_table_rows = 128;
    mc.text_embed_dim = 8;
    mc.vocab_seed = 17;
    mc.aux_losses = true;
    auto model = std::make_shared<UOVNModel>(mc);
    model->init_params(substream_seed(seed, 40));
    {
        // sampling points off the lattice, boxes off the cell-quantized
        // ground-truth corner grid
        RandomStream prng(substream_seed(seed, 43));
        const float mids[3] = {13.0f / 32, 15.0f / 32, 11.0f / 32};
        for (int layer = 0; layer < mc.pixel_layers; ++layer) {
            const std::string p = "pixdec.layer" + std::to_string(layer) + ".";
            Tensor& ow = model->params().get(p + "offset.w").value;
            for (std::int64_t i = 0; i < ow.numel(); ++i) ow[i] = static_cast<float>(0.001 * prng.normal());
            Tensor& ob = model->params().get(p + "offset.b").value;
            for (std::int64_t i = 0; i < ob.numel(); ++i) ob[i] = mids[i % 3];
        }
        Tensor& bb = model->params().get("boxhead.b2").value;
        const float nudges[4] = {0.31f, -0.22f, 0.17f, -0.41f};
        for (int i = 0; i < 4; ++i) bb[i] = nudges[i];
    }
    auto sample_a = std::make_shared<AnnotatedSample>(generate_sample(stock_domain("D1"), substream_seed(seed, 41), 32));
    auto sample_b = std::make_shared<AnnotatedSample>(generate_sample(stock_domain("D3"), substream_seed(seed, 42), 32));

    // Base-point decision plan: finite differences replay the branch choices
    // (matching, GT-similarity links, aggregation gates, attention masks)
    // that reverse mode differentiated.
    auto plan = std::make_shared<PairDecisions>();
    {
        Graph g;
        BoundParams bound(g, model->params(), false);
        const UOVNModel::Forward fa = model->forward(bound, sample_a->image, sample_a->queries);
        const UOVNModel::Forward fb = model->forward(bound, sample_b->image, sample_b->queries);
        LossWeights w;
        paired_loss(bound, fa, sample_a->gt, fb, sample_b->gt, true, w, true, nullptr, plan.get());
    }

    auto c = std::make_shared<Component>();
    c->name = "total_loss";
    std::vector<std::string> names;
    for (const auto& [name, p] : model->params().all()) {
        names.push_back(name);
        c->point.push_back(p.value);
    }
    c->fn = [model, names, sample_a, sample_b, plan](Graph& g, const std::vector<Value>& p) {
        BoundParams bound(g, model->params(), true);
        for (std::size_t i = 0; i < names.size(); ++i) bound.preset(names[i], p[i]);
        const UOVNModel::Forward fa =
            model->forward(bound, sample_a->image, sample_a->queries, nullptr, &plan->a.attn_blocks);
        const UOVNModel::Forward fb =
            model->forward(bound, sample_b->image, sample_b->queries, nullptr, &plan->b.attn_blocks);
        LossWeights w;
        return paired_loss(bound, fa, sample_a->gt, fb, sample_b->gt, true, w, true, plan.get()).total;
    };
    c->opts.max_coords_per_tensor = 4;
    c->opts.eps = 5e-3;
    return c;
}

}  // namespace

GradCheckSuite gradcheck_suite(std::uint64_t seed, const GradCheckHooks& hooks) {
    std::vector<Component> components;
    add_kernel_components(components, seed);
    add_loss_components(components, seed);
    add_module_components(components, seed);
    {
        auto total = build_total_loss_component(seed);
        components.push_back(std::move(*total));
    }

    GradCheckSuite suite;
    for (auto& comp : components) {
        if (!hooks.only.empty() && comp.name != hooks.only) continue;
        GradCheckOptions opts = comp.opts;
        opts.sample_seed = substream_seed(seed, fnv1a64(comp.name));
        if (comp.name == hooks.tamper_component) {
            opts.tamper = [](std::vector<std::vector<double>>& grads) {
                for (auto& g : grads) {
                    if (!g.empty()) {
                        g[0] = g[0] * 1.5 + 0.25;
                        return;
                    }
                }
            };
        }
        const GradCheckReport rep = grad_check(comp.fn, comp.point, opts);
        suite.components.push_back({comp.name, rep.max_rel_err, rep.coords_checked});
        suite.worst = std::max(suite.worst, rep.max_rel_err);
    }
    return suite;
}

}  // namespace uovn
