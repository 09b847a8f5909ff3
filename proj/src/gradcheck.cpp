#include "uovn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "uovn/common.hpp"

namespace uovn {

namespace {

double eval_at(const ScalarFn& fn, const std::vector<Tensor>& point) {
    Graph g;
    std::vector<Value> leaves;
    leaves.reserve(point.size());
    for (const Tensor& t : point) leaves.push_back(g.leaf(t, false));
    const Value out = fn(g, leaves);
    const double v = g.scalar(out);
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
}

struct Coord {
    std::size_t tensor;
    std::int64_t index;
};

}  // namespace

GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& point, double eps) {
    GradCheckOptions opts;
    opts.eps = eps;
    return grad_check(fn, point, opts);
}

GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& point, const GradCheckOptions& opts) {
    // Analytic pass.
    std::vector<std::vector<double>> analytic(point.size());
    {
        Graph g;
        std::vector<Value> leaves;
        leaves.reserve(point.size());
        for (const Tensor& t : point) leaves.push_back(g.leaf(t, true));
        const Value out = fn(g, leaves);
        if (out.val().numel() != 1) throw DimensionError("grad_check: fn must return a scalar");
        if (!std::isfinite(g.scalar(out))) throw NumericError("grad_check: non-finite function value");
        g.backward(out);
        for (std::size_t k = 0; k < point.size(); ++k) {
            const auto gk = g.grad(leaves[k]);
            analytic[k].assign(gk.begin(), gk.end());
        }
    }
    if (opts.tamper) opts.tamper(analytic);

    // Coordinate selection.
    std::vector<Coord> coords;
    RandomStream rng(opts.sample_seed);
    for (std::size_t k = 0; k < point.size(); ++k) {
        const std::int64_t n = point[k].numel();
        if (opts.max_coords_per_tensor <= 0 || n <= opts.max_coords_per_tensor) {
            for (std::int64_t i = 0; i < n; ++i) coords.push_back({k, i});
        } else {
            // Partial Fisher-Yates over indices.
            std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
            for (std::int64_t i = 0; i < opts.max_coords_per_tensor; ++i) {
                const std::int64_t j = i + static_cast<std::int64_t>(rng.uniform() * static_cast<double>(n - i));
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(std::min(j, n - 1))]);
                coords.push_back({k, idx[static_cast<std::size_t>(i)]});
            }
        }
    }

    const double e = opts.eps;
    std::vector<double> fd(coords.size());
    parallel_for(coords.size(), [&](std::size_t ci) {
        const Coord c = coords[ci];
        std::vector<Tensor> p = point;
        float& slot = p[c.tensor][c.index];
        const double x0 = slot;
        // Steps are measured after f32 rounding so representation error does
        // not contaminate the quotient; Richardson over the two half-widths
        // removes the second-order truncation term.
        double step = 0.0;
        auto f_at = [&](double dx) {
            slot = static_cast<float>(x0 + dx);
            step = static_cast<double>(slot) - x0;
            return eval_at(fn, p);
        };
        double sp, sm;
        const double fp1 = f_at(e);
        sp = step;
        const double fm1 = f_at(-e);
        sm = -step;
        const double d1 = (fp1 - fm1) / (sp + sm);
        const double fp2 = f_at(2.0 * e);
        sp = step;
        const double fm2 = f_at(-2.0 * e);
        sm = -step;
        const double d2 = (fp2 - fm2) / (sp + sm);
        fd[ci] = d1 + (d1 - d2) / 3.0;
    });

    GradCheckReport rep;
    rep.coords_checked = static_cast<std::int64_t>(coords.size());
    for (std::size_t ci = 0; ci < coords.size(); ++ci) {
        const Coord c = coords[ci];
        const double ga = analytic[c.tensor][static_cast<std::size_t>(c.index)];
        const double gf = fd[ci];
        const double rel = std::fabs(ga - gf) / std::max({1.0, std::fabs(ga), std::fabs(gf)});
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst = "tensor" + std::to_string(c.tensor) + "[" + std::to_string(c.index) + "]";
        }
    }
    return rep;
}

}  // namespace uovn
