#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "uovn/graph.hpp"

namespace uovn {

using ScalarFn = std::function<Value(Graph&, const std::vector<Value>&)>;

struct GradCheckOptions {
    // Half-step of the 4th-order central-difference stencil.
    double eps = 1e-2;
    // 0 = check every coordinate; otherwise a deterministic sample per tensor.
    std::int64_t max_coords_per_tensor = 0;
    std::uint64_t sample_seed = 1;
    // Test hook: mutates the analytic gradients before comparison
    // (negative control for the gradcheck driver itself).
    std::function<void(std::vector<std::vector<double>>&)> tamper;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t coords_checked = 0;
    std::string worst;  // "tensor<k>[<i>]"
};

// Compares reverse-mode gradients of fn at `point` against central finite
// differences evaluated in double precision. Relative error per coordinate
// uses denominator max(1, |g_analytic|, |g_fd|).
GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& point, double eps);
GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor>& point, const GradCheckOptions& opts);

}  // namespace uovn
