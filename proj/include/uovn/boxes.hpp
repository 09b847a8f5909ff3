#pragma once

#include <cstdint>
#include <vector>

namespace uovn {

// Normalized (cx, cy, w, h) box.
struct BoxD {
    double cx = 0, cy = 0, w = 0, h = 0;
};

double box_iou(const BoxD& a, const BoxD& b);
// Empty-vs-empty is 1 by convention, empty-vs-nonempty 0.
double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);
// Degenerate extents clamp to 1e-6. Range (-1, 1].
double giou(const BoxD& a, const BoxD& b);

}  // namespace uovn
