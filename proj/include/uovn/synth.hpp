#pragma once

#include <string>
#include <vector>

#include "uovn/losses.hpp"
#include "uovn/tensor.hpp"

namespace uovn {

// A "referring shapes" domain: colored shapes over stuff backgrounds, with
// per-domain palette/annotation-mode/noise differences.
struct DomainSpec {
    std::string id;
    std::vector<std::string> palette;  // thing colors
    std::vector<std::string> stuff;    // background classes, top-to-bottom bands
    bool with_masks = true;
    double noise = 0.0;
};

// Stock domains: D1 warm masks+boxes, D2 cool masks+boxes with pixel noise,
// D3 boxes-only.
DomainSpec stock_domain(const std::string& id);

struct AnnotatedSample {
    std::string id;
    std::string domain_id;
    Tensor image;  // [H,W,3] in [0,1]
    GroundTruth gt;
    std::vector<std::string> region_classes;  // canonical class name per region
    std::vector<std::string> queries;         // texts, parallel to gt.query_links
    // Region index per mask-resolution cell (partition); empty for box-only
    // domains.
    std::vector<int> cell_region;
};

struct Dataset {
    std::vector<std::string> class_names;  // sorted, unique
    std::vector<bool> thing_flags;
    std::vector<std::string> domains;
    std::vector<AnnotatedSample> samples;
    bool has_masks = true;
    int image_size = 64;
};

AnnotatedSample generate_sample(const DomainSpec& spec, std::uint64_t seed, int image_size = 64);

std::pair<AnnotatedSample, AnnotatedSample> make_pair_batch(const DomainSpec& a, const DomainSpec& b,
                                                            RandomStream& rng, int image_size = 64);

Dataset build_dataset(const std::vector<DomainSpec>& domains, int samples_per_domain, std::uint64_t seed,
                      int image_size = 64);

void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

// Class ids for a sample's regions against a dataset-level class table.
void assign_class_ids(Dataset& ds);

// Ground-truth maps at mask resolution for evaluation (labels are
// class id + 1, 0 = void).
std::vector<int> semantic_gt_map(const Dataset& ds, const AnnotatedSample& s);
std::vector<int> panoptic_gt_map(const AnnotatedSample& s);

}  // namespace uovn
