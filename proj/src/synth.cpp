#include "uovn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

namespace fs = std::filesystem;

namespace uovn {

namespace {

struct Rgb {
    float r, g, b;
};

Rgb color_of(const std::string& name) {
    static const std::map<std::string, Rgb> table = {
        {"red", {0.85f, 0.15f, 0.10f}},    {"orange", {0.90f, 0.55f, 0.10f}}, {"yellow", {0.95f, 0.85f, 0.20f}},
        {"blue", {0.15f, 0.30f, 0.85f}},   {"cyan", {0.20f, 0.80f, 0.85f}},   {"purple", {0.55f, 0.20f, 0.80f}},
        {"sky", {0.55f, 0.75f, 0.95f}},    {"grass", {0.30f, 0.70f, 0.30f}},  {"water", {0.20f, 0.45f, 0.70f}},
        {"sand", {0.85f, 0.75f, 0.50f}},   {"road", {0.45f, 0.45f, 0.48f}},
    };
    auto it = table.find(name);
    if (it == table.end()) throw ConfigError("unknown color name: " + name);
    return it->second;
}

struct ShapeDef {
    int kind;  // 0 circle, 1 square, 2 triangle
    std::string color;
    double cx, cy, size;  // full-res pixels; size = radius / half-side / half-width
};

const char* kShapeNames[3] = {"circle", "square", "triangle"};

bool inside_shape(const ShapeDef& s, double x, double y) {
    const double dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
        case 0:
            return dx * dx + dy * dy <= s.size * s.size;
        case 1:
            return std::fabs(dx) <= s.size && std::fabs(dy) <= s.size;
        default: {
            // upward triangle: apex at cy - h/2, base at cy + h/2
            const double h = 1.7 * s.size;
            const double ty = dy + h / 2;  // 0 at apex
            if (ty < 0 || ty > h) return false;
            const double half_width = s.size * (ty / h);
            return std::fabs(dx) <= half_width;
        }
    }
}

double shape_clearance(const ShapeDef& s) { return s.kind == 2 ? 1.0 * s.size : s.size; }

// 4-connectivity check on a cell set.
bool connected(const std::vector<std::uint8_t>& cells, int h, int w) {
    int start = -1, total = 0;
    for (int i = 0; i < h * w; ++i) {
        if (cells[static_cast<std::size_t>(i)]) {
            if (start < 0) start = i;
            ++total;
        }
    }
    if (total == 0) return false;
    std::vector<std::uint8_t> seen(cells.size(), 0);
    std::vector<int> stack{start};
    seen[static_cast<std::size_t>(start)] = 1;
    int reached = 0;
    while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        ++reached;
        const int y = cur / w, x = cur % w;
        const int ns[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
        for (const auto& nb : ns) {
            if (nb[0] < 0 || nb[0] >= h || nb[1] < 0 || nb[1] >= w) continue;
            const int idx = nb[0] * w + nb[1];
            if (cells[static_cast<std::size_t>(idx)] && !seen[static_cast<std::size_t>(idx)]) {
                seen[static_cast<std::size_t>(idx)] = 1;
                stack.push_back(idx);
            }
        }
    }
    return reached == total;
}

struct BuildResult {
    bool ok = false;
    AnnotatedSample sample;
};

BuildResult try_build(const DomainSpec& spec, std::uint64_t seed, int image_size) {
    BuildResult res;
    RandomStream rng(substream_seed(fnv1a64(spec.id), seed));
    const int hw = image_size;
    const int mh = hw / 4, mw = hw / 4;

    AnnotatedSample s;
    s.domain_id = spec.id;

    // Stuff layout: horizontal bands, top to bottom.
    const int n_stuff = static_cast<int>(spec.stuff.size());
    std::vector<int> band_start{0};
    if (n_stuff == 2) {
        const int split_cell = rng.uniform_int(mh * 2 / 5, mh * 3 / 5);
        band_start.push_back(split_cell * 4);
    }
    band_start.push_back(hw);

    // Shapes with non-overlap placement.
    const int target = rng.uniform_int(1, 4);
    std::vector<ShapeDef> shapes;
    for (int i = 0; i < target; ++i) {
        ShapeDef sh;
        sh.kind = rng.uniform_int(0, 2);
        sh.color = spec.palette[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spec.palette.size()) - 1))];
        switch (sh.kind) {
            case 0: sh.size = rng.uniform(11.0, 15.0); break;
            case 1: sh.size = rng.uniform(10.0, 13.0); break;
            default: sh.size = rng.uniform(14.0, 18.0); break;
        }
        bool placed = false;
        for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
            const double margin = shape_clearance(sh) + 2.0;
            sh.cx = rng.uniform(margin, hw - margin);
            sh.cy = rng.uniform(margin, hw - margin);
            placed = true;
            for (const auto& other : shapes) {
                const double dx = sh.cx - other.cx, dy = sh.cy - other.cy;
                const double min_dist = shape_clearance(sh) + shape_clearance(other) + 3.0;
                if (dx * dx + dy * dy < min_dist * min_dist) {
                    placed = false;
                    break;
                }
            }
        }
        if (placed) shapes.push_back(sh);
    }
    if (shapes.empty()) return res;

    // Region list: stuff bands first, then shapes (draw order: later wins).
    struct RegionDef {
        std::string cls;
        bool thing;
    };
    std::vector<RegionDef> regions;
    for (int b = 0; b < n_stuff; ++b) regions.push_back({spec.stuff[static_cast<std::size_t>(b)], false});
    for (const auto& sh : shapes) regions.push_back({std::string(sh.color) + " " + kShapeNames[sh.kind], true});

    // Full-resolution region labels.
    std::vector<int> label(static_cast<std::size_t>(hw) * hw, 0);
    for (int y = 0; y < hw; ++y) {
        int band = 0;
        while (y >= band_start[static_cast<std::size_t>(band) + 1]) ++band;
        for (int x = 0; x < hw; ++x) label[static_cast<std::size_t>(y) * hw + x] = band;
    }
    for (std::size_t si = 0; si < shapes.size(); ++si) {
        const auto& sh = shapes[si];
        const int rid = n_stuff + static_cast<int>(si);
        const int y0 = std::max(0, static_cast<int>(sh.cy - 2 * sh.size)), y1 = std::min(hw, static_cast<int>(sh.cy + 2 * sh.size) + 1);
        const int x0 = std::max(0, static_cast<int>(sh.cx - 2 * sh.size)), x1 = std::min(hw, static_cast<int>(sh.cx + 2 * sh.size) + 1);
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                if (inside_shape(sh, x + 0.5, y + 0.5)) label[static_cast<std::size_t>(y) * hw + x] = rid;
            }
        }
    }

    // Mask-resolution cells by majority label (ties to the lower id).
    std::vector<int> cell(static_cast<std::size_t>(mh) * mw, 0);
    for (int cy = 0; cy < mh; ++cy) {
        for (int cx = 0; cx < mw; ++cx) {
            std::map<int, int> counts;
            for (int dy = 0; dy < 4; ++dy) {
                for (int dx = 0; dx < 4; ++dx) {
                    ++counts[label[static_cast<std::size_t>(cy * 4 + dy) * hw + (cx * 4 + dx)]];
                }
            }
            int best = 0, best_count = -1;
            for (const auto& [id, cnt] : counts) {
                if (cnt > best_count) {
                    best = id;
                    best_count = cnt;
                }
            }
            cell[static_cast<std::size_t>(cy) * mw + cx] = best;
        }
    }

    // Validate: every region's cell mask is connected and >= 16 cells.
    const int n_regions = static_cast<int>(regions.size());
    std::vector<std::vector<std::uint8_t>> cell_masks(static_cast<std::size_t>(n_regions));
    for (int r = 0; r < n_regions; ++r) {
        auto& m = cell_masks[static_cast<std::size_t>(r)];
        m.assign(static_cast<std::size_t>(mh) * mw, 0);
        int count = 0;
        for (int i = 0; i < mh * mw; ++i) {
            if (cell[static_cast<std::size_t>(i)] == r) {
                m[static_cast<std::size_t>(i)] = 1;
                ++count;
            }
        }
        if (count < 16 || !connected(m, mh, mw)) return res;
    }

    // Image.
    s.image = Tensor({hw, hw, 3});
    for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
            const int rid = label[static_cast<std::size_t>(y) * hw + x];
            const Rgb c = color_of(rid < n_stuff ? regions[static_cast<std::size_t>(rid)].cls
                                                 : shapes[static_cast<std::size_t>(rid - n_stuff)].color);
            s.image.at(y, x, 0) = c.r;
            s.image.at(y, x, 1) = c.g;
            s.image.at(y, x, 2) = c.b;
        }
    }
    if (spec.noise > 0.0) {
        for (std::int64_t i = 0; i < s.image.numel(); ++i) {
            const double v = s.image[i] + rng.uniform(-spec.noise, spec.noise);
            s.image[i] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
        }
    }

    // Ground truth.
    s.gt.has_masks = spec.with_masks;
    s.gt.has_boxes = true;
    s.gt.mask_h = mh;
    s.gt.mask_w = mw;
    auto query_index = [&](const std::string& text) {
        for (std::size_t i = 0; i < s.queries.size(); ++i) {
            if (s.queries[i] == text) return static_cast<int>(i);
        }
        s.queries.push_back(text);
        s.gt.query_links.emplace_back();
        return static_cast<int>(s.queries.size()) - 1;
    };
    for (int r = 0; r < n_regions; ++r) {
        GroundTruthRegion region;
        const auto& m = cell_masks[static_cast<std::size_t>(r)];
        int min_x = mw, max_x = -1, min_y = mh, max_y = -1;
        for (int cy = 0; cy < mh; ++cy) {
            for (int cx = 0; cx < mw; ++cx) {
                if (!m[static_cast<std::size_t>(cy) * mw + cx]) continue;
                min_x = std::min(min_x, cx);
                max_x = std::max(max_x, cx);
                min_y = std::min(min_y, cy);
                max_y = std::max(max_y, cy);
            }
        }
        region.box.cx = (min_x + max_x + 1) / (2.0 * mw);
        region.box.cy = (min_y + max_y + 1) / (2.0 * mh);
        region.box.w = static_cast<double>(max_x + 1 - min_x) / mw;
        region.box.h = static_cast<double>(max_y + 1 - min_y) / mh;
        if (spec.with_masks) region.mask = m;
        const int q = query_index(regions[static_cast<std::size_t>(r)].cls);
        region.primary_query = q;
        s.gt.query_links[static_cast<std::size_t>(q)].push_back(r);
        s.gt.regions.push_back(std::move(region));
        s.region_classes.push_back(regions[static_cast<std::size_t>(r)].cls);
    }
    // Extra templates: "the large <class>" for the unique largest shape and a
    // prompt-phrased duplicate for the first shape; both force region<->query
    // many-to-many links.
    if (shapes.size() >= 2) {
        int largest = -1;
        double best_area = -1.0;
        bool unique = true;
        for (std::size_t si = 0; si < shapes.size(); ++si) {
            double area = 0.0;
            for (int i = 0; i < mh * mw; ++i) area += cell_masks[static_cast<std::size_t>(n_stuff + si)][static_cast<std::size_t>(i)];
            if (area > best_area + 0.5) {
                best_area = area;
                largest = static_cast<int>(si);
                unique = true;
            } else if (std::fabs(area - best_area) <= 0.5) {
                unique = false;
            }
        }
        if (largest >= 0 && unique) {
            const int rid = n_stuff + largest;
            const int q = query_index("the large " + s.region_classes[static_cast<std::size_t>(rid)]);
            s.gt.query_links[static_cast<std::size_t>(q)].push_back(rid);
        }
    }
    {
        const int rid = n_stuff;  // first shape
        const int q = query_index("a photo of a " + s.region_classes[static_cast<std::size_t>(rid)]);
        s.gt.query_links[static_cast<std::size_t>(q)].push_back(rid);
    }

    if (spec.with_masks) s.cell_region = cell;
    res.ok = true;
    res.sample = std::move(s);
    return res;
}

}  // namespace

DomainSpec stock_domain(const std::string& id) {
    if (id == "D1") return {"D1", {"red", "orange", "yellow"}, {"sky", "grass"}, true, 0.0};
    if (id == "D2") return {"D2", {"blue", "cyan", "purple"}, {"water", "sand"}, true, 0.05};
    if (id == "D3") return {"D3", {"red", "yellow", "blue"}, {"road"}, false, 0.0};
    throw ConfigError("unknown stock domain: " + id);
}

AnnotatedSample generate_sample(const DomainSpec& spec, std::uint64_t seed, int image_size) {
    if (image_size % 32 != 0) throw InputError("image size must be a multiple of 32");
    for (int attempt = 0; attempt < 64; ++attempt) {
        BuildResult r = try_build(spec, substream_seed(seed, static_cast<std::uint64_t>(attempt)), image_size);
        if (r.ok) {
            r.sample.id = spec.id + "_" + std::to_string(seed);
            return std::move(r.sample);
        }
    }
    throw NumericError("sample generation failed to satisfy mask invariants");
}

std::pair<AnnotatedSample, AnnotatedSample> make_pair_batch(const DomainSpec& a, const DomainSpec& b,
                                                            RandomStream& rng, int image_size) {
    if (a.id == b.id) throw InputError("make_pair_batch requires distinct domains");
    const std::uint64_t sa = rng.next_u64();
    const std::uint64_t sb = rng.next_u64();
    return {generate_sample(a, sa, image_size), generate_sample(b, sb, image_size)};
}

void assign_class_ids(Dataset& ds) {
    std::set<std::string> names;
    std::map<std::string, bool> thing;
    for (const auto& s : ds.samples) {
        for (std::size_t r = 0; r < s.region_classes.size(); ++r) {
            names.insert(s.region_classes[r]);
        }
    }
    // thing flag: shapes carry two words ("<color> <shape>"), stuff one.
    ds.class_names.assign(names.begin(), names.end());
    ds.thing_flags.clear();
    for (const auto& n : ds.class_names) thing[n] = n.find(' ') != std::string::npos;
    for (const auto& n : ds.class_names) ds.thing_flags.push_back(thing[n]);
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < ds.class_names.size(); ++i) index[ds.class_names[i]] = static_cast<int>(i);
    for (auto& s : ds.samples) {
        for (std::size_t r = 0; r < s.region_classes.size(); ++r) {
            s.gt.regions[r].class_id = index[s.region_classes[r]];
        }
    }
}

Dataset build_dataset(const std::vector<DomainSpec>& domains, int samples_per_domain, std::uint64_t seed,
                      int image_size) {
    Dataset ds;
    ds.image_size = image_size;
    ds.has_masks = true;
    for (const auto& d : domains) {
        ds.domains.push_back(d.id);
        if (!d.with_masks) ds.has_masks = false;
        for (int i = 0; i < samples_per_domain; ++i) {
            AnnotatedSample s = generate_sample(d, substream_seed(seed, fnv1a64(d.id) + static_cast<std::uint64_t>(i)),
                                                image_size);
            s.id = d.id + "_" + std::to_string(i);
            ds.samples.push_back(std::move(s));
        }
    }
    assign_class_ids(ds);
    return ds;
}

void write_dataset(const std::string& dir, const Dataset& ds) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::json j;
    j["image_size"] = ds.image_size;
    j["has_masks"] = ds.has_masks;
    j["domains"] = ds.domains;
    nlohmann::json classes = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.class_names.size(); ++i) {
        classes.push_back({{"name", ds.class_names[i]}, {"thing", static_cast<bool>(ds.thing_flags[i])}});
    }
    j["classes"] = classes;
    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto& s = ds.samples[i];
        char tag[32];
        std::snprintf(tag, sizeof(tag), "s%04zu", i);
        nlohmann::json sj;
        sj["id"] = s.id;
        sj["domain"] = s.domain_id;
        sj["image"] = std::string(tag) + "_img.uovt";
        write_tensor((fs::path(dir) / (std::string(tag) + "_img.uovt")).string(), s.image);
        if (s.gt.has_masks) {
            Tensor masks({static_cast<int>(s.gt.regions.size()), s.gt.mask_h, s.gt.mask_w});
            for (std::size_t r = 0; r < s.gt.regions.size(); ++r) {
                for (int p = 0; p < s.gt.mask_h * s.gt.mask_w; ++p) {
                    masks[static_cast<std::int64_t>(r) * s.gt.mask_h * s.gt.mask_w + p] =
                        s.gt.regions[r].mask[static_cast<std::size_t>(p)] ? 1.0f : 0.0f;
                }
            }
            sj["masks"] = std::string(tag) + "_masks.uovt";
            write_tensor((fs::path(dir) / (std::string(tag) + "_masks.uovt")).string(), masks);
            Tensor cellr({s.gt.mask_h, s.gt.mask_w});
            for (int p = 0; p < s.gt.mask_h * s.gt.mask_w; ++p) cellr[p] = static_cast<float>(s.cell_region[static_cast<std::size_t>(p)]);
            sj["cells"] = std::string(tag) + "_cells.uovt";
            write_tensor((fs::path(dir) / (std::string(tag) + "_cells.uovt")).string(), cellr);
        }
        nlohmann::json regions = nlohmann::json::array();
        for (std::size_t r = 0; r < s.gt.regions.size(); ++r) {
            const auto& reg = s.gt.regions[r];
            regions.push_back({{"class", s.region_classes[r]},
                               {"box", {reg.box.cx, reg.box.cy, reg.box.w, reg.box.h}},
                               {"query", reg.primary_query}});
        }
        sj["regions"] = regions;
        nlohmann::json queries = nlohmann::json::array();
        for (std::size_t q = 0; q < s.queries.size(); ++q) {
            queries.push_back({{"text", s.queries[q]}, {"links", s.gt.query_links[q]}});
        }
        sj["queries"] = queries;
        samples.push_back(sj);
    }
    j["samples"] = samples;
    std::ofstream os(fs::path(dir) / "dataset.json");
    if (!os) throw IoError("cannot write dataset.json in " + dir);
    os << j.dump(2) << "\n";
}

Dataset read_dataset(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "dataset.json");
    if (!is) throw IoError("missing dataset.json in " + dir);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw IoError("malformed dataset.json in " + dir + ": " + std::string(e.what()));
    }
    Dataset ds;
    try {
        ds.image_size = j.at("image_size").get<int>();
        ds.has_masks = j.at("has_masks").get<bool>();
        for (const auto& d : j.at("domains")) ds.domains.push_back(d.get<std::string>());
        for (const auto& c : j.at("classes")) {
            ds.class_names.push_back(c.at("name").get<std::string>());
            ds.thing_flags.push_back(c.at("thing").get<bool>());
        }
        for (const auto& sj : j.at("samples")) {
            AnnotatedSample s;
            s.id = sj.at("id").get<std::string>();
            s.domain_id = sj.at("domain").get<std::string>();
            s.image = read_tensor((fs::path(dir) / sj.at("image").get<std::string>()).string());
            s.gt.mask_h = s.image.dim(0) / 4;
            s.gt.mask_w = s.image.dim(1) / 4;
            s.gt.has_boxes = true;
            s.gt.has_masks = sj.contains("masks");
            Tensor masks;
            if (s.gt.has_masks) {
                masks = read_tensor((fs::path(dir) / sj.at("masks").get<std::string>()).string());
                Tensor cells = read_tensor((fs::path(dir) / sj.at("cells").get<std::string>()).string());
                s.cell_region.resize(static_cast<std::size_t>(cells.numel()));
                for (std::int64_t p = 0; p < cells.numel(); ++p) s.cell_region[static_cast<std::size_t>(p)] = static_cast<int>(cells[p]);
            }
            int ridx = 0;
            for (const auto& rj : sj.at("regions")) {
                GroundTruthRegion reg;
                const auto& b = rj.at("box");
                reg.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
                reg.primary_query = rj.at("query").get<int>();
                if (s.gt.has_masks) {
                    const int hw = s.gt.mask_h * s.gt.mask_w;
                    reg.mask.resize(static_cast<std::size_t>(hw));
                    for (int p = 0; p < hw; ++p) reg.mask[static_cast<std::size_t>(p)] = masks[static_cast<std::int64_t>(ridx) * hw + p] > 0.5f ? 1 : 0;
                }
                s.region_classes.push_back(rj.at("class").get<std::string>());
                s.gt.regions.push_back(std::move(reg));
                ++ridx;
            }
            for (const auto& qj : sj.at("queries")) {
                s.queries.push_back(qj.at("text").get<std::string>());
                s.gt.query_links.push_back(qj.at("links").get<std::vector<int>>());
            }
            if (s.queries.empty()) throw IoError("sample " + s.id + " has no queries");
            ds.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("dataset.json in " + dir + ": " + std::string(e.what()));
    }
    assign_class_ids(ds);
    ds.has_masks = true;
    for (const auto& s : ds.samples) {
        if (!s.gt.has_masks) ds.has_masks = false;
    }
    return ds;
}

std::vector<int> semantic_gt_map(const Dataset& ds, const AnnotatedSample& s) {
    (void)ds;
    std::vector<int> out(s.cell_region.size(), 0);
    for (std::size_t p = 0; p < s.cell_region.size(); ++p) {
        out[p] = s.gt.regions[static_cast<std::size_t>(s.cell_region[p])].class_id + 1;
    }
    return out;
}

std::vector<int> panoptic_gt_map(const AnnotatedSample& s) {
    std::vector<int> out(s.cell_region.size(), 0);
    for (std::size_t p = 0; p < s.cell_region.size(); ++p) out[p] = s.cell_region[p] + 1;
    return out;
}

}  // namespace uovn
