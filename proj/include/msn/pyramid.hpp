#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "msn/random.hpp"
#include "msn/tensor.hpp"

namespace msn {

// Linear magnification per branch, highest first (e.g. 16/4/1).
struct ResolutionSpec {
    std::array<int, 3> factors = {16, 4, 1};
    int patch_size = 256;

    void validate() const {
        const auto [m1, m2, m3] = factors;
        if (m3 < 1 || !(m1 > m2 && m2 > m3))
            throw std::invalid_argument("ResolutionSpec: need m1 > m2 > m3 >= 1");
        if (m1 % m2 != 0 || m2 % m3 != 0)
            throw std::invalid_argument("ResolutionSpec: m1 % m2 and m2 % m3 must be 0");
        if (patch_size < 16 || patch_size % 2 != 0)
            throw std::invalid_argument("ResolutionSpec: patch_size must be even and >= 16");
    }

    // Side of the level at factor m, relative to the base (factor m1) side.
    int level_side(int base_side, int m) const { return base_side * m / factors[0]; }
};

// One synthetic "virtual slide": an image+label pyramid, highest resolution first.
template <typename T>
struct PyramidImage {
    ResolutionSpec spec;
    std::uint64_t seed = 0;
    int n_classes = 0;
    std::vector<Tensor<T>> levels;      // [3,side,side], values in [0,1]; index matches spec.factors
    std::vector<LabelMap> label_levels; // [side,side], values in 0..n_classes-1

    int base_side() const { return levels.front().dim(1); }
    int ignore_label() const { return n_classes; }
};

template <typename T>
struct PatchTriple {
    Tensor<T> x1, x2, x3;           // [3,P,P]
    LabelMap y1, y2, y3;            // [P,P]; padded pixels carry the ignore label
    Tensor<std::uint8_t> mask1, mask2, mask3;  // [P,P], 1 where zero-padded
    int center_y = 0, center_x = 0; // base-level coordinates
    int patch_id = -1;
};

// Geometry needed to place patch predictions back onto the base level.
struct TileGeometry {
    int base_side = 0;
    int patch_size = 0;
    int n_classes = 0;
    std::vector<std::pair<int, int>> origins;  // patch_id -> (oy, ox) on the base level
};

namespace detail {

// Row-major tile origins: step = patch size, last origin shifted inward.
inline std::vector<int> tile_origins(int side, int patch) {
    std::vector<int> out;
    for (int o = 0; o + patch < side; o += patch) out.push_back(o);
    out.push_back(side - patch);
    return out;
}

}  // namespace detail

// Seeded procedural slide. The base label map is a Voronoi partition; each
// class renders as a mean color (survives downsampling) plus a class-specific
// high-frequency two-tone stripe pattern (visible only at the base level).
template <typename T>
PyramidImage<T> generate_virtual_slide(std::uint64_t seed, int base_side, int n_classes,
                                       const ResolutionSpec& spec) {
    spec.validate();
    if (n_classes < 2) throw std::invalid_argument("generate_virtual_slide: n_classes >= 2");
    const int scale_span = spec.factors[0] / spec.factors[2];
    if (base_side % scale_span != 0)
        throw std::invalid_argument("generate_virtual_slide: base_side must be divisible by m1/m3");

    Rng rng = make_rng(seed, 0x736c6964ull);  // "slid"
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    // Voronoi sites; class = site index mod n_classes so every class appears.
    const int n_sites = std::max(4 * n_classes, 24);
    std::vector<std::array<double, 2>> sites(static_cast<std::size_t>(n_sites));
    for (auto& s : sites) s = {unit(rng) * base_side, unit(rng) * base_side};

    // Per-class rendering parameters.
    struct ClassTex {
        std::array<double, 3> color;
        std::array<double, 3> tint;   // stripe chroma axis, zero mean over a period
        double angle, period, phase;
    };
    std::vector<ClassTex> tex(static_cast<std::size_t>(n_classes));
    for (int c = 0; c < n_classes; ++c) {
        auto& t = tex[static_cast<std::size_t>(c)];
        const double hue = (c + 0.3 * unit(rng)) / n_classes * 6.283185307179586;
        t.color = {0.5 + 0.32 * std::cos(hue), 0.5 + 0.32 * std::cos(hue - 2.094),
                   0.5 + 0.32 * std::cos(hue + 2.094)};
        t.tint = {0.6 * std::cos(hue + 1.2), 0.6 * std::cos(hue + 3.3), 0.6 * std::cos(hue + 5.1)};
        t.angle = 3.14159265358979 * (c + unit(rng) * 0.5) / n_classes;
        t.period = 4.0 + 2.5 * c + 2.0 * unit(rng);
        t.phase = unit(rng) * 6.28318530717958;
    }

    // Low-frequency brightness field shared by all classes.
    std::array<double, 4> lf = {unit(rng) * 6.28, unit(rng) * 6.28, 1.5 + unit(rng), 1.5 + unit(rng)};

    PyramidImage<T> img;
    img.spec = spec;
    img.seed = seed;
    img.n_classes = n_classes;

    LabelMap base_labels({base_side, base_side});
    Tensor<T> base({3, base_side, base_side});

    // Coarse nearest-site lookup: exact per-pixel search, pruned by a block-level
    // candidate list so 4096^2 slides stay fast.
    const int block = 64;
    const int nb = (base_side + block - 1) / block;
    std::vector<std::vector<int>> block_cands(static_cast<std::size_t>(nb) * nb);
    for (int by = 0; by < nb; ++by)
        for (int bx = 0; bx < nb; ++bx) {
            const double cy = (by + 0.5) * block, cx = (bx + 0.5) * block;
            double best = 1e30;
            for (int i = 0; i < n_sites; ++i) {
                const double d = std::hypot(sites[static_cast<std::size_t>(i)][0] - cy,
                                            sites[static_cast<std::size_t>(i)][1] - cx);
                best = std::min(best, d);
            }
            const double margin = best + 1.4142 * block;
            auto& cands = block_cands[static_cast<std::size_t>(by) * nb + bx];
            for (int i = 0; i < n_sites; ++i) {
                const double d = std::hypot(sites[static_cast<std::size_t>(i)][0] - cy,
                                            sites[static_cast<std::size_t>(i)][1] - cx);
                if (d <= margin) cands.push_back(i);
            }
        }

    for (int y = 0; y < base_side; ++y) {
        const int by = y / block;
        for (int x = 0; x < base_side; ++x) {
            const auto& cands = block_cands[static_cast<std::size_t>(by) * nb + x / block];
            int best_site = cands[0];
            double best_d = 1e30;
            for (int i : cands) {
                const double dy = sites[static_cast<std::size_t>(i)][0] - y;
                const double dx = sites[static_cast<std::size_t>(i)][1] - x;
                const double d = dy * dy + dx * dx;
                if (d < best_d) {
                    best_d = d;
                    best_site = i;
                }
            }
            const int cls = best_site % n_classes;
            base_labels.at2(y, x) = cls;

            const auto& t = tex[static_cast<std::size_t>(cls)];
            const double u = std::cos(t.angle) * x + std::sin(t.angle) * y;
            const double stripe = std::sin(6.283185307179586 * u / t.period + t.phase) >= 0.0 ? 1.0 : -1.0;
            const double bright =
                0.85 + 0.15 * std::sin(lf[0] + lf[2] * 6.28 * y / base_side) *
                                  std::sin(lf[1] + lf[3] * 6.28 * x / base_side);
            for (int ch = 0; ch < 3; ++ch) {
                const double v = t.color[static_cast<std::size_t>(ch)] * bright +
                                 stripe * t.tint[static_cast<std::size_t>(ch)] * 0.5;
                base.at(ch, y, x) = static_cast<T>(std::clamp(v, 0.0, 1.0));
            }
        }
    }

    for (int li = 0; li < 3; ++li) {
        const int m = spec.factors[static_cast<std::size_t>(li)];
        const int down = spec.factors[0] / m;
        const int side = spec.level_side(base_side, m);
        if (down == 1) {
            img.levels.push_back(base);
            img.label_levels.push_back(base_labels);
            continue;
        }
        Tensor<T> lvl({3, side, side});
        LabelMap lbl({side, side});
        std::vector<int> votes(static_cast<std::size_t>(n_classes));
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                for (int ch = 0; ch < 3; ++ch) {
                    double acc = 0.0;
                    for (int dy = 0; dy < down; ++dy)
                        for (int dx = 0; dx < down; ++dx)
                            acc += static_cast<double>(base.at(ch, y * down + dy, x * down + dx));
                    lvl.at(ch, y, x) = static_cast<T>(acc / (down * down));
                }
                std::fill(votes.begin(), votes.end(), 0);
                for (int dy = 0; dy < down; ++dy)
                    for (int dx = 0; dx < down; ++dx)
                        ++votes[static_cast<std::size_t>(base_labels.at2(y * down + dy, x * down + dx))];
                lbl.at2(y, x) = static_cast<int>(
                    std::max_element(votes.begin(), votes.end()) - votes.begin());
            }
        img.levels.push_back(std::move(lvl));
        img.label_levels.push_back(std::move(lbl));
    }
    return img;
}

namespace detail {

// Crop a P x P window with origin (oy, ox) from a level, zero/ignore padding
// outside the bounds.
template <typename T>
void crop_padded(const Tensor<T>& level, const LabelMap& labels, int oy, int ox, int patch,
                 int ignore, Tensor<T>& x, LabelMap& y, Tensor<std::uint8_t>& mask) {
    const int side = level.dim(1);
    x = Tensor<T>({3, patch, patch});
    y = LabelMap({patch, patch});
    mask = Tensor<std::uint8_t>({patch, patch});
    for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) {
            const int sy = oy + py, sx = ox + px;
            if (sy < 0 || sy >= side || sx < 0 || sx >= side) {
                y.at2(py, px) = ignore;
                mask.at2(py, px) = 1;
            } else {
                for (int ch = 0; ch < 3; ++ch) x.at(ch, py, px) = level.at(ch, sy, sx);
                y.at2(py, px) = labels.at2(sy, sx);
                mask.at2(py, px) = 0;
            }
        }
}

}  // namespace detail

// Non-overlapping row-major X1 tiling (last patch of a row/column shifted
// inward); X2/X3 center-aligned crops with zero padding.
template <typename T>
std::pair<std::vector<PatchTriple<T>>, TileGeometry> extract_triples(const PyramidImage<T>& img,
                                                                     const ResolutionSpec& spec) {
    spec.validate();
    const int P = spec.patch_size;
    const int base_side = img.base_side();
    if (base_side < P)
        throw std::invalid_argument("extract_triples: top level smaller than one patch");
    for (int li = 0; li < 3; ++li)
        if (img.levels[static_cast<std::size_t>(li)].dim(1) !=
            spec.level_side(base_side, spec.factors[static_cast<std::size_t>(li)]))
            throw std::invalid_argument("extract_triples: pyramid inconsistent with spec");

    const auto origins = detail::tile_origins(base_side, P);
    const int ignore = img.ignore_label();

    std::vector<PatchTriple<T>> triples;
    TileGeometry geom{base_side, P, img.n_classes, {}};
    int next_id = 0;
    for (int oy : origins)
        for (int ox : origins) {
            PatchTriple<T> t;
            t.patch_id = next_id++;
            t.center_y = oy + P / 2;
            t.center_x = ox + P / 2;
            detail::crop_padded(img.levels[0], img.label_levels[0], oy, ox, P, ignore, t.x1, t.y1,
                                t.mask1);
            for (int branch = 1; branch < 3; ++branch) {
                const double ratio = static_cast<double>(spec.factors[static_cast<std::size_t>(branch)]) /
                                     spec.factors[0];
                const int loy = static_cast<int>(std::llround(t.center_y * ratio)) - P / 2;
                const int lox = static_cast<int>(std::llround(t.center_x * ratio)) - P / 2;
                auto& x = branch == 1 ? t.x2 : t.x3;
                auto& y = branch == 1 ? t.y2 : t.y3;
                auto& m = branch == 1 ? t.mask2 : t.mask3;
                detail::crop_padded(img.levels[static_cast<std::size_t>(branch)],
                                    img.label_levels[static_cast<std::size_t>(branch)], loy, lox, P,
                                    ignore, x, y, m);
            }
            geom.origins.emplace_back(oy, ox);
            triples.push_back(std::move(t));
        }
    return {std::move(triples), std::move(geom)};
}

// Average per-pixel class probabilities over covering patches, then argmax.
template <typename T>
LabelMap stitch(const std::vector<std::pair<int, Tensor<T>>>& predictions, const TileGeometry& geom) {
    const int S = geom.base_side, P = geom.patch_size, C = geom.n_classes;
    Tensor<double> acc({C, S, S});
    Tensor<int> cover({S, S});
    for (const auto& [patch_id, probs] : predictions) {
        if (patch_id < 0 || patch_id >= static_cast<int>(geom.origins.size()))
            throw std::invalid_argument("stitch: unknown patch_id " + std::to_string(patch_id));
        if (probs.rank() != 3 || probs.dim(0) != C || probs.dim(1) != P || probs.dim(2) != P)
            throw std::invalid_argument("stitch: prediction shape " + shape_str(probs.shape()));
        const auto [oy, ox] = geom.origins[static_cast<std::size_t>(patch_id)];
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < P; ++y)
                for (int x = 0; x < P; ++x)
                    acc.at(c, oy + y, ox + x) += static_cast<double>(probs.at(c, y, x));
        for (int y = 0; y < P; ++y)
            for (int x = 0; x < P; ++x) ++cover.at2(oy + y, ox + x);
    }
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x)
            if (cover.at2(y, x) == 0)
                throw std::runtime_error("stitch: uncovered pixel at (" + std::to_string(y) + "," +
                                         std::to_string(x) + ")");
    LabelMap out({S, S});
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            int best = 0;
            double best_v = acc.at(0, y, x);
            for (int c = 1; c < C; ++c)
                if (acc.at(c, y, x) > best_v) {
                    best_v = acc.at(c, y, x);
                    best = c;
                }
            out.at2(y, x) = best;
        }
    return out;
}

// Slide-level split assignment.
struct DatasetSplit {
    std::map<int, std::string> slide_assignment;  // slide_id -> train|subtrain|test

    std::vector<int> slides(const std::string& split) const {
        std::vector<int> out;
        for (const auto& [id, s] : slide_assignment)
            if (s == split) out.push_back(id);
        return out;
    }
};

inline DatasetSplit make_split(int n_slides, int n_train, int n_subtrain, int n_test,
                               std::uint64_t seed) {
    if (n_train + n_subtrain + n_test != n_slides)
        throw std::invalid_argument("make_split: split sizes must sum to n_slides");
    std::vector<int> ids(static_cast<std::size_t>(n_slides));
    for (int i = 0; i < n_slides; ++i) ids[static_cast<std::size_t>(i)] = i;
    Rng rng = make_rng(seed, 0x73706c74ull);  // "splt"
    std::shuffle(ids.begin(), ids.end(), rng);
    DatasetSplit split;
    for (int i = 0; i < n_slides; ++i) {
        const int id = ids[static_cast<std::size_t>(i)];
        split.slide_assignment[id] = i < n_train ? "train" : (i < n_train + n_subtrain ? "subtrain" : "test");
    }
    return split;
}

}  // namespace msn
