#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msn/autodiff.hpp"
#include "msn/backbone.hpp"
#include "msn/param_store.hpp"
#include "msn/tensor.hpp"

namespace msn {

// Gap scores of one non-meta branch against the frozen meta-branch.
struct GapProfile {
    int branch = 0;                 // 1 (high-res) or 2 (mid-res)
    double tau = 0.5;
    std::vector<double> scores;     // per candidate layer 0..L-2
    std::vector<int> gap_layers;    // ascending
    std::vector<double> mean_meta, var_meta, mean_branch, var_branch;

    nlohmann::json to_json() const {
        return {{"branch", branch},       {"tau", tau},
                {"scores", scores},       {"gap_layers", gap_layers},
                {"mean_meta", mean_meta}, {"var_meta", var_meta},
                {"mean_branch", mean_branch}, {"var_branch", var_branch}};
    }

    static GapProfile from_json(const nlohmann::json& j) {
        GapProfile p;
        p.branch = j.at("branch").get<int>();
        p.tau = j.at("tau").get<double>();
        p.scores = j.at("scores").get<std::vector<double>>();
        p.gap_layers = j.at("gap_layers").get<std::vector<int>>();
        p.mean_meta = j.at("mean_meta").get<std::vector<double>>();
        p.var_meta = j.at("var_meta").get<std::vector<double>>();
        p.mean_branch = j.at("mean_branch").get<std::vector<double>>();
        p.var_branch = j.at("var_branch").get<std::vector<double>>();
        return p;
    }

    void save(const std::filesystem::path& file) const {
        std::ofstream os(file);
        os << to_json().dump(2) << "\n";
    }
    static GapProfile load(const std::filesystem::path& file) {
        std::ifstream is(file);
        if (!is) throw std::runtime_error("GapProfile::load: cannot open " + file.string());
        return from_json(nlohmann::json::parse(is));
    }
};

// Relative mean+variance deviation per layer; head layer excluded. Falls back
// to the top-2 scoring layers when nothing clears tau, so the gap set is never
// empty.
template <typename T>
GapProfile detect_gaps(const ParameterStore<T>& meta_params, const BackboneConfig& cfg,
                       const std::vector<Tensor<T>>& calib_x3, const std::vector<Tensor<T>>& calib_xk,
                       double tau, int branch) {
    if (meta_params.any_trainable())
        throw std::invalid_argument("detect_gaps: meta parameters must be frozen");
    constexpr double eps = 1e-8;
    const auto stats3 = activation_stats(meta_params, cfg, calib_x3);
    const auto statsk = activation_stats(meta_params, cfg, calib_xk);
    const int n_cand = cfg.num_layers() - 1;  // head excluded

    GapProfile p;
    p.branch = branch;
    p.tau = tau;
    for (int l = 0; l < n_cand; ++l) {
        const auto i = static_cast<std::size_t>(l);
        const double score = std::abs(statsk[i].mean - stats3[i].mean) / (std::abs(stats3[i].mean) + eps) +
                             std::abs(statsk[i].variance - stats3[i].variance) / (stats3[i].variance + eps);
        p.scores.push_back(score);
    }
    for (int l = 0; l < cfg.num_layers(); ++l) {
        const auto i = static_cast<std::size_t>(l);
        p.mean_meta.push_back(stats3[i].mean);
        p.var_meta.push_back(stats3[i].variance);
        p.mean_branch.push_back(statsk[i].mean);
        p.var_branch.push_back(statsk[i].variance);
    }
    for (int l = 0; l < n_cand; ++l)
        if (p.scores[static_cast<std::size_t>(l)] > tau) p.gap_layers.push_back(l);
    if (p.gap_layers.empty()) {
        std::vector<int> idx(static_cast<std::size_t>(n_cand));
        for (int l = 0; l < n_cand; ++l) idx[static_cast<std::size_t>(l)] = l;
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return p.scores[static_cast<std::size_t>(a)] > p.scores[static_cast<std::size_t>(b)];
        });
        idx.resize(std::min<std::size_t>(2, idx.size()));
        std::sort(idx.begin(), idx.end());
        p.gap_layers = idx;
    }
    return p;
}

// Meta-features of one X3 pass, keyed by gap-layer index and scoped to the
// patch that produced them.
template <typename T>
struct FeatureMemory {
    int scope = -1;  // patch_id of the populating triple
    std::map<int, Tensor<T>> entries;
};

template <typename T>
struct MetaForwardResult {
    Tensor<T> logits;
    FeatureMemory<T> memory;
};

// One X3 pass through the meta-branch; taps the union of all branches' gap
// layers so a single pass can serve both non-meta branches.
template <typename T>
MetaForwardResult<T> meta_forward(const ParameterStore<T>& meta_params, const BackboneConfig& cfg,
                                  const Tensor<T>& x3, const std::set<int>& gap_union, int patch_id) {
    Tape<T> tape;
    auto vars = BackboneVars<T>::bind(tape, meta_params, cfg);
    auto res = backbone_forward(tape, vars, cfg, tape.leaf(x3), gap_union);
    MetaForwardResult<T> out;
    out.logits = tape.value(res.logits);
    out.memory.scope = patch_id;
    for (const auto& [l, v] : res.tapped) out.memory.entries[l] = tape.value(v);
    return out;
}

// Mem-RM parameter naming inside a ParameterStore.
inline std::string memrm_name(int branch, int layer, const std::string& which) {
    return "branch" + std::to_string(branch) + ".layer" + std::to_string(layer) + "." + which;
}

template <typename T>
ParameterStore<T> init_memrm_params(const BackboneConfig& cfg, const GapProfile& profile,
                                    std::uint64_t seed) {
    ParameterStore<T> store;
    Rng rng = make_rng(seed, 0x6d656d72ull + static_cast<std::uint64_t>(profile.branch));  // "memr"
    for (int l : profile.gap_layers) {
        const int c = cfg.layer_out_channels(l);
        Tensor<T> wa({c, 2 * c, 3, 3});
        Tensor<T> wb({c, c, 3, 3});
        kaiming_init(wa, rng);
        kaiming_init(wb, rng);
        store.add(memrm_name(profile.branch, l, "conv_a.weight"), std::move(wa));
        store.add(memrm_name(profile.branch, l, "conv_a.bias"), Tensor<T>({c}));
        store.add(memrm_name(profile.branch, l, "conv_b.weight"), std::move(wb));
        store.add(memrm_name(profile.branch, l, "conv_b.bias"), Tensor<T>({c}));
    }
    return store;
}

// Eq.-style memory recall: crop the centered 1/r region of the meta-feature A,
// upsample to B's size, concatenate onto B and mix through conv-ReLU-conv.
// Output replaces B in the forward stream (same shape as B).
template <typename T>
typename Tape<T>::Var mem_rm(Tape<T>& tape, typename Tape<T>::Var a, typename Tape<T>::Var b,
                             double ratio, typename Tape<T>::Var wa, typename Tape<T>::Var ba,
                             typename Tape<T>::Var wb, typename Tape<T>::Var bb) {
    if (ratio <= 1.0) throw std::invalid_argument("mem_rm: ratio must be > 1");
    const auto& av = tape.value(a);
    const auto& bv = tape.value(b);
    if (!av.same_shape(bv))
        throw std::invalid_argument("mem_rm: A/B shape mismatch " + shape_str(av.shape()) + " vs " +
                                    shape_str(bv.shape()));
    const int h = av.dim(1), w = av.dim(2);
    const int ch = static_cast<int>(std::ceil(h / ratio));
    const int cw = static_cast<int>(std::ceil(w / ratio));
    auto recalled = tape.resize_bilinear(tape.crop_center(a, ch, cw), h, w);
    auto mixed = tape.conv2d(tape.concat_c(b, recalled), wa, ba);
    return tape.conv2d(tape.relu(mixed), wb, bb);
}

// Forward Xk through the frozen meta-branch, recalling memory at this branch's
// gap layers. Tape variant so step-2 training can backprop into Mem-RM params.
template <typename T>
ForwardResult<T> nonmeta_forward_tape(Tape<T>& tape, const ParameterStore<T>& meta_params,
                                      const BackboneConfig& cfg,
                                      const ParameterStore<T>& memrm_params,
                                      const FeatureMemory<T>& memory, const Tensor<T>& xk,
                                      const GapProfile& profile, double ratio, int patch_id,
                                      const std::set<int>& taps = {},
                                      std::map<std::string, typename Tape<T>::Var>* bound = nullptr) {
    if (memory.scope != patch_id)
        throw std::runtime_error("nonmeta_forward: stale memory (scope " + std::to_string(memory.scope) +
                                 " vs patch " + std::to_string(patch_id) + ")");
    for (int l : profile.gap_layers)
        if (!memory.entries.count(l))
            throw std::runtime_error("nonmeta_forward: memory missing gap layer " + std::to_string(l));

    auto vars = BackboneVars<T>::bind(tape, meta_params, cfg, bound);
    std::map<int, std::array<typename Tape<T>::Var, 4>> rm_vars;
    for (int l : profile.gap_layers) {
        auto bind = [&](const std::string& which) {
            const auto name = memrm_name(profile.branch, l, which);
            if (!memrm_params.trainable(name)) return tape.leaf(memrm_params.tensor(name));
            auto v = tape.param(memrm_params.tensor(name));
            if (bound) (*bound)[name] = v;
            return v;
        };
        rm_vars[l] = {bind("conv_a.weight"), bind("conv_a.bias"), bind("conv_b.weight"),
                      bind("conv_b.bias")};
    }

    LayerHook<T> hook = [&](int layer, typename Tape<T>::Var stream) {
        auto it = rm_vars.find(layer);
        if (it == rm_vars.end()) return stream;
        auto a = tape.leaf(memory.entries.at(layer));
        const auto& rv = it->second;
        return mem_rm(tape, a, stream, ratio, rv[0], rv[1], rv[2], rv[3]);
    };
    return backbone_forward(tape, vars, cfg, tape.leaf(xk), taps, hook);
}

template <typename T>
Tensor<T> nonmeta_forward(const ParameterStore<T>& meta_params, const BackboneConfig& cfg,
                          const ParameterStore<T>& memrm_params, const FeatureMemory<T>& memory,
                          const Tensor<T>& xk, const GapProfile& profile, double ratio, int patch_id) {
    Tape<T> tape;
    auto res = nonmeta_forward_tape(tape, meta_params, cfg, memrm_params, memory, xk, profile,
                                    ratio, patch_id);
    return tape.value(res.logits);
}

}  // namespace msn
