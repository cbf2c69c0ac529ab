#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "msn/autodiff.hpp"
#include "msn/param_store.hpp"
#include "msn/random.hpp"
#include "msn/tensor.hpp"

namespace msn {

// Encoder-decoder segmentation net: encoder_blocks x (conv3x3 + ReLU + 2x avgpool),
// decoder_blocks x (2x bilinear upsample + conv3x3 + ReLU), then a 1x1 head to
// n_classes logits. Layers are indexed 0..num_layers()-1; the head is the last.
struct BackboneConfig {
    int n_classes = 4;
    int base_channels = 16;
    int encoder_blocks = 3;
    int decoder_blocks = 3;

    void validate() const {
        if (n_classes < 2) throw std::invalid_argument("BackboneConfig: n_classes >= 2 required");
        if (base_channels < 1) throw std::invalid_argument("BackboneConfig: base_channels >= 1");
        if (encoder_blocks < 1) throw std::invalid_argument("BackboneConfig: encoder_blocks >= 1");
        if (encoder_blocks != decoder_blocks)
            throw std::invalid_argument("BackboneConfig: encoder_blocks must equal decoder_blocks");
    }

    int num_layers() const { return encoder_blocks + decoder_blocks + 1; }
    int head_layer() const { return num_layers() - 1; }

    int layer_in_channels(int l) const {
        const int e = encoder_blocks;
        if (l < e) return l == 0 ? 3 : base_channels << (l - 1);
        if (l < 2 * e) return base_channels << (e - 1 - (l - e));
        return base_channels;  // head
    }

    int layer_out_channels(int l) const {
        const int e = encoder_blocks;
        if (l < e) return base_channels << l;
        if (l < 2 * e) {
            const int j = l - e;
            return j < e - 1 ? base_channels << (e - 2 - j) : base_channels;
        }
        return n_classes;  // head
    }

    int layer_kernel(int l) const { return l == head_layer() ? 1 : 3; }

    std::string weight_name(int l) const { return "conv" + std::to_string(l) + ".weight"; }
    std::string bias_name(int l) const { return "conv" + std::to_string(l) + ".bias"; }
};

template <typename T>
ParameterStore<T> init_backbone_params(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParameterStore<T> store;
    Rng rng = make_rng(seed, /*stream=*/0x6261636bull);  // "back"
    for (int l = 0; l < cfg.num_layers(); ++l) {
        const int k = cfg.layer_kernel(l);
        Tensor<T> w({cfg.layer_out_channels(l), cfg.layer_in_channels(l), k, k});
        kaiming_init(w, rng);
        store.add(cfg.weight_name(l), std::move(w));
        store.add(cfg.bias_name(l), Tensor<T>({cfg.layer_out_channels(l)}));
    }
    return store;
}

// Tape bindings for one backbone's parameters. Frozen tensors become constant
// leaves, so no gradient is ever produced for them.
template <typename T>
struct BackboneVars {
    std::vector<typename Tape<T>::Var> w, b;

    // `bound` (optional) collects name -> var for every trainable tensor.
    static BackboneVars bind(Tape<T>& tape, const ParameterStore<T>& store, const BackboneConfig& cfg,
                             std::map<std::string, typename Tape<T>::Var>* bound = nullptr) {
        BackboneVars vars;
        for (int l = 0; l < cfg.num_layers(); ++l) {
            for (const bool is_weight : {true, false}) {
                const auto name = is_weight ? cfg.weight_name(l) : cfg.bias_name(l);
                const auto& t = store.tensor(name);
                typename Tape<T>::Var v;
                if (store.trainable(name)) {
                    v = tape.param(t);
                    if (bound) (*bound)[name] = v;
                } else {
                    v = tape.leaf(t);
                }
                (is_weight ? vars.w : vars.b).push_back(v);
            }
        }
        return vars;
    }
};

// Transform applied to the stream right after layer l's post-activation output.
template <typename T>
using LayerHook = std::function<typename Tape<T>::Var(int layer, typename Tape<T>::Var stream)>;

template <typename T>
struct ForwardResult {
    typename Tape<T>::Var logits;
    std::map<int, typename Tape<T>::Var> tapped;
};

template <typename T>
ForwardResult<T> backbone_forward(Tape<T>& tape, const BackboneVars<T>& vars, const BackboneConfig& cfg,
                                  typename Tape<T>::Var x, const std::set<int>& taps = {},
                                  const LayerHook<T>& hook = nullptr) {
    const Tensor<T>& xt = tape.value(x);
    if (xt.rank() != 3 || xt.dim(0) != 3)
        throw std::invalid_argument("backbone_forward: input must be [3,H,W], got " + shape_str(xt.shape()));
    for (const T v : xt.vec())
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("backbone_forward: non-finite input");
    const int side = xt.dim(1);
    if (xt.dim(2) != side || side % (1 << cfg.encoder_blocks) != 0)
        throw std::invalid_argument("backbone_forward: input side must be square and divisible by 2^encoder_blocks");
    for (int t : taps)
        if (t < 0 || t >= cfg.num_layers())
            throw std::invalid_argument("backbone_forward: tap index out of range");

    ForwardResult<T> res;
    auto stream = x;
    const int e = cfg.encoder_blocks;
    for (int l = 0; l < cfg.num_layers(); ++l) {
        if (l < e) {
            stream = tape.avgpool2(tape.relu(tape.conv2d(stream, vars.w[l], vars.b[l])));
        } else if (l < 2 * e) {
            const auto& s = tape.value(stream);
            stream = tape.resize_bilinear(stream, s.dim(1) * 2, s.dim(2) * 2);
            stream = tape.relu(tape.conv2d(stream, vars.w[l], vars.b[l]));
        } else {
            stream = tape.conv2d(stream, vars.w[l], vars.b[l]);
        }
        if (hook) stream = hook(l, stream);
        if (taps.count(l)) res.tapped[l] = stream;
    }
    res.logits = stream;
    return res;
}

// Plain inference convenience: run one patch, return logits tensor.
template <typename T>
Tensor<T> backbone_infer(const ParameterStore<T>& store, const BackboneConfig& cfg, const Tensor<T>& x) {
    Tape<T> tape;
    auto vars = BackboneVars<T>::bind(tape, store, cfg);
    auto res = backbone_forward(tape, vars, cfg, tape.leaf(x));
    return tape.value(res.logits);
}

struct LayerActivationStats {
    double mean = 0.0;
    double variance = 0.0;
};

// Mean/variance over all post-activation elements of each layer, across a batch.
template <typename T>
std::vector<LayerActivationStats> activation_stats(const ParameterStore<T>& store,
                                                   const BackboneConfig& cfg,
                                                   const std::vector<Tensor<T>>& batch) {
    if (batch.empty()) throw std::invalid_argument("activation_stats: empty batch");
    const int L = cfg.num_layers();
    std::vector<double> sum(static_cast<std::size_t>(L), 0.0), sumsq(static_cast<std::size_t>(L), 0.0);
    std::vector<std::size_t> count(static_cast<std::size_t>(L), 0);
    std::set<int> all_taps;
    for (int l = 0; l < L; ++l) all_taps.insert(l);
    for (const auto& x : batch) {
        Tape<T> tape;
        auto vars = BackboneVars<T>::bind(tape, store, cfg);
        auto res = backbone_forward(tape, vars, cfg, tape.leaf(x), all_taps);
        for (int l = 0; l < L; ++l) {
            const Tensor<T>& t = tape.value(res.tapped.at(l));
            for (const T v : t.vec()) {
                sum[static_cast<std::size_t>(l)] += static_cast<double>(v);
                sumsq[static_cast<std::size_t>(l)] += static_cast<double>(v) * static_cast<double>(v);
            }
            count[static_cast<std::size_t>(l)] += t.size();
        }
    }
    std::vector<LayerActivationStats> out(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        const auto i = static_cast<std::size_t>(l);
        const double n = static_cast<double>(count[i]);
        const double mean = sum[i] / n;
        out[i].mean = mean;
        out[i].variance = std::max(0.0, sumsq[i] / n - mean * mean);
    }
    return out;
}

}  // namespace msn
