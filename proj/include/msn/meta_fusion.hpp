#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "msn/autodiff.hpp"
#include "msn/param_store.hpp"
#include "msn/random.hpp"
#include "msn/tensor.hpp"

namespace msn {

// Shapes of the meta-learner and the two generated fusion convolutions.
// The input is the concatenated flattened gradient of both output heads; the
// output is reshaped into a 3x3 (2*Nc -> Nc) and a 3x3 (Nc -> Nc) kernel.
struct MetaFusionConfig {
    int n_classes = 4;
    int c_last = 16;   // channel count feeding each branch's 1x1 head
    int hidden = 256;

    int d_in() const { return 2 * c_last * n_classes; }
    int w1_len() const { return 9 * 2 * n_classes * n_classes; }
    int w2_len() const { return 9 * n_classes * n_classes; }
    int d_out() const { return w1_len() + w2_len(); }

    void validate() const {
        if (n_classes < 2 || c_last < 1 || hidden < 1)
            throw std::invalid_argument("MetaFusionConfig: invalid dimensions");
    }
};

template <typename T>
ParameterStore<T> init_meta_learner(const MetaFusionConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParameterStore<T> store;
    Rng rng = make_rng(seed, 0x6d66636dull);  // "mfcm"
    Tensor<T> w1({cfg.hidden, cfg.d_in()});
    Tensor<T> w2({cfg.d_out(), cfg.hidden});
    kaiming_init(w1, rng);
    kaiming_init(w2, rng);
    // small output layer: the sigma-dependent part of the generated kernels
    // starts as a perturbation around the bias below
    for (auto& v : w2.vec()) v = static_cast<T>(v * T(0.01));
    store.add("fc1.weight", std::move(w1));
    store.add("fc1.bias", Tensor<T>({cfg.hidden}));
    store.add("fc2.weight", std::move(w2));
    // bias initialized so the generated kernels pass the X1 probabilities
    // through unchanged: fusion starts as a refinement of S1, not from noise
    Tensor<T> b2({cfg.d_out()});
    const int nc = cfg.n_classes;
    const T g = static_cast<T>(2.0);
    for (int o = 0; o < nc; ++o) {
        b2[static_cast<std::size_t>(((o * 2 * nc + o) * 3 + 1) * 3 + 1)] = g;
        b2[static_cast<std::size_t>(cfg.w1_len() + ((o * nc + o) * 3 + 1) * 3 + 1)] = g;
    }
    store.add("fc2.bias", std::move(b2));
    return store;
}

template <typename T>
void check_meta_learner(const ParameterStore<T>& store, const MetaFusionConfig& cfg) {
    cfg.validate();
    auto expect = [&](const std::string& name, std::vector<int> shape) {
        if (!store.has(name) || store.tensor(name).shape() != shape)
            throw std::invalid_argument("meta-learner tensor " + name + " must have shape " +
                                        shape_str(shape));
    };
    expect("fc1.weight", {cfg.hidden, cfg.d_in()});
    expect("fc1.bias", {cfg.hidden});
    expect("fc2.weight", {cfg.d_out(), cfg.hidden});
    expect("fc2.bias", {cfg.d_out()});
}

template <typename T>
struct SigmaVector {
    Tensor<T> values;     // length d_in
    int provenance = -1;  // patch_id or batch_id
};

template <typename T>
struct FusionWeights {
    Tensor<T> w1;  // [Nc, 2*Nc, 3, 3]
    Tensor<T> w2;  // [Nc, Nc, 3, 3]
};

// sigma = cat(-dL(S1,Y1)/dW_o1, -dL(up(crop(S2)),Y1)/dW_o2), flattened kernel
// gradients only. f1/f2 are the pre-head features of the two branches; the
// heads themselves are applied here so the gradients can be taken.
template <typename T>
SigmaVector<T> build_sigma(const Tensor<T>& f1, const Tensor<T>& f2, const LabelMap& y1,
                           const Tensor<T>& head_w1, const Tensor<T>& head_b1,
                           const Tensor<T>& head_w2, const Tensor<T>& head_b2, double crop_ratio,
                           int ignore_label, int provenance = -1) {
    if (crop_ratio <= 1.0) throw std::invalid_argument("build_sigma: crop_ratio must be > 1");
    Tape<T> tape;
    auto w1v = tape.param(head_w1);
    auto w2v = tape.param(head_w2);
    auto s1 = tape.conv2d(tape.leaf(f1), w1v, tape.leaf(head_b1));

    auto s2 = tape.conv2d(tape.leaf(f2), w2v, tape.leaf(head_b2));
    const auto& s2t = tape.value(s2);
    const int ch = static_cast<int>(std::ceil(s2t.dim(1) / crop_ratio));
    const int cw = static_cast<int>(std::ceil(s2t.dim(2) / crop_ratio));
    auto s2p = tape.resize_bilinear(tape.crop_center(s2, ch, cw), s2t.dim(1), s2t.dim(2));
    if (tape.value(s2p).dim(1) != y1.dim(0) || tape.value(s2p).dim(2) != y1.dim(1))
        throw std::invalid_argument("build_sigma: S2' / Y1 shape mismatch");

    auto loss = tape.add(tape.softmax_cross_entropy(s1, y1, ignore_label),
                         tape.softmax_cross_entropy(s2p, y1, ignore_label));
    tape.backward(loss);

    const auto& g1 = tape.grad(w1v);
    const auto& g2 = tape.grad(w2v);
    SigmaVector<T> sigma;
    sigma.provenance = provenance;
    sigma.values = Tensor<T>({static_cast<int>(g1.size() + g2.size())});
    for (std::size_t i = 0; i < g1.size(); ++i) sigma.values[i] = -g1[i];
    for (std::size_t i = 0; i < g2.size(); ++i) sigma.values[g1.size() + i] = -g2[i];
    for (const T v : sigma.values.vec())
        if (!std::isfinite(static_cast<double>(v)))
            throw std::runtime_error("build_sigma: non-finite sigma");
    return sigma;
}

// Crop the central 1/ratio region of S2 and upsample back, matching the sigma
// construction. Used wherever S2 must be expressed in X1's frame.
template <typename T>
typename Tape<T>::Var align_to_x1(Tape<T>& tape, typename Tape<T>::Var s2, double ratio) {
    const auto& t = tape.value(s2);
    const int ch = static_cast<int>(std::ceil(t.dim(1) / ratio));
    const int cw = static_cast<int>(std::ceil(t.dim(2) / ratio));
    return tape.resize_bilinear(tape.crop_center(s2, ch, cw), t.dim(1), t.dim(2));
}

// W = fc2(ReLU(fc1(sigma))), split and reshaped into the two fusion kernels.
template <typename T>
std::pair<typename Tape<T>::Var, typename Tape<T>::Var> generate_weights_tape(
    Tape<T>& tape, const MetaFusionConfig& cfg, typename Tape<T>::Var fc1_w,
    typename Tape<T>::Var fc1_b, typename Tape<T>::Var fc2_w, typename Tape<T>::Var fc2_b,
    typename Tape<T>::Var sigma) {
    if (tape.value(sigma).size() != static_cast<std::size_t>(cfg.d_in()))
        throw std::invalid_argument("generate_weights: sigma length " +
                                    std::to_string(tape.value(sigma).size()) + ", expected " +
                                    std::to_string(cfg.d_in()));
    // raw head gradients are minuscule; RMS-normalize so fc1 operates at unit
    // scale (the constant is data, not differentiated through)
    double ss = 0.0;
    for (const T v : tape.value(sigma).vec()) ss += static_cast<double>(v) * v;
    const double rms = std::sqrt(ss / static_cast<double>(cfg.d_in()));
    auto sigma_n = tape.scale(sigma, static_cast<T>(1.0 / (rms + 1e-12)));
    auto h = tape.relu(tape.linear(sigma_n, fc1_w, fc1_b));
    auto out = tape.linear(h, fc2_w, fc2_b);
    const int nc = cfg.n_classes;
    auto w1 = tape.slice_reshape(out, 0, {nc, 2 * nc, 3, 3});
    auto w2 = tape.slice_reshape(out, static_cast<std::size_t>(cfg.w1_len()), {nc, nc, 3, 3});
    return {w1, w2};
}

template <typename T>
FusionWeights<T> generate_weights(const ParameterStore<T>& ml, const MetaFusionConfig& cfg,
                                  const SigmaVector<T>& sigma) {
    check_meta_learner(ml, cfg);
    Tape<T> tape;
    auto [w1, w2] = generate_weights_tape(tape, cfg, tape.leaf(ml.tensor("fc1.weight")),
                                          tape.leaf(ml.tensor("fc1.bias")),
                                          tape.leaf(ml.tensor("fc2.weight")),
                                          tape.leaf(ml.tensor("fc2.bias")), tape.leaf(sigma.values));
    return {tape.value(w1), tape.value(w2)};
}

// S = conv_W2(ReLU(conv_W1(cat(softmax(S1), softmax(S2'))))), bias-free 3x3
// same-padding convolutions; output is logits over n_classes.
template <typename T>
typename Tape<T>::Var fuse_tape(Tape<T>& tape, const MetaFusionConfig& cfg,
                                typename Tape<T>::Var s1, typename Tape<T>::Var s2p,
                                typename Tape<T>::Var w1, typename Tape<T>::Var w2) {
    const auto& a = tape.value(s1);
    const auto& b = tape.value(s2p);
    if (a.dim(0) != cfg.n_classes || b.dim(0) != cfg.n_classes)
        throw std::invalid_argument("fuse: inputs must have n_classes channels");
    if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
        throw std::invalid_argument("fuse: S1/S2' spatial mismatch");
    auto x = tape.concat_c(tape.softmax_c(s1), tape.softmax_c(s2p));
    return tape.conv2d(tape.relu(tape.conv2d(x, w1)), w2);
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& s1, const Tensor<T>& s2p, const FusionWeights<T>& weights,
               const MetaFusionConfig& cfg) {
    Tape<T> tape;
    auto out = fuse_tape(tape, cfg, tape.leaf(s1), tape.leaf(s2p), tape.leaf(weights.w1),
                         tape.leaf(weights.w2));
    return tape.value(out);
}

// Freeze test-time fusion weights from the mean sigma over the sub-training
// set; there is no ground truth to form sigma from at inference.
template <typename T>
std::pair<FusionWeights<T>, SigmaVector<T>> finalize_inference_weights(
    const ParameterStore<T>& ml, const MetaFusionConfig& cfg,
    const std::vector<SigmaVector<T>>& sigmas) {
    if (sigmas.empty())
        throw std::invalid_argument("finalize_inference_weights: empty sub-training set");
    SigmaVector<T> mean;
    mean.provenance = -1;
    mean.values = Tensor<T>({cfg.d_in()});
    for (const auto& s : sigmas) {
        if (s.values.size() != static_cast<std::size_t>(cfg.d_in()))
            throw std::invalid_argument("finalize_inference_weights: sigma length mismatch");
        for (std::size_t i = 0; i < mean.values.size(); ++i) mean.values[i] += s.values[i];
    }
    for (auto& v : mean.values.vec()) v /= static_cast<T>(sigmas.size());
    return {generate_weights(ml, cfg, mean), mean};
}

}  // namespace msn
