#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msn/param_store.hpp"
#include "msn/tensor.hpp"

namespace msn {

struct IouResult {
    double miou = 0.0;
    std::map<int, double> per_class;  // classes present in pred or truth
};

// Running confusion-matrix accumulator so patch-level and whole-image mIoU can
// share one code path.
class ConfusionAccumulator {
public:
    ConfusionAccumulator(int n_classes, int ignore_label)
        : n_classes_(n_classes), ignore_(ignore_label),
          tp_(static_cast<std::size_t>(n_classes), 0), fp_(tp_), fn_(tp_) {}

    void add(const LabelMap& pred, const LabelMap& truth) {
        if (!pred.same_shape(truth))
            throw std::invalid_argument("miou: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                        shape_str(truth.shape()));
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const int t = truth[i];
            if (t == ignore_) continue;
            const int p = pred[i];
            if (t < 0 || t >= n_classes_ || p < 0 || p >= n_classes_)
                throw std::invalid_argument("miou: label out of range");
            if (p == t) {
                ++tp_[static_cast<std::size_t>(t)];
            } else {
                ++fp_[static_cast<std::size_t>(p)];
                ++fn_[static_cast<std::size_t>(t)];
            }
        }
    }

    // Mean IoU over classes present in pred or truth; absent classes excluded.
    IouResult result() const {
        IouResult out;
        double sum = 0.0;
        int n = 0;
        for (int c = 0; c < n_classes_; ++c) {
            const auto i = static_cast<std::size_t>(c);
            const long long denom = tp_[i] + fp_[i] + fn_[i];
            if (denom == 0) continue;  // class absent from both maps
            const double iou = static_cast<double>(tp_[i]) / static_cast<double>(denom);
            out.per_class[c] = iou;
            sum += iou;
            ++n;
        }
        out.miou = n > 0 ? sum / n : 0.0;
        return out;
    }

private:
    int n_classes_, ignore_;
    std::vector<long long> tp_, fp_, fn_;
};

inline IouResult miou(const LabelMap& pred, const LabelMap& truth, int n_classes, int ignore_label) {
    ConfusionAccumulator acc(n_classes, ignore_label);
    acc.add(pred, truth);
    return acc.result();
}

// Per-pixel argmax over the channel axis of a logits/probability map.
template <typename T>
LabelMap argmax_map(const Tensor<T>& logits) {
    const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    LabelMap out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int best = 0;
            T best_v = logits.at(0, y, x);
            for (int ci = 1; ci < c; ++ci)
                if (logits.at(ci, y, x) > best_v) {
                    best_v = logits.at(ci, y, x);
                    best = ci;
                }
            out.at2(y, x) = best;
        }
    return out;
}

template <typename T>
Tensor<T> softmax_probs(const Tensor<T>& logits) {
    Tensor<T> out(logits.shape());
    const int c = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T mx = logits.at(0, y, x);
            for (int ci = 1; ci < c; ++ci) mx = std::max(mx, logits.at(ci, y, x));
            T sum = T(0);
            for (int ci = 0; ci < c; ++ci) {
                const T e = std::exp(logits.at(ci, y, x) - mx);
                out.at(ci, y, x) = e;
                sum += e;
            }
            for (int ci = 0; ci < c; ++ci) out.at(ci, y, x) /= sum;
        }
    return out;
}

struct EvalReport {
    std::string method;
    double miou_x1 = 0.0, miou_x2 = 0.0, miou_x3 = 0.0, miou_fusion = 0.0;
    std::map<int, double> per_class_fusion;
    std::map<std::string, std::size_t> component_params;  // backbone / mem_rm / meta_fm / fusion
    std::size_t total_params = 0;

    nlohmann::json to_json() const {
        nlohmann::json per_class;
        for (const auto& [c, v] : per_class_fusion) per_class[std::to_string(c)] = v;
        return {{"method", method},
                {"miou", {{"x1", miou_x1}, {"x2", miou_x2}, {"x3", miou_x3}, {"fusion", miou_fusion}}},
                {"per_class_fusion", per_class},
                {"component_params", component_params},
                {"total_params", total_params}};
    }
};

// Exact element counts per named component, plus their total.
template <typename T>
std::pair<std::map<std::string, std::size_t>, std::size_t> count_params(
    const std::map<std::string, const ParameterStore<T>*>& components) {
    std::map<std::string, std::size_t> per;
    std::size_t total = 0;
    for (const auto& [name, store] : components) {
        const std::size_t n = store ? store->total_elements() : 0;
        per[name] = n;
        total += n;
    }
    return {per, total};
}

}  // namespace msn
