#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "msn/autodiff.hpp"
#include "msn/backbone.hpp"
#include "msn/evaluation.hpp"
#include "msn/mainbody.hpp"
#include "msn/meta_fusion.hpp"
#include "msn/param_store.hpp"
#include "msn/pyramid.hpp"
#include "msn/random.hpp"
#include "msn/tensor.hpp"

namespace msn {

struct TrainConfig {
    int epochs_step1 = 30;
    int epochs_step2 = 10;
    int epochs_step3 = 10;
    int batch_size = 32;
    double learning_rate = 1e-4;
    std::uint64_t seed = 0;
    int backbone_batch_size = 0;      // full-backbone training batch; 0 = batch_size
    double fusion_learning_rate = 0;  // step-3 / fusion-baseline lr; 0 = learning_rate

    int backbone_batch() const { return backbone_batch_size > 0 ? backbone_batch_size : batch_size; }
    double fusion_lr() const { return fusion_learning_rate > 0 ? fusion_learning_rate : learning_rate; }

    void validate() const {
        if (epochs_step1 < 1 || epochs_step2 < 1 || epochs_step3 < 1 || batch_size < 1)
            throw std::invalid_argument("TrainConfig: counts must be positive");
        if (backbone_batch_size < 0)
            throw std::invalid_argument("TrainConfig: backbone_batch_size must be >= 0");
        if (fusion_learning_rate < 0)
            throw std::invalid_argument("TrainConfig: fusion_learning_rate must be >= 0");
        if (learning_rate <= 0) throw std::invalid_argument("TrainConfig: learning_rate must be > 0");
    }
};

struct TrainLog {
    struct Row {
        int epoch;
        std::string head;
        double loss;
        double miou;  // -1 when no probe was evaluated
        double seconds;
    };
    std::vector<Row> rows;

    void add(int epoch, const std::string& head, double loss, double miou, double seconds) {
        rows.push_back({epoch, head, loss, miou, seconds});
    }

    void save_csv(const std::filesystem::path& file) const {
        std::ofstream os(file);
        os << "epoch,head,loss,miou,seconds\n";
        for (const auto& r : rows)
            os << r.epoch << "," << r.head << "," << r.loss << "," << r.miou << "," << r.seconds
               << "\n";
    }
};

// Mean-reduced softmax cross entropy (ignore-label pixels contribute zero).
template <typename T>
double cross_entropy(const Tensor<T>& logits, const LabelMap& labels, int ignore_label) {
    Tape<T> tape;
    auto loss = tape.softmax_cross_entropy(tape.leaf(logits), labels, ignore_label);
    return static_cast<double>(tape.value(loss)[0]);
}

// Bias-corrected Adam over the trainable tensors of one store.
template <typename T>
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParameterStore<T>& params, const std::map<std::string, Tensor<T>>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (const auto& [name, g] : grads) {
            if (!params.trainable(name))
                throw std::logic_error("Adam: gradient for frozen tensor " + name);
            auto& p = params.tensor(name);
            if (!p.same_shape(g)) throw std::invalid_argument("Adam: grad shape mismatch for " + name);
            auto& [m, v] = state_[name];
            if (m.empty()) {
                m = Tensor<T>(p.shape());
                v = Tensor<T>(p.shape());
            }
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                if (!std::isfinite(gi)) throw std::runtime_error("Adam: non-finite gradient in " + name);
                const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
                const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double update = lr_ * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
                p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> state_;
};

namespace detail {

template <typename T>
void accumulate_grads(const Tape<T>& tape,
                      const std::map<std::string, typename Tape<T>::Var>& bound,
                      std::map<std::string, Tensor<T>>& grads, double scale) {
    for (const auto& [name, var] : bound) {
        const Tensor<T>& g = tape.grad(var);
        auto it = grads.find(name);
        if (it == grads.end()) it = grads.emplace(name, Tensor<T>(tape.value(var).shape())).first;
        if (g.empty()) continue;  // param never touched by the loss
        for (std::size_t i = 0; i < g.size(); ++i)
            it->second[i] += static_cast<T>(static_cast<double>(g[i]) * scale);
    }
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, Rng* rng) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    if (rng) std::shuffle(order.begin(), order.end(), *rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(n, i + static_cast<std::size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<long>(i), order.begin() + static_cast<long>(end));
    }
    return batches;
}

template <typename T>
const Tensor<T>& branch_patch(const PatchTriple<T>& t, int branch) {
    return branch == 1 ? t.x1 : (branch == 2 ? t.x2 : t.x3);
}
template <typename T>
const LabelMap& branch_label(const PatchTriple<T>& t, int branch) {
    return branch == 1 ? t.y1 : (branch == 2 ? t.y2 : t.y3);
}

}  // namespace detail

// Train one backbone on branch k's patches/labels. Step 1 is this with k = 3;
// the "Multi-branch" ablation reuses it for k = 1 and 2.
template <typename T>
std::pair<ParameterStore<T>, TrainLog> train_backbone(const std::vector<PatchTriple<T>>& triples,
                                                      int branch, const BackboneConfig& bb_cfg,
                                                      const TrainConfig& cfg, int ignore_label,
                                                      std::uint64_t seed_offset = 0,
                                                      int epochs_override = 0,
                                                      const std::vector<PatchTriple<T>>* probe = nullptr) {
    cfg.validate();
    if (triples.empty()) throw std::invalid_argument("train_backbone: empty split");
    auto store = init_backbone_params<T>(bb_cfg, cfg.seed + seed_offset);
    Adam<T> opt(cfg.learning_rate);
    TrainLog log;
    const int epochs = epochs_override > 0 ? epochs_override : cfg.epochs_step1;
    const std::string head = "S" + std::to_string(branch);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng = make_rng(cfg.seed + seed_offset, 0xe0000000ull + static_cast<std::uint64_t>(epoch));
        double epoch_loss = 0.0;
        std::size_t n_samples = 0;
        for (const auto& batch : detail::make_batches(triples.size(), cfg.backbone_batch(), &rng)) {
            std::map<std::string, Tensor<T>> grads;
            for (const auto si : batch) {
                const auto& tr = triples[si];
                Tape<T> tape;
                std::map<std::string, typename Tape<T>::Var> bound;
                auto vars = BackboneVars<T>::bind(tape, store, bb_cfg, &bound);
                auto res = backbone_forward(tape, vars, bb_cfg,
                                            tape.leaf(detail::branch_patch(tr, branch)));
                auto loss = tape.softmax_cross_entropy(res.logits, detail::branch_label(tr, branch),
                                                       ignore_label);
                epoch_loss += static_cast<double>(tape.value(loss)[0]);
                ++n_samples;
                tape.backward(loss);
                detail::accumulate_grads(tape, bound, grads, 1.0 / static_cast<double>(batch.size()));
            }
            opt.step(store, grads);
        }
        epoch_loss /= static_cast<double>(n_samples);
        if (epoch == 0) {
            const double expect = std::log(static_cast<double>(bb_cfg.n_classes));
            if (std::abs(epoch_loss - expect) > 0.05 * expect + 0.25)
                std::fprintf(stderr, "warning: initial loss %.4f far from ln(n_classes)=%.4f\n",
                             epoch_loss, expect);
        }
        double probe_miou = -1.0;
        if (probe && !probe->empty()) {
            ConfusionAccumulator acc(bb_cfg.n_classes, ignore_label);
            for (const auto& tr : *probe)
                acc.add(argmax_map(backbone_infer(store, bb_cfg, detail::branch_patch(tr, branch))),
                        detail::branch_label(tr, branch));
            probe_miou = acc.result().miou;
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.add(epoch, head, epoch_loss, probe_miou, secs);
    }
    store.freeze_all();
    return {std::move(store), std::move(log)};
}

template <typename T>
std::pair<ParameterStore<T>, TrainLog> step1_train_meta(const std::vector<PatchTriple<T>>& train,
                                                        const BackboneConfig& bb_cfg,
                                                        const TrainConfig& cfg, int ignore_label,
                                                        const std::vector<PatchTriple<T>>* probe = nullptr) {
    return train_backbone(train, 3, bb_cfg, cfg, ignore_label, 0, cfg.epochs_step1, probe);
}

// Step 2: per branch, only that branch's Mem-RM tensors are trainable; the
// meta store must come in fully frozen and is checksum-audited every epoch.
template <typename T>
std::pair<ParameterStore<T>, TrainLog> step2_train_memrm(const std::vector<PatchTriple<T>>& subtrain,
                                                         const ParameterStore<T>& meta,
                                                         const BackboneConfig& bb_cfg,
                                                         const GapProfile& profile,
                                                         const ResolutionSpec& spec,
                                                         const TrainConfig& cfg, int ignore_label) {
    cfg.validate();
    if (subtrain.empty()) throw std::invalid_argument("step2_train_memrm: empty split");
    if (meta.any_trainable()) throw std::invalid_argument("step2_train_memrm: meta must be frozen");
    const int branch = profile.branch;
    const double ratio = static_cast<double>(spec.factors[static_cast<std::size_t>(branch - 1)]) /
                         spec.factors[2];
    const std::uint64_t meta_sum = meta.full_checksum();

    auto memrm = init_memrm_params<T>(bb_cfg, profile, cfg.seed);
    std::set<int> gaps(profile.gap_layers.begin(), profile.gap_layers.end());

    // Meta-features are frozen; compute each triple's memory once.
    std::vector<FeatureMemory<T>> memories;
    memories.reserve(subtrain.size());
    for (const auto& tr : subtrain)
        memories.push_back(meta_forward(meta, bb_cfg, tr.x3, gaps, tr.patch_id).memory);

    Adam<T> opt(cfg.learning_rate);
    TrainLog log;
    const std::string head = "S" + std::to_string(branch);
    for (int epoch = 0; epoch < cfg.epochs_step2; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng = make_rng(cfg.seed, 0xe2000000ull + static_cast<std::uint64_t>(epoch) * 4 +
                                         static_cast<std::uint64_t>(branch));
        double epoch_loss = 0.0;
        std::size_t n_samples = 0;
        for (const auto& batch : detail::make_batches(subtrain.size(), cfg.batch_size, &rng)) {
            std::map<std::string, Tensor<T>> grads;
            for (const auto si : batch) {
                const auto& tr = subtrain[si];
                Tape<T> tape;
                std::map<std::string, typename Tape<T>::Var> bound;
                auto res = nonmeta_forward_tape(tape, meta, bb_cfg, memrm, memories[si],
                                                detail::branch_patch(tr, branch), profile, ratio,
                                                tr.patch_id, {}, &bound);
                auto loss = tape.softmax_cross_entropy(res.logits, detail::branch_label(tr, branch),
                                                       ignore_label);
                epoch_loss += static_cast<double>(tape.value(loss)[0]);
                ++n_samples;
                tape.backward(loss);
                detail::accumulate_grads(tape, bound, grads, 1.0 / static_cast<double>(batch.size()));
            }
            if (!grads.empty()) opt.step(memrm, grads);
        }
        if (meta.full_checksum() != meta_sum)
            throw std::runtime_error("step2_train_memrm: frozen meta parameters changed");
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.add(epoch, head, epoch_loss / static_cast<double>(n_samples), -1.0, secs);
    }
    return {std::move(memrm), std::move(log)};
}

// Frozen per-sample branch outputs feeding step 3 and the fusion baselines.
template <typename T>
struct FusionSample {
    Tensor<T> s1, s2p;      // branch logits, S2 already aligned to X1's frame
    SigmaVector<T> sigma;   // per-sample sigma (frozen nets => constant)
    LabelMap y1;
    int patch_id = -1;
};

template <typename T>
std::vector<FusionSample<T>> prepare_fusion_samples(
    const std::vector<PatchTriple<T>>& triples, const ParameterStore<T>& meta,
    const BackboneConfig& bb_cfg, const ParameterStore<T>& memrm1, const ParameterStore<T>& memrm2,
    const GapProfile& prof1, const GapProfile& prof2, const ResolutionSpec& spec, int ignore_label) {
    const double r1 = static_cast<double>(spec.factors[0]) / spec.factors[2];
    const double r2 = static_cast<double>(spec.factors[1]) / spec.factors[2];
    const double r12 = static_cast<double>(spec.factors[0]) / spec.factors[1];
    std::set<int> gap_union(prof1.gap_layers.begin(), prof1.gap_layers.end());
    gap_union.insert(prof2.gap_layers.begin(), prof2.gap_layers.end());
    const int pre_head = bb_cfg.head_layer() - 1;
    const auto& head_w = meta.tensor(bb_cfg.weight_name(bb_cfg.head_layer()));
    const auto& head_b = meta.tensor(bb_cfg.bias_name(bb_cfg.head_layer()));

    std::vector<FusionSample<T>> out;
    out.reserve(triples.size());
    for (const auto& tr : triples) {
        auto mem = meta_forward(meta, bb_cfg, tr.x3, gap_union, tr.patch_id).memory;
        Tape<T> tape;
        auto v1 = nonmeta_forward_tape(tape, meta, bb_cfg, memrm1, mem, tr.x1, prof1, r1,
                                       tr.patch_id, {pre_head});
        auto v2 = nonmeta_forward_tape(tape, meta, bb_cfg, memrm2, mem, tr.x2, prof2, r2,
                                       tr.patch_id, {pre_head});
        FusionSample<T> s;
        s.patch_id = tr.patch_id;
        s.y1 = tr.y1;
        s.s1 = tape.value(v1.logits);
        s.s2p = tape.value(align_to_x1(tape, v2.logits, r12));
        s.sigma = build_sigma(tape.value(v1.tapped.at(pre_head)), tape.value(v2.tapped.at(pre_head)),
                              tr.y1, head_w, head_b, head_w, head_b, r12, ignore_label, tr.patch_id);
        out.push_back(std::move(s));
    }
    return out;
}

template <typename T>
SigmaVector<T> mean_sigma(const std::vector<const FusionSample<T>*>& samples, int provenance) {
    SigmaVector<T> out;
    out.provenance = provenance;
    out.values = Tensor<T>(samples.front()->sigma.values.shape());
    for (const auto* s : samples)
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += s->sigma.values[i];
    for (auto& v : out.values.vec()) v /= static_cast<T>(samples.size());
    return out;
}

template <typename T>
struct Step3Result {
    ParameterStore<T> meta_learner;
    FusionWeights<T> inference_weights;
    SigmaVector<T> sigma_bar;
    TrainLog log;
};

// Step 3: only the meta-learner trains; per batch, sigma is the batch-mean of
// the (frozen) per-sample sigmas and one weight set serves the whole batch.
template <typename T>
Step3Result<T> step3_train_fusion(const std::vector<FusionSample<T>>& samples,
                                  const MetaFusionConfig& mf_cfg, const TrainConfig& cfg,
                                  int ignore_label) {
    cfg.validate();
    if (samples.empty()) throw std::invalid_argument("step3_train_fusion: empty split");
    auto ml = init_meta_learner<T>(mf_cfg, cfg.seed);
    Adam<T> opt(cfg.fusion_lr());
    TrainLog log;
    for (int epoch = 0; epoch < cfg.epochs_step3; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng = make_rng(cfg.seed, 0xe3000000ull + static_cast<std::uint64_t>(epoch));
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (const auto& batch : detail::make_batches(samples.size(), cfg.batch_size, &rng)) {
            std::vector<const FusionSample<T>*> refs;
            for (auto si : batch) refs.push_back(&samples[si]);
            auto sigma = mean_sigma(refs, static_cast<int>(n_batches));

            Tape<T> tape;
            auto fc1w = tape.param(ml.tensor("fc1.weight"));
            auto fc1b = tape.param(ml.tensor("fc1.bias"));
            auto fc2w = tape.param(ml.tensor("fc2.weight"));
            auto fc2b = tape.param(ml.tensor("fc2.bias"));
            auto [w1, w2] = generate_weights_tape(tape, mf_cfg, fc1w, fc1b, fc2w, fc2b,
                                                  tape.leaf(sigma.values));
            typename Tape<T>::Var loss{};
            for (const auto* s : refs) {
                auto fused = fuse_tape(tape, mf_cfg, tape.leaf(s->s1), tape.leaf(s->s2p), w1, w2);
                auto l = tape.softmax_cross_entropy(fused, s->y1, ignore_label);
                loss = loss.valid() ? tape.add(loss, l) : l;
            }
            loss = tape.scale(loss, static_cast<T>(1.0 / static_cast<double>(refs.size())));
            epoch_loss += static_cast<double>(tape.value(loss)[0]);
            ++n_batches;
            tape.backward(loss);
            std::map<std::string, Tensor<T>> grads;
            detail::accumulate_grads(tape,
                                     {{"fc1.weight", fc1w},
                                      {"fc1.bias", fc1b},
                                      {"fc2.weight", fc2w},
                                      {"fc2.bias", fc2b}},
                                     grads, 1.0);
            opt.step(ml, grads);
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.add(epoch, "S", epoch_loss / static_cast<double>(n_batches), -1.0, secs);
    }

    // sigma_bar = mean of per-batch sigmas, fixed (unshuffled) batch order.
    std::vector<SigmaVector<T>> batch_sigmas;
    for (const auto& batch : detail::make_batches(samples.size(), cfg.batch_size, nullptr)) {
        std::vector<const FusionSample<T>*> refs;
        for (auto si : batch) refs.push_back(&samples[si]);
        batch_sigmas.push_back(mean_sigma(refs, static_cast<int>(batch_sigmas.size())));
    }
    Step3Result<T> res;
    auto [weights, sbar] = finalize_inference_weights(ml, mf_cfg, batch_sigmas);
    res.meta_learner = std::move(ml);
    res.inference_weights = std::move(weights);
    res.sigma_bar = std::move(sbar);
    res.log = std::move(log);
    return res;
}

// Mean fused loss of a fixed weight set over a whole sample set.
template <typename T>
double fusion_set_loss(const std::vector<FusionSample<T>>& samples, const MetaFusionConfig& mf_cfg,
                       const FusionWeights<T>& weights, int ignore_label) {
    double total = 0.0;
    for (const auto& s : samples)
        total += cross_entropy(fuse(s.s1, s.s2p, weights, mf_cfg), s.y1, ignore_label);
    return total / static_cast<double>(samples.size());
}

// "w/o Meta" baseline: the same two fusion convolutions trained end-to-end by
// Adam from scratch on the same frozen branch outputs.
template <typename T>
std::pair<FusionWeights<T>, TrainLog> train_fusion_baseline(const std::vector<FusionSample<T>>& samples,
                                                            const MetaFusionConfig& mf_cfg,
                                                            const TrainConfig& cfg, int epochs,
                                                            int ignore_label) {
    cfg.validate();
    if (samples.empty()) throw std::invalid_argument("train_fusion_baseline: empty split");
    ParameterStore<T> store;
    Rng rng = make_rng(cfg.seed, 0x62617365ull);  // "base"
    Tensor<T> w1({mf_cfg.n_classes, 2 * mf_cfg.n_classes, 3, 3});
    Tensor<T> w2({mf_cfg.n_classes, mf_cfg.n_classes, 3, 3});
    kaiming_init(w1, rng);
    kaiming_init(w2, rng);
    store.add("fusion.w1", std::move(w1));
    store.add("fusion.w2", std::move(w2));

    Adam<T> opt(cfg.fusion_lr());
    TrainLog log;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng = make_rng(cfg.seed, 0xe4000000ull + static_cast<std::uint64_t>(epoch));
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (const auto& batch : detail::make_batches(samples.size(), cfg.batch_size, &shuffle_rng)) {
            Tape<T> tape;
            auto w1v = tape.param(store.tensor("fusion.w1"));
            auto w2v = tape.param(store.tensor("fusion.w2"));
            typename Tape<T>::Var loss{};
            for (auto si : batch) {
                const auto& s = samples[si];
                auto fused = fuse_tape(tape, mf_cfg, tape.leaf(s.s1), tape.leaf(s.s2p), w1v, w2v);
                auto l = tape.softmax_cross_entropy(fused, s.y1, ignore_label);
                loss = loss.valid() ? tape.add(loss, l) : l;
            }
            loss = tape.scale(loss, static_cast<T>(1.0 / static_cast<double>(batch.size())));
            epoch_loss += static_cast<double>(tape.value(loss)[0]);
            ++n_batches;
            tape.backward(loss);
            std::map<std::string, Tensor<T>> grads;
            detail::accumulate_grads(tape, {{"fusion.w1", w1v}, {"fusion.w2", w2v}}, grads, 1.0);
            opt.step(store, grads);
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.add(epoch, "S", epoch_loss / static_cast<double>(n_batches), -1.0, secs);
    }
    return {FusionWeights<T>{store.tensor("fusion.w1"), store.tensor("fusion.w2")}, std::move(log)};
}

}  // namespace msn
