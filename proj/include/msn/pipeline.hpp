#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "msn/config.hpp"
#include "msn/evaluation.hpp"
#include "msn/mainbody.hpp"
#include "msn/meta_fusion.hpp"
#include "msn/pyramid.hpp"
#include "msn/slide_io.hpp"
#include "msn/svg_plot.hpp"
#include "msn/training.hpp"

namespace msn {

namespace fs = std::filesystem;

// A required artifact from an earlier pipeline stage is missing (CLI exit 1).
struct PrereqError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunPaths {
    fs::path root;

    fs::path config() const { return root / "config.json"; }
    fs::path data() const { return root / "data"; }
    fs::path slide(int id) const { return data() / ("slide_" + std::to_string(id)); }
    fs::path splits() const { return data() / "splits.json"; }
    fs::path checkpoints(int step) const { return root / "checkpoints" / ("step" + std::to_string(step)); }
    fs::path memrm(int branch) const { return checkpoints(2) / ("branch" + std::to_string(branch)); }
    fs::path meta_learner() const { return checkpoints(3) / "meta_learner"; }
    fs::path fusion() const { return checkpoints(3) / "fusion"; }
    fs::path gaps_dir() const { return root / "gaps"; }
    fs::path gap_profile(int branch) const {
        return gaps_dir() / ("gaps_" + std::to_string(branch) + ".json");
    }
    fs::path reports() const { return root / "reports"; }
    fs::path train_log(int step) const {
        return reports() / ("log_step" + std::to_string(step) + ".csv");
    }
    fs::path plots() const { return root / "plots"; }
    fs::path lock() const { return root / ".lock"; }
};

// Lockfile held for the duration of one subcommand.
class RunLock {
public:
    explicit RunLock(const RunPaths& paths) : file_(paths.lock()) {
        fs::create_directories(paths.root);
        if (fs::exists(file_))
            throw std::runtime_error("run directory locked by another process: " + file_.string());
        std::ofstream(file_) << "locked\n";
    }
    ~RunLock() {
        std::error_code ec;
        fs::remove(file_, ec);
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    fs::path file_;
};

inline void require_artifact(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw PrereqError("missing " + what + " (expected at " + p.string() + ")");
}

inline RunConfig load_run_config(const RunPaths& paths) {
    require_artifact(paths.config(), "run config (run gen-data first)");
    return RunConfig::load(paths.config());
}

inline void refuse_overwrite(const fs::path& p, bool force) {
    if (fs::exists(p) && !force)
        throw std::runtime_error("output " + p.string() + " already exists; pass --force to overwrite");
}

// ---------------------------------------------------------------------------
// Data

template <typename T>
struct SlideData {
    int id = -1;
    TileGeometry geom;
    LabelMap base_labels;
    std::vector<PatchTriple<T>> triples;
};

template <typename T>
struct Dataset {
    std::vector<PatchTriple<T>> train, subtrain, test;
    std::vector<SlideData<T>> test_slides;
};

inline std::uint64_t slide_seed(std::uint64_t run_seed, int slide_id) {
    return run_seed * 1000003ull + static_cast<std::uint64_t>(slide_id) + 1;
}

template <typename T = float>
void cmd_gen_data(const RunConfig& cfg, const fs::path& out_dir, bool force) {
    cfg.validate();
    RunPaths paths{out_dir};
    RunLock lock(paths);
    refuse_overwrite(paths.splits(), force);
    fs::create_directories(paths.data());
    cfg.save(paths.config());
    for (int id = 0; id < cfg.n_slides; ++id) {
        auto img = generate_virtual_slide<T>(slide_seed(cfg.seed, id), cfg.base_side, cfg.n_classes,
                                             cfg.resolution);
        save_slide(paths.slide(id), img);
    }
    save_splits(paths.splits(), make_split(cfg.n_slides, cfg.split_sizes[0], cfg.split_sizes[1],
                                           cfg.split_sizes[2], cfg.seed));
}

template <typename T = float>
Dataset<T> load_dataset(const RunPaths& paths, const RunConfig& cfg) {
    require_artifact(paths.splits(), "generated data (run gen-data first)");
    const auto split = load_splits(paths.splits());
    Dataset<T> ds;
    for (const auto& [id, which] : split.slide_assignment) {
        auto img = load_slide<T>(paths.slide(id));
        auto [triples, geom] = extract_triples(img, cfg.resolution);
        auto& dst = which == "train" ? ds.train : (which == "subtrain" ? ds.subtrain : ds.test);
        // patch ids must be unique across slides
        const int offset = id * 1000000;
        for (auto& t : triples) t.patch_id += offset;
        if (which == "test") {
            SlideData<T> sd;
            sd.id = id;
            sd.geom = geom;
            sd.base_labels = img.label_levels[0];
            sd.triples = triples;
            ds.test_slides.push_back(std::move(sd));
        }
        dst.insert(dst.end(), std::make_move_iterator(triples.begin()),
                   std::make_move_iterator(triples.end()));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Gap analysis

template <typename T = float>
std::pair<GapProfile, GapProfile> analyze_gaps(const RunConfig& cfg, const ParameterStore<T>& meta,
                                               const std::vector<PatchTriple<T>>& calib,
                                               std::size_t max_calib = 32) {
    if (calib.empty()) throw std::invalid_argument("analyze_gaps: empty calibration set");
    std::vector<Tensor<T>> x1, x2, x3;
    for (std::size_t i = 0; i < std::min(max_calib, calib.size()); ++i) {
        x1.push_back(calib[i].x1);
        x2.push_back(calib[i].x2);
        x3.push_back(calib[i].x3);
    }
    auto p1 = detect_gaps(meta, cfg.backbone, x3, x1, cfg.gap_tau, 1);
    auto p2 = detect_gaps(meta, cfg.backbone, x3, x2, cfg.gap_tau, 2);
    return {p1, p2};
}

template <typename T = float>
void cmd_analyze_gaps(const RunPaths& paths, bool force) {
    const auto cfg = load_run_config(paths);
    RunLock lock(paths);
    require_artifact(paths.checkpoints(1) / "manifest.json", "step-1 meta checkpoint");
    refuse_overwrite(paths.gap_profile(1), force);
    auto meta = ParameterStore<T>::load(paths.checkpoints(1));
    auto ds = load_dataset<T>(paths, cfg);
    auto [p1, p2] = analyze_gaps(cfg, meta, ds.subtrain.empty() ? ds.train : ds.subtrain);
    fs::create_directories(paths.gaps_dir());
    p1.save(paths.gap_profile(1));
    p2.save(paths.gap_profile(2));

    fs::create_directories(paths.plots());
    std::vector<PlotSeries> series = {
        {"mean X1", "#d62728", p1.mean_branch}, {"mean X2", "#ff7f0e", p2.mean_branch},
        {"mean X3", "#1f77b4", p1.mean_meta},   {"var X1", "#e377c2", p1.var_branch},
        {"var X2", "#bcbd22", p2.var_branch},   {"var X3", "#17becf", p1.var_meta}};
    write_svg_chart(paths.plots() / "gaps.svg", "Per-layer activation statistics", "layer index",
                    "mean / variance", series);
}

// ---------------------------------------------------------------------------
// Training steps

template <typename T = float>
void cmd_train(const RunPaths& paths, int step, bool use_train_split, bool force) {
    const auto cfg = load_run_config(paths);
    RunLock lock(paths);
    fs::create_directories(paths.reports());
    auto ds = load_dataset<T>(paths, cfg);
    const auto& tune_split = use_train_split ? ds.train : ds.subtrain;

    if (step == 1) {
        refuse_overwrite(paths.checkpoints(1) / "manifest.json", force);
        auto [meta, log] = step1_train_meta(ds.train, cfg.backbone, cfg.train, cfg.ignore_label());
        meta.save(paths.checkpoints(1));
        log.save_csv(paths.train_log(1));
    } else if (step == 2) {
        require_artifact(paths.checkpoints(1) / "manifest.json", "step-1 meta checkpoint");
        require_artifact(paths.gap_profile(1), "gap profiles (run analyze-gaps first)");
        require_artifact(paths.gap_profile(2), "gap profiles (run analyze-gaps first)");
        refuse_overwrite(paths.memrm(1) / "manifest.json", force);
        auto meta = ParameterStore<T>::load(paths.checkpoints(1));
        TrainLog combined;
        for (int branch : {1, 2}) {
            auto profile = GapProfile::load(paths.gap_profile(branch));
            auto [memrm, log] = step2_train_memrm(tune_split, meta, cfg.backbone, profile,
                                                  cfg.resolution, cfg.train, cfg.ignore_label());
            memrm.save(paths.memrm(branch));
            combined.rows.insert(combined.rows.end(), log.rows.begin(), log.rows.end());
        }
        combined.save_csv(paths.train_log(2));
    } else if (step == 3) {
        require_artifact(paths.checkpoints(1) / "manifest.json", "step-1 meta checkpoint");
        require_artifact(paths.memrm(1) / "manifest.json", "step-2 Mem-RM checkpoint");
        require_artifact(paths.memrm(2) / "manifest.json", "step-2 Mem-RM checkpoint");
        require_artifact(paths.gap_profile(1), "gap profiles (run analyze-gaps first)");
        refuse_overwrite(paths.meta_learner() / "manifest.json", force);
        auto meta = ParameterStore<T>::load(paths.checkpoints(1));
        auto memrm1 = ParameterStore<T>::load(paths.memrm(1));
        auto memrm2 = ParameterStore<T>::load(paths.memrm(2));
        auto prof1 = GapProfile::load(paths.gap_profile(1));
        auto prof2 = GapProfile::load(paths.gap_profile(2));
        auto samples = prepare_fusion_samples(tune_split, meta, cfg.backbone, memrm1, memrm2, prof1,
                                              prof2, cfg.resolution, cfg.ignore_label());
        auto res = step3_train_fusion(samples, cfg.fusion_config(), cfg.train, cfg.ignore_label());
        res.meta_learner.save(paths.meta_learner());
        ParameterStore<T> fusion_store;
        fusion_store.add("fusion.w1", res.inference_weights.w1, false);
        fusion_store.add("fusion.w2", res.inference_weights.w2, false);
        fusion_store.add("sigma_bar", res.sigma_bar.values, false);
        fusion_store.save(paths.fusion());
        res.log.save_csv(paths.train_log(3));
    } else {
        throw std::invalid_argument("cmd_train: step must be 1, 2 or 3");
    }
}

// ---------------------------------------------------------------------------
// Evaluation

template <typename T>
struct MsnArtifacts {
    ParameterStore<T> meta, memrm1, memrm2;
    GapProfile prof1, prof2;
    FusionWeights<T> weights;
};

template <typename T = float>
MsnArtifacts<T> load_artifacts(const RunPaths& paths) {
    require_artifact(paths.checkpoints(1) / "manifest.json", "step-1 meta checkpoint");
    require_artifact(paths.memrm(1) / "manifest.json", "step-2 Mem-RM checkpoint");
    require_artifact(paths.fusion() / "manifest.json", "step-3 fusion checkpoint");
    MsnArtifacts<T> a;
    a.meta = ParameterStore<T>::load(paths.checkpoints(1));
    a.memrm1 = ParameterStore<T>::load(paths.memrm(1));
    a.memrm2 = ParameterStore<T>::load(paths.memrm(2));
    a.prof1 = GapProfile::load(paths.gap_profile(1));
    a.prof2 = GapProfile::load(paths.gap_profile(2));
    auto fusion_store = ParameterStore<T>::load(paths.fusion());
    a.weights = {fusion_store.tensor("fusion.w1"), fusion_store.tensor("fusion.w2")};
    return a;
}

// Branch + fused outputs of one triple under the MSN weight-sharing scheme.
template <typename T>
struct TripleOutputs {
    Tensor<T> s1, s2, s3, s2p, fused;
};

template <typename T>
TripleOutputs<T> msn_forward_triple(const RunConfig& cfg, const MsnArtifacts<T>& a,
                                    const PatchTriple<T>& tr) {
    const auto& spec = cfg.resolution;
    const double r1 = static_cast<double>(spec.factors[0]) / spec.factors[2];
    const double r2 = static_cast<double>(spec.factors[1]) / spec.factors[2];
    const double r12 = static_cast<double>(spec.factors[0]) / spec.factors[1];
    std::set<int> gap_union(a.prof1.gap_layers.begin(), a.prof1.gap_layers.end());
    gap_union.insert(a.prof2.gap_layers.begin(), a.prof2.gap_layers.end());

    auto meta_res = meta_forward(a.meta, cfg.backbone, tr.x3, gap_union, tr.patch_id);
    TripleOutputs<T> out;
    out.s3 = meta_res.logits;
    out.s1 = nonmeta_forward(a.meta, cfg.backbone, a.memrm1, meta_res.memory, tr.x1, a.prof1, r1,
                             tr.patch_id);
    out.s2 = nonmeta_forward(a.meta, cfg.backbone, a.memrm2, meta_res.memory, tr.x2, a.prof2, r2,
                             tr.patch_id);
    Tape<T> tape;
    out.s2p = tape.value(align_to_x1(tape, tape.leaf(out.s2), r12));
    out.fused = fuse(out.s1, out.s2p, a.weights, cfg.fusion_config());
    return out;
}

template <typename T>
struct EvalOutcome {
    EvalReport report;
    // stitched fused prediction per test slide, by slide id
    std::map<int, LabelMap> stitched;
    std::map<int, double> stitched_miou;
};

// Patch-level branch/fusion mIoU over the test triples, plus whole-image
// stitched maps for the provided slides.
template <typename T>
EvalOutcome<T> evaluate_msn(const RunConfig& cfg, const MsnArtifacts<T>& a,
                            const std::vector<PatchTriple<T>>& test,
                            const std::vector<SlideData<T>>* slides = nullptr) {
    const int nc = cfg.n_classes, ig = cfg.ignore_label();
    ConfusionAccumulator c1(nc, ig), c2(nc, ig), c3(nc, ig), cf(nc, ig);
    std::map<int, std::vector<std::pair<int, Tensor<T>>>> slide_preds;
    for (const auto& tr : test) {
        auto out = msn_forward_triple(cfg, a, tr);
        c1.add(argmax_map(out.s1), tr.y1);
        c2.add(argmax_map(out.s2), tr.y2);
        c3.add(argmax_map(out.s3), tr.y3);
        cf.add(argmax_map(out.fused), tr.y1);
        if (slides) slide_preds[tr.patch_id / 1000000].emplace_back(tr.patch_id % 1000000,
                                                                    softmax_probs(out.fused));
    }
    EvalOutcome<T> res;
    res.report.method = "msn";
    res.report.miou_x1 = c1.result().miou;
    res.report.miou_x2 = c2.result().miou;
    res.report.miou_x3 = c3.result().miou;
    auto fr = cf.result();
    res.report.miou_fusion = fr.miou;
    res.report.per_class_fusion = fr.per_class;
    if (slides)
        for (const auto& sd : *slides) {
            auto it = slide_preds.find(sd.id);
            if (it == slide_preds.end()) continue;
            auto map = stitch(it->second, sd.geom);
            res.stitched_miou[sd.id] = miou(map, sd.base_labels, nc, ig).miou;
            res.stitched[sd.id] = std::move(map);
        }
    return res;
}

// Independent per-branch backbones (the "Multi-branch" ablation).
template <typename T>
EvalReport evaluate_independent(const RunConfig& cfg, const ParameterStore<T>& net1,
                                const ParameterStore<T>& net2, const ParameterStore<T>& net3,
                                const FusionWeights<T>& weights,
                                const std::vector<PatchTriple<T>>& test) {
    const int nc = cfg.n_classes, ig = cfg.ignore_label();
    const double r12 = static_cast<double>(cfg.resolution.factors[0]) / cfg.resolution.factors[1];
    ConfusionAccumulator c1(nc, ig), c2(nc, ig), c3(nc, ig), cf(nc, ig);
    for (const auto& tr : test) {
        auto s1 = backbone_infer(net1, cfg.backbone, tr.x1);
        auto s2 = backbone_infer(net2, cfg.backbone, tr.x2);
        auto s3 = backbone_infer(net3, cfg.backbone, tr.x3);
        Tape<T> tape;
        auto s2p = tape.value(align_to_x1(tape, tape.leaf(s2), r12));
        auto fused = fuse(s1, s2p, weights, cfg.fusion_config());
        c1.add(argmax_map(s1), tr.y1);
        c2.add(argmax_map(s2), tr.y2);
        c3.add(argmax_map(s3), tr.y3);
        cf.add(argmax_map(fused), tr.y1);
    }
    EvalReport r;
    r.method = "multi-branch";
    r.miou_x1 = c1.result().miou;
    r.miou_x2 = c2.result().miou;
    r.miou_x3 = c3.result().miou;
    auto fr = cf.result();
    r.miou_fusion = fr.miou;
    r.per_class_fusion = fr.per_class;
    return r;
}

template <typename T>
void fill_param_counts(EvalReport& r, const ParameterStore<T>& backbone,
                       const ParameterStore<T>* memrm1, const ParameterStore<T>* memrm2,
                       const ParameterStore<T>* meta_fm, std::size_t fusion_weights) {
    r.component_params["backbone"] = backbone.total_elements();
    r.component_params["mem_rm"] =
        (memrm1 ? memrm1->total_elements() : 0) + (memrm2 ? memrm2->total_elements() : 0);
    r.component_params["meta_fm"] = meta_fm ? meta_fm->total_elements() : 0;
    r.component_params["fusion"] = fusion_weights;
    r.total_params = 0;
    for (const auto& [k, v] : r.component_params) r.total_params += v;
}

// Table rows (a)-(d) plus the "w/o Meta" fusion baseline, at run scale.
template <typename T = float>
std::vector<EvalReport> run_ablations(const RunConfig& cfg, const Dataset<T>& ds,
                                      const MsnArtifacts<T>& msn, TrainLog* baseline_log = nullptr) {
    const int ig = cfg.ignore_label();
    const auto mf_cfg = cfg.fusion_config();
    std::vector<EvalReport> rows;

    // (a) frozen meta-branch applied raw, with meta-fusion trained on its outputs
    MsnArtifacts<T> raw;
    raw.meta = msn.meta;
    raw.prof1 = GapProfile{1, cfg.gap_tau, {}, {}, {}, {}, {}, {}};
    raw.prof2 = GapProfile{2, cfg.gap_tau, {}, {}, {}, {}, {}, {}};
    {
        auto samples = prepare_fusion_samples(ds.subtrain, raw.meta, cfg.backbone, raw.memrm1,
                                              raw.memrm2, raw.prof1, raw.prof2, cfg.resolution, ig);
        auto s3res = step3_train_fusion(samples, mf_cfg, cfg.train, ig);
        raw.weights = s3res.inference_weights;
        auto outcome = evaluate_msn(cfg, raw, ds.test);
        outcome.report.method = "meta-branch";
        fill_param_counts<T>(outcome.report, raw.meta, nullptr, nullptr, &s3res.meta_learner,
                          raw.weights.w1.size() + raw.weights.w2.size());
        rows.push_back(outcome.report);
    }

    // (b) three branches separately trained from scratch
    {
        auto [net1, log1] = train_backbone(ds.train, 1, cfg.backbone, cfg.train, ig, 101);
        auto [net2, log2] = train_backbone(ds.train, 2, cfg.backbone, cfg.train, ig, 102);
        const auto& net3 = msn.meta;  // the X3 branch is the step-1 training itself
        // fusion on the independent branches' outputs
        std::vector<FusionSample<T>> samples;
        const double r12 = static_cast<double>(cfg.resolution.factors[0]) / cfg.resolution.factors[1];
        for (const auto& tr : ds.subtrain) {
            FusionSample<T> s;
            s.patch_id = tr.patch_id;
            s.y1 = tr.y1;
            s.s1 = backbone_infer(net1, cfg.backbone, tr.x1);
            auto s2 = backbone_infer(net2, cfg.backbone, tr.x2);
            Tape<T> tape;
            s.s2p = tape.value(align_to_x1(tape, tape.leaf(s2), r12));
            // sigma w.r.t. each net's own head
            const int pre_head = cfg.backbone.head_layer() - 1;
            Tape<T> t1;
            auto v1 = backbone_forward(t1, BackboneVars<T>::bind(t1, net1, cfg.backbone), cfg.backbone,
                                       t1.leaf(tr.x1), {pre_head});
            Tape<T> t2;
            auto v2 = backbone_forward(t2, BackboneVars<T>::bind(t2, net2, cfg.backbone), cfg.backbone,
                                       t2.leaf(tr.x2), {pre_head});
            s.sigma = build_sigma(t1.value(v1.tapped.at(pre_head)), t2.value(v2.tapped.at(pre_head)),
                                  tr.y1, net1.tensor(cfg.backbone.weight_name(cfg.backbone.head_layer())),
                                  net1.tensor(cfg.backbone.bias_name(cfg.backbone.head_layer())),
                                  net2.tensor(cfg.backbone.weight_name(cfg.backbone.head_layer())),
                                  net2.tensor(cfg.backbone.bias_name(cfg.backbone.head_layer())), r12,
                                  ig, tr.patch_id);
            samples.push_back(std::move(s));
        }
        auto s3res = step3_train_fusion(samples, mf_cfg, cfg.train, ig);
        auto report = evaluate_independent(cfg, net1, net2, net3, s3res.inference_weights, ds.test);
        report.component_params["backbone"] = net1.total_elements() * 3;
        report.component_params["mem_rm"] = 0;
        report.component_params["meta_fm"] = s3res.meta_learner.total_elements();
        report.component_params["fusion"] =
            s3res.inference_weights.w1.size() + s3res.inference_weights.w2.size();
        report.total_params = report.component_params["backbone"] +
                              report.component_params["meta_fm"] + report.component_params["fusion"];
        rows.push_back(report);
    }

    // (c) MSN trained on the sub-training set (the provided artifacts)
    {
        auto outcome = evaluate_msn(cfg, msn, ds.test);
        outcome.report.method = "msn";
        auto ml = init_meta_learner<T>(mf_cfg, cfg.seed);  // shape reference for counting
        fill_param_counts(outcome.report, msn.meta, &msn.memrm1, &msn.memrm2, &ml,
                          msn.weights.w1.size() + msn.weights.w2.size());
        rows.push_back(outcome.report);
    }

    // (d) MSN*: steps 2-3 retrained on the training set
    {
        MsnArtifacts<T> star = msn;
        auto [m1, l1] = step2_train_memrm(ds.train, msn.meta, cfg.backbone, msn.prof1,
                                          cfg.resolution, cfg.train, ig);
        auto [m2, l2] = step2_train_memrm(ds.train, msn.meta, cfg.backbone, msn.prof2,
                                          cfg.resolution, cfg.train, ig);
        star.memrm1 = std::move(m1);
        star.memrm2 = std::move(m2);
        auto samples = prepare_fusion_samples(ds.train, star.meta, cfg.backbone, star.memrm1,
                                              star.memrm2, star.prof1, star.prof2, cfg.resolution, ig);
        auto s3res = step3_train_fusion(samples, mf_cfg, cfg.train, ig);
        star.weights = s3res.inference_weights;
        auto outcome = evaluate_msn(cfg, star, ds.test);
        outcome.report.method = "msn*";
        fill_param_counts(outcome.report, star.meta, &star.memrm1, &star.memrm2,
                          &s3res.meta_learner, star.weights.w1.size() + star.weights.w2.size());
        rows.push_back(outcome.report);
    }

    // Table-5 analogue: same fusion convolutions trained end-to-end, no meta-learner
    {
        auto samples = prepare_fusion_samples(ds.subtrain, msn.meta, cfg.backbone, msn.memrm1,
                                              msn.memrm2, msn.prof1, msn.prof2, cfg.resolution, ig);
        auto [weights, log] = train_fusion_baseline(samples, mf_cfg, cfg.train,
                                                    cfg.train.epochs_step3, ig);
        if (baseline_log) *baseline_log = log;
        MsnArtifacts<T> wo = msn;
        wo.weights = weights;
        auto outcome = evaluate_msn(cfg, wo, ds.test);
        outcome.report.method = "fusion w/o meta";
        fill_param_counts<T>(outcome.report, wo.meta, &wo.memrm1, &wo.memrm2, nullptr,
                          weights.w1.size() + weights.w2.size());
        rows.push_back(outcome.report);
    }
    return rows;
}

inline void write_report_md(const fs::path& file, const std::vector<EvalReport>& rows) {
    std::ofstream os(file);
    os << "| Method | X1 | X2 | X3 | Fusion | # Params |\n";
    os << "|---|---|---|---|---|---|\n";
    auto pct = [](double v) {
        std::ostringstream ss;
        ss.precision(1);
        ss << std::fixed << v * 100.0;
        return ss.str();
    };
    for (const auto& r : rows)
        os << "| " << r.method << " | " << pct(r.miou_x1) << " | " << pct(r.miou_x2) << " | "
           << pct(r.miou_x3) << " | " << pct(r.miou_fusion) << " | " << r.total_params << " |\n";
}

template <typename T = float>
void cmd_evaluate(const RunPaths& paths, bool ablations, bool force) {
    const auto cfg = load_run_config(paths);
    RunLock lock(paths);
    refuse_overwrite(paths.reports() / "report.json", force);
    auto a = load_artifacts<T>(paths);
    auto ml = ParameterStore<T>::load(paths.meta_learner());
    auto ds = load_dataset<T>(paths, cfg);
    fs::create_directories(paths.reports());

    auto outcome = evaluate_msn(cfg, a, ds.test, &ds.test_slides);
    fill_param_counts(outcome.report, a.meta, &a.memrm1, &a.memrm2, &ml,
                      a.weights.w1.size() + a.weights.w2.size());

    std::vector<EvalReport> rows = {outcome.report};
    TrainLog baseline_log;
    if (ablations) {
        auto ab = run_ablations(cfg, ds, a, &baseline_log);
        // ordering follows the paper's table: meta-branch, multi-branch, msn, msn*
        rows.clear();
        rows.push_back(ab[0]);
        rows.push_back(ab[1]);
        rows.push_back(ab[2]);
        rows.push_back(ab[3]);
        rows.push_back(ab[4]);
        baseline_log.save_csv(paths.reports() / "log_fusion_baseline.csv");
    }

    nlohmann::json j;
    for (const auto& r : rows) j["reports"].push_back(r.to_json());
    for (const auto& [id, v] : outcome.stitched_miou) j["stitched_miou"][std::to_string(id)] = v;
    std::ofstream(paths.reports() / "report.json") << j.dump(2) << "\n";
    write_report_md(paths.reports() / "report.md", rows);
    for (const auto& [id, map] : outcome.stitched)
        save_label_png(paths.reports() / ("pred_slide" + std::to_string(id) + ".png"), map,
                       cfg.n_classes);
}

// ---------------------------------------------------------------------------
// Plots

inline std::vector<PlotSeries> read_loss_series(const fs::path& csv) {
    std::ifstream is(csv);
    if (!is) throw PrereqError("missing training log " + csv.string());
    std::string line;
    std::getline(is, line);  // header
    std::map<std::string, std::vector<double>> by_head;
    while (std::getline(is, line)) {
        std::stringstream ss(line);
        std::string epoch, head, loss;
        std::getline(ss, epoch, ',');
        std::getline(ss, head, ',');
        std::getline(ss, loss, ',');
        by_head[head].push_back(std::stod(loss));
    }
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e"};
    std::vector<PlotSeries> out;
    int i = 0;
    for (auto& [head, ys] : by_head) out.push_back({head, colors[i++ % 4], std::move(ys)});
    return out;
}

template <typename T = float>
void cmd_plot(const RunPaths& paths, const std::string& what, bool force) {
    RunLock lock(paths);
    fs::create_directories(paths.plots());
    if (what == "gaps") {
        require_artifact(paths.gap_profile(1), "gap profiles (run analyze-gaps first)");
        const auto target = paths.plots() / "gap_scores.svg";
        refuse_overwrite(target, force);
        auto p1 = GapProfile::load(paths.gap_profile(1));
        auto p2 = GapProfile::load(paths.gap_profile(2));
        write_svg_chart(target, "Gap scores vs meta-branch (tau=" + std::to_string(p1.tau) + ")",
                        "layer index", "gap score",
                        {{"branch X1", "#d62728", p1.scores}, {"branch X2", "#ff7f0e", p2.scores}});
    } else if (what == "trend") {
        const auto target = paths.plots() / "train_trend.svg";
        refuse_overwrite(target, force);
        auto series = read_loss_series(paths.train_log(1));
        auto extra2 = fs::exists(paths.train_log(2)) ? read_loss_series(paths.train_log(2))
                                                     : std::vector<PlotSeries>{};
        for (std::size_t i = 0; i < extra2.size(); ++i) {
            extra2[i].color = i == 0 ? "#9467bd" : "#8c564b";
            series.push_back(extra2[i]);
        }
        write_svg_chart(target, "Training loss per step", "epoch", "loss", series);
    } else if (what == "fusion-trend") {
        const auto target = paths.plots() / "fusion_trend.svg";
        refuse_overwrite(target, force);
        auto series = read_loss_series(paths.train_log(3));
        series[0].name = "meta-fusion";
        const auto baseline = paths.reports() / "log_fusion_baseline.csv";
        if (fs::exists(baseline)) {
            auto b = read_loss_series(baseline);
            b[0].name = "w/o meta";
            b[0].color = "#d62728";
            series.push_back(b[0]);
        }
        write_svg_chart(target, "Fusion convergence", "epoch", "loss", series);
    } else {
        throw std::invalid_argument("cmd_plot: unknown plot kind " + what);
    }
}

}  // namespace msn
