// Acceptance gate: one pass/fail line per criterion, non-zero exit on failure.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "msn/pipeline.hpp"

using namespace msn;
using namespace msn::test;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& what, bool ok, const std::string& detail = "") {
    std::printf("[%s] criterion %2d: %s%s%s\n", ok ? "PASS" : "FAIL", criterion, what.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

void guard(int criterion, const std::string& what, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(criterion, what, false, std::string("exception: ") + e.what());
    }
}

double elapsed_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// --------------------------------------------------------------------------
// 1. analytic gradients vs central finite differences, 64-bit

struct GradCheck {
    int checked = 0;
    double worst = 0.0;
    bool ok = true;

    void take(double analytic, double numeric) {
        if (std::abs(analytic) < 1e-10 && std::abs(numeric) < 1e-10) return;
        const double err = rel_err(analytic, numeric);
        worst = std::max(worst, err);
        if (err >= 1e-5) ok = false;
        ++checked;
    }
};

void criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = make_rng(901);

    // (a) backbone parameters
    GradCheck a;
    {
        BackboneConfig bb{3, 4, 2, 2};
        auto store = init_backbone_params<double>(bb, 902);
        auto x = random_tensor({3, 8, 8}, rng);
        auto y = random_labels(8, 8, 3, rng);
        auto eval = [&]() {
            Tape<double> tape;
            auto vars = BackboneVars<double>::bind(tape, store, bb);
            auto res = backbone_forward(tape, vars, bb, tape.leaf(x));
            return static_cast<double>(
                tape.value(tape.softmax_cross_entropy(res.logits, y, 3))[0]);
        };
        Tape<double> tape;
        std::map<std::string, Tape<double>::Var> bound;
        auto vars = BackboneVars<double>::bind(tape, store, bb, &bound);
        auto res = backbone_forward(tape, vars, bb, tape.leaf(x));
        tape.backward(tape.softmax_cross_entropy(res.logits, y, 3));
        const auto names = store.names();
        while (a.checked < 100 && a.ok) {
            const auto& name = names[rng() % names.size()];
            auto& t = store.tensor(name);
            const std::size_t i = rng() % t.size();
            double numeric = 0.0;
            if (!fd_smooth(eval, t[i], numeric)) continue;
            a.take(tape.grad(bound.at(name))[i], numeric);
        }
    }

    // (b) Mem-RM parameters through the non-meta branch forward
    GradCheck b;
    {
        BackboneConfig bb{3, 4, 2, 2};
        auto meta = init_backbone_params<double>(bb, 903);
        meta.freeze_all();
        GapProfile prof;
        prof.branch = 1;
        prof.gap_layers = {1, 3};
        auto memrm = init_memrm_params<double>(bb, prof, 904);
        auto x3 = random_tensor({3, 8, 8}, rng);
        auto x1 = random_tensor({3, 8, 8}, rng);
        auto y = random_labels(8, 8, 3, rng);
        auto memory = meta_forward(meta, bb, x3, {1, 3}, 0).memory;
        auto eval = [&]() {
            Tape<double> tape;
            auto res = nonmeta_forward_tape(tape, meta, bb, memrm, memory, x1, prof, 16.0, 0);
            return static_cast<double>(
                tape.value(tape.softmax_cross_entropy(res.logits, y, 3))[0]);
        };
        Tape<double> tape;
        std::map<std::string, Tape<double>::Var> bound;
        auto res = nonmeta_forward_tape(tape, meta, bb, memrm, memory, x1, prof, 16.0, 0, {},
                                        &bound);
        tape.backward(tape.softmax_cross_entropy(res.logits, y, 3));
        const auto names = memrm.names();
        while (b.checked < 100 && b.ok) {
            const auto& name = names[rng() % names.size()];
            auto& t = memrm.tensor(name);
            const std::size_t i = rng() % t.size();
            double numeric = 0.0;
            if (!fd_smooth(eval, t[i], numeric)) continue;
            b.take(tape.grad(bound.at(name))[i], numeric);
        }
    }

    // (c) meta-learner parameters through generate_weights + fuse + cross entropy
    GradCheck c;
    {
        MetaFusionConfig mf{3, 4, 8};
        auto ml = init_meta_learner<double>(mf, 905);
        auto s1 = random_tensor({3, 6, 6}, rng);
        auto s2p = random_tensor({3, 6, 6}, rng);
        auto sigma = random_tensor({mf.d_in()}, rng);
        auto y = random_labels(6, 6, 3, rng);
        auto eval = [&]() {
            auto w = generate_weights(ml, mf, SigmaVector<double>{sigma, 0});
            return cross_entropy(fuse(s1, s2p, w, mf), y, 3);
        };
        Tape<double> tape;
        auto fc1w = tape.param(ml.tensor("fc1.weight"));
        auto fc1b = tape.param(ml.tensor("fc1.bias"));
        auto fc2w = tape.param(ml.tensor("fc2.weight"));
        auto fc2b = tape.param(ml.tensor("fc2.bias"));
        auto [w1, w2] = generate_weights_tape(tape, mf, fc1w, fc1b, fc2w, fc2b, tape.leaf(sigma));
        auto fused = fuse_tape(tape, mf, tape.leaf(s1), tape.leaf(s2p), w1, w2);
        tape.backward(tape.softmax_cross_entropy(fused, y, 3));
        std::map<std::string, Tape<double>::Var> bound = {
            {"fc1.weight", fc1w}, {"fc1.bias", fc1b}, {"fc2.weight", fc2w}, {"fc2.bias", fc2b}};
        const auto names = ml.names();
        while (c.checked < 100 && c.ok) {
            const auto& name = names[rng() % names.size()];
            auto& t = ml.tensor(name);
            const std::size_t i = rng() % t.size();
            double numeric = 0.0;
            if (!fd_smooth(eval, t[i], numeric)) continue;
            c.take(tape.grad(bound.at(name))[i], numeric);
        }
    }

    const double secs = elapsed_since(t0);
    const bool ok = a.ok && b.ok && c.ok && secs < 120.0;
    report(1, "gradient correctness (backbone, Mem-RM, Meta-FM)", ok,
           "worst rel err " + fmt(std::max({a.worst, b.worst, c.worst})) + ", " + fmt(secs) + "s");
}

// --------------------------------------------------------------------------
// 2. sigma fidelity and descent direction

void criterion2() {
    Rng rng = make_rng(910);
    BackboneConfig bb{3, 4, 1, 1};
    auto net = init_backbone_params<double>(bb, 911);
    auto f1 = random_tensor({4, 8, 8}, rng);
    auto f2 = random_tensor({4, 8, 8}, rng);
    auto y1 = random_labels(8, 8, 3, rng);
    const auto& hw = net.tensor(bb.weight_name(bb.head_layer()));
    const auto& hb = net.tensor(bb.bias_name(bb.head_layer()));

    auto loss_at = [&](const Tensor<double>& w1, const Tensor<double>& w2) {
        Tape<double> tape;
        auto s1 = tape.conv2d(tape.leaf(f1), tape.leaf(w1), tape.leaf(hb));
        auto s2 = tape.conv2d(tape.leaf(f2), tape.leaf(w2), tape.leaf(hb));
        auto s2p = align_to_x1(tape, s2, 4.0);
        auto l = tape.add(tape.softmax_cross_entropy(s1, y1, 3),
                          tape.softmax_cross_entropy(s2p, y1, 3));
        return static_cast<double>(tape.value(l)[0]);
    };

    auto sigma = build_sigma(f1, f2, y1, hw, hb, hw, hb, 4.0, 3);
    auto w1 = hw, w2 = hw;

    bool fidelity = true;
    double worst = 0.0;
    for (std::size_t i = 0; i < hw.size(); ++i) {
        const double n1 = -fd([&]() { return loss_at(w1, w2); }, w1[i], 1e-3);
        const double n2 = -fd([&]() { return loss_at(w1, w2); }, w2[i], 1e-3);
        for (auto [analytic, numeric] :
             {std::pair{static_cast<double>(sigma.values[i]), n1},
              std::pair{static_cast<double>(sigma.values[hw.size() + i]), n2}}) {
            if (std::abs(analytic) < 1e-10 && std::abs(numeric) < 1e-10) continue;
            const double err = rel_err(analytic, numeric);
            worst = std::max(worst, err);
            if (err >= 1e-5) fidelity = false;
        }
    }

    const double base = loss_at(w1, w2);
    auto p1 = w1, p2 = w2;
    for (std::size_t i = 0; i < p1.size(); ++i) {
        p1[i] += 1e-4 * sigma.values[i];
        p2[i] += 1e-4 * sigma.values[p1.size() + i];
    }
    const double stepped = loss_at(p1, p2);
    const bool descent = stepped < base;
    report(2, "sigma equals the negative loss gradient and is a descent direction",
           fidelity && descent,
           "worst rel err " + fmt(worst) + ", loss " + fmt(base) + " -> " + fmt(stepped));
}

// --------------------------------------------------------------------------
// 3. dimension exactness

void criterion3() {
    bool ok = true;
    std::string detail;
    for (int nc : {2, 3, 4, 8}) {
        MetaFusionConfig mf{nc, 4, 8};
        const int expect = 9 * (2 * nc) * nc + 9 * nc * nc;
        if (mf.d_out() != expect) {
            ok = false;
            detail = "d_out mismatch at n_classes=" + std::to_string(nc);
        }
    }

    Rng rng = make_rng(920);
    int cases = 0;
    for (int it = 0; it < 50 && ok; ++it) {
        const int e = 1 + static_cast<int>(rng() % 3);
        const int base = 2 + static_cast<int>(rng() % 4);
        const int nc = 2 + static_cast<int>(rng() % 3);
        const int side = (1 << e) * (1 + static_cast<int>(rng() % 2));
        BackboneConfig bb{nc, base, e, e};
        GapProfile prof;
        prof.branch = 1 + static_cast<int>(rng() % 2);
        for (int l = 0; l < bb.num_layers() - 1; ++l)
            if (rng() % 2) prof.gap_layers.push_back(l);
        if (prof.gap_layers.empty()) prof.gap_layers.push_back(0);
        auto meta = init_backbone_params<double>(bb, rng());
        meta.freeze_all();
        auto memrm = init_memrm_params<double>(bb, prof, rng());
        std::set<int> gaps(prof.gap_layers.begin(), prof.gap_layers.end());
        auto x3 = random_tensor({3, side, side}, rng);
        auto xk = random_tensor({3, side, side}, rng);
        auto memory = meta_forward(meta, bb, x3, gaps, it).memory;
        auto out = nonmeta_forward(meta, bb, memrm, memory, xk, prof,
                                   prof.branch == 1 ? 16.0 : 4.0, it);
        if (out.shape() != std::vector<int>{nc, side, side}) ok = false;
        cases += static_cast<int>(prof.gap_layers.size());
    }
    // top up the per-layer case count past 200
    while (cases < 200 && ok) {
        const int c = 2 + static_cast<int>(rng() % 8);
        const int h = 4 + static_cast<int>(rng() % 13);
        const int w = 4 + static_cast<int>(rng() % 13);
        Tape<double> tape;
        auto a = tape.leaf(random_tensor({c, h, w}, rng));
        auto b = tape.leaf(random_tensor({c, h, w}, rng));
        auto wa = tape.leaf(random_tensor({c, 2 * c, 3, 3}, rng));
        auto wb = tape.leaf(random_tensor({c, c, 3, 3}, rng));
        auto ba = tape.leaf(random_tensor({c}, rng));
        auto bb2 = tape.leaf(random_tensor({c}, rng));
        auto out = mem_rm(tape, a, b, 2.0 + (rng() % 15), wa, ba, wb, bb2);
        if (tape.value(out).shape() != std::vector<int>{c, h, w}) ok = false;
        ++cases;
    }
    report(3, "Meta-FM output length and Mem-RM shape preservation", ok,
           detail.empty() ? std::to_string(cases) + " randomized cases" : detail);
}

// --------------------------------------------------------------------------
// 5. mIoU vs brute force

void criterion5() {
    Rng rng = make_rng(930);
    bool ok = true;
    for (int it = 0; it < 100 && ok; ++it) {
        const int nc = 2 + static_cast<int>(rng() % 5);
        const int h = 3 + static_cast<int>(rng() % 6);
        const int w = 3 + static_cast<int>(rng() % 6);
        auto pred = random_labels(h, w, nc, rng);
        auto truth = random_labels(h, w, nc, rng, 0.2, nc);
        auto fast = miou(pred, truth, nc, nc);
        double sum = 0.0;
        int n = 0;
        std::map<int, double> per;
        for (int c = 0; c < nc; ++c) {
            long long inter = 0, uni = 0;
            for (std::size_t i = 0; i < pred.size(); ++i) {
                if (truth[i] == nc) continue;
                const bool p = pred[i] == c, t = truth[i] == c;
                inter += p && t;
                uni += p || t;
            }
            if (uni == 0) continue;
            per[c] = static_cast<double>(inter) / static_cast<double>(uni);
            sum += per[c];
            ++n;
        }
        const double slow = n ? sum / n : 0.0;
        if (std::abs(fast.miou - slow) > 1e-12 || fast.per_class.size() != per.size()) ok = false;
        for (const auto& [c, v] : per)
            if (std::abs(fast.per_class.at(c) - v) > 1e-12) ok = false;
    }
    report(5, "mIoU agrees exactly with a brute-force confusion counter", ok, "100 random maps");
}

// --------------------------------------------------------------------------
// 6. patch round trip

void criterion6() {
    ResolutionSpec spec{{16, 4, 1}, 64};
    bool ok = true;
    for (std::uint64_t seed : {11ull, 12ull, 13ull}) {
        auto img = generate_virtual_slide<float>(seed, 256, 4, spec);
        auto [triples, geom] = extract_triples(img, spec);
        std::vector<std::pair<int, Tensor<float>>> preds;
        for (const auto& t : triples) {
            Tensor<float> onehot({geom.n_classes, spec.patch_size, spec.patch_size});
            for (int y = 0; y < spec.patch_size; ++y)
                for (int x = 0; x < spec.patch_size; ++x)
                    onehot.at(t.y1.at2(y, x), y, x) = 1.0f;
            preds.emplace_back(t.patch_id, std::move(onehot));
        }
        auto stitched = stitch(preds, geom);
        const auto& truth = img.label_levels[0];
        for (std::size_t i = 0; i < stitched.size(); ++i)
            if (stitched[i] != truth[i]) ok = false;
    }
    report(6, "one-hot ground-truth tiles stitch back to the base label map", ok, "3 seeds");
}

// --------------------------------------------------------------------------
// 4 and 7-10: the desk-scale run

void desk_criteria() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto cfg = RunConfig::load(MSN_DESK_CONFIG);
    RunPaths paths{fs::temp_directory_path() /
                   ("msn_accept_" + std::to_string(std::random_device{}()))};

    cmd_gen_data<float>(cfg, paths.root, false);
    cmd_train<float>(paths, 1, false, false);
    const auto meta_sum = ParameterStore<float>::load(paths.checkpoints(1)).full_checksum();
    cmd_analyze_gaps<float>(paths, false);
    cmd_train<float>(paths, 2, false, false);
    const auto after2 = ParameterStore<float>::load(paths.checkpoints(1)).full_checksum();
    cmd_train<float>(paths, 3, false, false);
    const auto after3 = ParameterStore<float>::load(paths.checkpoints(1)).full_checksum();

    report(4, "meta-branch checkpoint is bit-identical after steps 2 and 3",
           after2 == meta_sum && after3 == meta_sum);

    auto a = load_artifacts<float>(paths);
    auto ds = load_dataset<float>(paths, cfg);
    auto outcome = evaluate_msn(cfg, a, ds.test);

    // 7: Mem-RM branches vs the frozen meta-branch applied raw to X1
    ConfusionAccumulator raw1(cfg.n_classes, cfg.ignore_label());
    for (const auto& tr : ds.test)
        raw1.add(argmax_map(backbone_infer(a.meta, cfg.backbone, tr.x1)), tr.y1);
    const double raw_x1 = raw1.result().miou;
    const double secs = elapsed_since(t0);
    report(7, "step-2 X1 branch beats the raw meta-branch on X1 by >= 5 points",
           outcome.report.miou_x1 - raw_x1 >= 0.05 && secs < 900.0,
           fmt(outcome.report.miou_x1 * 100) + " vs " + fmt(raw_x1 * 100) + " mIoU, " +
               fmt(secs) + "s");

    // 8: fusion vs best single branch
    const double best_single = std::max(
        {outcome.report.miou_x1, outcome.report.miou_x2, outcome.report.miou_x3});
    report(8, "fusion mIoU >= best single branch - 0.5 points",
           outcome.report.miou_fusion >= best_single - 0.005,
           fmt(outcome.report.miou_fusion * 100) + " vs best " + fmt(best_single * 100));

    // 9: meta-fusion epoch 1 vs end-to-end fusion epoch 5, same data and seed
    {
        auto step3_series = read_loss_series(paths.train_log(3));
        const double meta_epoch1 = step3_series.at(0).y.at(0);
        auto samples = prepare_fusion_samples(ds.subtrain, a.meta, cfg.backbone, a.memrm1,
                                              a.memrm2, a.prof1, a.prof2, cfg.resolution,
                                              cfg.ignore_label());
        auto [bw, blog] = train_fusion_baseline(samples, cfg.fusion_config(), cfg.train, 5,
                                                cfg.ignore_label());
        const double baseline_epoch5 = blog.rows.at(4).loss;
        report(9, "meta-fusion after 1 epoch <= end-to-end fusion after 5 epochs",
               meta_epoch1 <= baseline_epoch5,
               fmt(meta_epoch1) + " vs " + fmt(baseline_epoch5));
    }

    // 10: trainable-parameter ratios
    {
        auto ml = ParameterStore<float>::load(paths.meta_learner());
        const std::size_t backbone = a.meta.total_elements();
        const std::size_t msn_total = backbone + a.memrm1.total_elements() +
                                      a.memrm2.total_elements() + ml.total_elements();
        const double ratio = static_cast<double>(msn_total) / static_cast<double>(backbone);
        const double independent = static_cast<double>(3 * backbone) / static_cast<double>(backbone);
        report(10, "MSN < 1.35 x single backbone; independent branches exactly 3.0 x",
               ratio < 1.35 && independent == 3.0,
               fmt(ratio) + " x (" + std::to_string(msn_total) + " / " +
                   std::to_string(backbone) + ")");
    }

    fs::remove_all(paths.root);
}

}  // namespace

int main() {
    guard(1, "gradient correctness (backbone, Mem-RM, Meta-FM)", criterion1);
    guard(2, "sigma equals the negative loss gradient and is a descent direction", criterion2);
    guard(3, "Meta-FM output length and Mem-RM shape preservation", criterion3);
    guard(5, "mIoU agrees exactly with a brute-force confusion counter", criterion5);
    guard(6, "one-hot ground-truth tiles stitch back to the base label map", criterion6);
    guard(7, "desk-scale pipeline criteria (4, 7-10)", desk_criteria);
    std::printf("%d criterion failure(s)\n", g_failures);
    return g_failures == 0 ? 0 : 1;
}
