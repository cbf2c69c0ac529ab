#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "msn/pipeline.hpp"

namespace {

int run(int argc, char** argv) {
    CLI::App app{"Meta segmentation network pipeline"};
    app.require_subcommand(1);

    std::string config_file, out_dir, run_dir, what;
    int step = 0;
    bool force = false, use_train_split = false, ablations = false;

    auto* gen = app.add_subcommand("gen-data", "Generate virtual slides and splits");
    gen->add_option("--config", config_file, "Run config JSON")->required();
    gen->add_option("--out", out_dir, "Run directory to create")->required();
    gen->add_flag("--force", force, "Overwrite existing artifacts");

    auto* gaps = app.add_subcommand("analyze-gaps", "Detect gap layers against the meta-branch");
    gaps->add_option("--run", run_dir, "Run directory")->required();
    gaps->add_flag("--force", force, "Overwrite existing artifacts");

    auto* train = app.add_subcommand("train", "Run one training step");
    train->add_option("--step", step, "Training step (1, 2 or 3)")->required();
    train->add_option("--run", run_dir, "Run directory")->required();
    train->add_flag("--use-train-split", use_train_split, "Tune steps 2/3 on the training split");
    train->add_flag("--force", force, "Overwrite existing artifacts");

    auto* eval = app.add_subcommand("evaluate", "Evaluate on the test split");
    eval->add_option("--run", run_dir, "Run directory")->required();
    eval->add_flag("--ablations", ablations, "Also run the ablation table rows");
    eval->add_flag("--force", force, "Overwrite existing artifacts");

    auto* plot = app.add_subcommand("plot", "Emit a figure as SVG");
    plot->add_option("--run", run_dir, "Run directory")->required();
    plot->add_option("--what", what, "gaps | trend | fusion-trend")->required();
    plot->add_flag("--force", force, "Overwrite existing artifacts");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        msn::cmd_gen_data(msn::RunConfig::load(config_file), out_dir, force);
    } else if (gaps->parsed()) {
        msn::cmd_analyze_gaps(msn::RunPaths{run_dir}, force);
    } else if (train->parsed()) {
        if (step < 1 || step > 3) throw std::invalid_argument("train: --step must be 1, 2 or 3");
        msn::cmd_train(msn::RunPaths{run_dir}, step, use_train_split, force);
    } else if (eval->parsed()) {
        msn::cmd_evaluate(msn::RunPaths{run_dir}, ablations, force);
    } else if (plot->parsed()) {
        msn::cmd_plot(msn::RunPaths{run_dir}, what, force);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const msn::PrereqError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
