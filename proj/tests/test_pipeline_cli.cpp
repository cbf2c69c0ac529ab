#include <catch_amalgamated.hpp>

#include <cstdlib>

#include "helpers.hpp"
#include "msn/pipeline.hpp"

using namespace msn;
using namespace msn::test;
namespace fs = std::filesystem;

namespace {

RunConfig micro_config() {
    RunConfig cfg;
    cfg.seed = 5;
    cfg.base_side = 128;
    cfg.n_slides = 4;
    cfg.n_classes = 3;
    cfg.resolution = ResolutionSpec{{16, 4, 1}, 32};
    cfg.split_sizes = {2, 1, 1};
    cfg.backbone = BackboneConfig{3, 4, 2, 2};
    cfg.gap_tau = 50.0;  // fallback path: exactly two gap layers per branch
    cfg.meta_hidden = 8;
    cfg.train = TrainConfig{2, 1, 2, 8, 1e-3, cfg.seed};
    return cfg;
}

struct TempRun {
    RunPaths paths;
    TempRun() : paths{fs::temp_directory_path() / ("msn_run_" + std::to_string(std::rand()))} {}
    ~TempRun() { fs::remove_all(paths.root); }
};

std::uint64_t file_checksum(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::uint64_t h = 1469598103934665603ull;
    char c;
    while (is.get(c)) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    return h;
}

}  // namespace

TEST_CASE("run config JSON round trip and validation") {
    auto cfg = micro_config();
    auto back = RunConfig::from_json(cfg.to_json());
    REQUIRE(back.to_json() == cfg.to_json());
    REQUIRE(back.train.seed == cfg.seed);
    REQUIRE(back.backbone.n_classes == cfg.n_classes);

    SECTION("bad splits rejected") {
        cfg.split_sizes = {2, 1, 2};
        REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
    SECTION("patch size must fit the encoder") {
        cfg.resolution.patch_size = 30;
        REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    }
}

TEST_CASE("gen-data writes slides, splits and the config") {
    TempRun run;
    auto cfg = micro_config();
    cmd_gen_data(cfg, run.paths.root, false);
    REQUIRE(fs::exists(run.paths.config()));
    REQUIRE(fs::exists(run.paths.splits()));
    for (int id = 0; id < cfg.n_slides; ++id)
        REQUIRE(fs::exists(run.paths.slide(id) / "level_16.png"));
    REQUIRE(!fs::exists(run.paths.lock()));  // released on exit

    SECTION("refuses to overwrite without force") {
        REQUIRE_THROWS_WITH(cmd_gen_data(cfg, run.paths.root, false),
                            Catch::Matchers::ContainsSubstring("--force"));
        cmd_gen_data(cfg, run.paths.root, true);
    }

    SECTION("same seed reproduces identical slide files") {
        TempRun other;
        cmd_gen_data(cfg, other.paths.root, false);
        for (int id = 0; id < cfg.n_slides; ++id)
            REQUIRE(file_checksum(run.paths.slide(id) / "level_0.png") ==
                    file_checksum(other.paths.slide(id) / "level_0.png"));
    }

    SECTION("dataset loads with unique offset patch ids") {
        auto ds = load_dataset<float>(run.paths, cfg);
        REQUIRE(ds.train.size() == 2 * 16);
        REQUIRE(ds.subtrain.size() == 16);
        REQUIRE(ds.test.size() == 16);
        REQUIRE(ds.test_slides.size() == 1);
        std::set<int> ids;
        for (const auto& t : ds.train) ids.insert(t.patch_id);
        REQUIRE(ids.size() == ds.train.size());
        // offsets encode the slide id
        REQUIRE(ds.test.front().patch_id / 1000000 == ds.test_slides.front().id);
    }
}

TEST_CASE("stale lockfile blocks a subcommand") {
    TempRun run;
    fs::create_directories(run.paths.root);
    std::ofstream(run.paths.lock()) << "locked\n";
    REQUIRE_THROWS_WITH(cmd_gen_data(micro_config(), run.paths.root, false),
                        Catch::Matchers::ContainsSubstring("locked"));
}

TEST_CASE("pipeline stages require their prerequisites") {
    TempRun run;
    SECTION("everything needs the config") {
        REQUIRE_THROWS_AS(cmd_train(run.paths, 1, false, false), PrereqError);
        REQUIRE_THROWS_AS(cmd_analyze_gaps(run.paths, false), PrereqError);
        REQUIRE_THROWS_AS(cmd_evaluate(run.paths, false, false), PrereqError);
    }
    SECTION("later steps name the missing artifact") {
        cmd_gen_data(micro_config(), run.paths.root, false);
        REQUIRE_THROWS_WITH(cmd_train(run.paths, 2, false, false),
                            Catch::Matchers::ContainsSubstring("meta checkpoint"));
        REQUIRE_THROWS_WITH(cmd_analyze_gaps(run.paths, false),
                            Catch::Matchers::ContainsSubstring("meta checkpoint"));
        REQUIRE_THROWS_AS(cmd_train(run.paths, 4, false, false), std::invalid_argument);
    }
}

TEST_CASE("micro pipeline end to end") {
    TempRun run;
    auto cfg = micro_config();
    cmd_gen_data(cfg, run.paths.root, false);
    cmd_train(run.paths, 1, false, false);
    REQUIRE(fs::exists(run.paths.checkpoints(1) / "manifest.json"));
    REQUIRE(fs::exists(run.paths.train_log(1)));

    cmd_analyze_gaps(run.paths, false);
    for (int b : {1, 2}) {
        auto p = GapProfile::load(run.paths.gap_profile(b));
        REQUIRE(p.branch == b);
        REQUIRE(p.gap_layers.size() == 2);  // tau=50 forces the fallback
    }
    REQUIRE(fs::exists(run.paths.plots() / "gaps.svg"));

    cmd_train(run.paths, 2, false, false);
    REQUIRE(fs::exists(run.paths.memrm(1) / "manifest.json"));
    REQUIRE(fs::exists(run.paths.memrm(2) / "manifest.json"));
    // the frozen meta checkpoint is untouched by step 2
    const auto meta_before = ParameterStore<float>::load(run.paths.checkpoints(1)).full_checksum();

    cmd_train(run.paths, 3, false, false);
    REQUIRE(fs::exists(run.paths.meta_learner() / "manifest.json"));
    auto fusion = ParameterStore<float>::load(run.paths.fusion());
    REQUIRE(fusion.tensor("fusion.w1").shape() == std::vector<int>{3, 6, 3, 3});
    REQUIRE(fusion.tensor("fusion.w2").shape() == std::vector<int>{3, 3, 3, 3});
    REQUIRE(ParameterStore<float>::load(run.paths.checkpoints(1)).full_checksum() == meta_before);

    cmd_evaluate(run.paths, false, false);
    REQUIRE(fs::exists(run.paths.reports() / "report.json"));
    REQUIRE(fs::exists(run.paths.reports() / "report.md"));
    std::ifstream is(run.paths.reports() / "report.json");
    auto j = nlohmann::json::parse(is);
    REQUIRE(j["reports"].size() == 1);
    const auto& r = j["reports"][0];
    REQUIRE(r["method"] == "msn");
    REQUIRE(r["total_params"].get<std::size_t>() > 0);
    REQUIRE(j["stitched_miou"].size() == 1);
    int pred_count = 0;
    for (const auto& e : fs::directory_iterator(run.paths.reports()))
        if (e.path().filename().string().rfind("pred_slide", 0) == 0) ++pred_count;
    REQUIRE(pred_count >= 1);

    SECTION("plots render from the logs") {
        cmd_plot(run.paths, "gaps", false);
        cmd_plot(run.paths, "trend", false);
        cmd_plot(run.paths, "fusion-trend", false);
        REQUIRE(fs::exists(run.paths.plots() / "gap_scores.svg"));
        REQUIRE(fs::exists(run.paths.plots() / "train_trend.svg"));
        REQUIRE(fs::exists(run.paths.plots() / "fusion_trend.svg"));
        REQUIRE_THROWS_AS(cmd_plot(run.paths, "nonsense", false), std::invalid_argument);
    }

    SECTION("re-running a stage without force fails, with force succeeds") {
        REQUIRE_THROWS_WITH(cmd_train(run.paths, 1, false, false),
                            Catch::Matchers::ContainsSubstring("--force"));
        REQUIRE_THROWS_WITH(cmd_evaluate(run.paths, false, false),
                            Catch::Matchers::ContainsSubstring("--force"));
        cmd_evaluate(run.paths, false, true);
    }
}

TEST_CASE("cli binary maps errors to the exit-code contract") {
    const char* bin_env = std::getenv("MSN_CLI");
    if (!bin_env) SKIP("MSN_CLI not set");
    const std::string bin = bin_env;
    TempRun run;
    const std::string root = run.paths.root.string();
    auto sh = [](const std::string& cmd) {
        const int rc = std::system((cmd + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(rc);
    };
    // missing prerequisite: exit 1
    REQUIRE(sh(bin + " train --step 2 --run " + root) == 1);
    // invalid config: exit 2
    const auto bad = fs::temp_directory_path() / "msn_bad_cfg.json";
    auto j = micro_config().to_json();
    j["data"]["split"] = {1, 1, 1};
    std::ofstream(bad) << j.dump();
    REQUIRE(sh(bin + " gen-data --config " + bad.string() + " --out " + root) == 2);
    fs::remove(bad);
    // success: exit 0
    const auto good = fs::temp_directory_path() / "msn_good_cfg.json";
    std::ofstream(good) << micro_config().to_json().dump();
    REQUIRE(sh(bin + " gen-data --config " + good.string() + " --out " + root) == 0);
    // overwrite refusal also reports failure
    REQUIRE(sh(bin + " gen-data --config " + good.string() + " --out " + root) != 0);
    fs::remove(good);
}
