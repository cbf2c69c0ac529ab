#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "msn/backbone.hpp"
#include "msn/meta_fusion.hpp"
#include "msn/pyramid.hpp"
#include "msn/training.hpp"

namespace msn {

// Everything one run needs; serialized verbatim into the run directory.
struct RunConfig {
    std::uint64_t seed = 0;

    // data
    int base_side = 512;
    int n_slides = 10;
    int n_classes = 4;
    ResolutionSpec resolution{{16, 4, 1}, 64};
    std::array<int, 3> split_sizes = {7, 1, 2};  // train / subtrain / test

    // model
    BackboneConfig backbone{4, 8, 4, 4};
    double gap_tau = 0.5;
    int meta_hidden = 16;

    TrainConfig train{};

    int ignore_label() const { return n_classes; }

    MetaFusionConfig fusion_config() const {
        return MetaFusionConfig{n_classes, backbone.base_channels, meta_hidden};
    }

    void validate() const {
        resolution.validate();
        backbone.validate();
        train.validate();
        if (backbone.n_classes != n_classes)
            throw std::invalid_argument("RunConfig: backbone.n_classes must match data n_classes");
        if (n_slides < 3 || split_sizes[0] + split_sizes[1] + split_sizes[2] != n_slides)
            throw std::invalid_argument("RunConfig: split sizes must sum to n_slides");
        if (base_side % (resolution.factors[0] / resolution.factors[2]) != 0)
            throw std::invalid_argument("RunConfig: base_side must be divisible by m1/m3");
        if (resolution.patch_size % (1 << backbone.encoder_blocks) != 0)
            throw std::invalid_argument("RunConfig: patch_size must be divisible by 2^encoder_blocks");
        if (gap_tau < 0.0) throw std::invalid_argument("RunConfig: gap_tau must be >= 0");
        if (meta_hidden < 1) throw std::invalid_argument("RunConfig: meta_hidden must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"seed", seed},
                {"data",
                 {{"base_side", base_side},
                  {"n_slides", n_slides},
                  {"n_classes", n_classes},
                  {"factors", resolution.factors},
                  {"patch_size", resolution.patch_size},
                  {"split", split_sizes}}},
                {"backbone",
                 {{"base_channels", backbone.base_channels},
                  {"encoder_blocks", backbone.encoder_blocks}}},
                {"gap_tau", gap_tau},
                {"meta_hidden", meta_hidden},
                {"train",
                 {{"epochs_step1", train.epochs_step1},
                  {"epochs_step2", train.epochs_step2},
                  {"epochs_step3", train.epochs_step3},
                  {"batch_size", train.batch_size},
                  {"backbone_batch_size", train.backbone_batch_size},
                  {"learning_rate", train.learning_rate},
                  {"fusion_learning_rate", train.fusion_learning_rate}}}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        RunConfig c;
        c.seed = j.value("seed", std::uint64_t{0});
        const auto& d = j.at("data");
        c.base_side = d.at("base_side").get<int>();
        c.n_slides = d.at("n_slides").get<int>();
        c.n_classes = d.at("n_classes").get<int>();
        c.resolution.factors = d.at("factors").get<std::array<int, 3>>();
        c.resolution.patch_size = d.at("patch_size").get<int>();
        c.split_sizes = d.at("split").get<std::array<int, 3>>();
        const auto& b = j.at("backbone");
        c.backbone.base_channels = b.at("base_channels").get<int>();
        c.backbone.encoder_blocks = b.at("encoder_blocks").get<int>();
        c.backbone.decoder_blocks = c.backbone.encoder_blocks;
        c.backbone.n_classes = c.n_classes;
        c.gap_tau = j.value("gap_tau", 0.5);
        c.meta_hidden = j.value("meta_hidden", 256);
        const auto& t = j.at("train");
        c.train.epochs_step1 = t.value("epochs_step1", 30);
        c.train.epochs_step2 = t.value("epochs_step2", 10);
        c.train.epochs_step3 = t.value("epochs_step3", 10);
        c.train.batch_size = t.value("batch_size", 32);
        c.train.backbone_batch_size = t.value("backbone_batch_size", 0);
        c.train.learning_rate = t.value("learning_rate", 1e-4);
    c.train.fusion_learning_rate = t.value("fusion_learning_rate", 0.0);
        c.train.seed = c.seed;
        c.validate();
        return c;
    }

    static RunConfig load(const std::filesystem::path& file) {
        std::ifstream is(file);
        if (!is) throw std::runtime_error("RunConfig: cannot open " + file.string());
        return from_json(nlohmann::json::parse(is));
    }

    void save(const std::filesystem::path& file) const {
        std::ofstream os(file);
        os << to_json().dump(2) << "\n";
    }
};

}  // namespace msn
