#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "msn/pyramid.hpp"

namespace msn {

// Slide directory layout: level_<m>.png (RGB), labels_<m>.png (class indices),
// meta.json (factors, sides, seed, n_classes).

template <typename T>
void save_slide(const std::filesystem::path& dir, const PyramidImage<T>& img) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["seed"] = img.seed;
    meta["n_classes"] = img.n_classes;
    meta["factors"] = img.spec.factors;
    meta["patch_size"] = img.spec.patch_size;
    std::vector<int> sides;
    for (int li = 0; li < 3; ++li) {
        const int m = img.spec.factors[static_cast<std::size_t>(li)];
        const auto& lvl = img.levels[static_cast<std::size_t>(li)];
        const auto& lbl = img.label_levels[static_cast<std::size_t>(li)];
        const int side = lvl.dim(1);
        sides.push_back(side);
        cv::Mat rgb(side, side, CV_8UC3);
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                auto& px = rgb.at<cv::Vec3b>(y, x);
                for (int ch = 0; ch < 3; ++ch)  // BGR on disk
                    px[2 - ch] = static_cast<unsigned char>(
                        std::clamp(static_cast<double>(lvl.at(ch, y, x)) * 255.0 + 0.5, 0.0, 255.0));
            }
        cv::imwrite((dir / ("level_" + std::to_string(m) + ".png")).string(), rgb);
        cv::Mat lab(side, side, CV_8UC1);
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                lab.at<unsigned char>(y, x) = static_cast<unsigned char>(lbl.at2(y, x));
        cv::imwrite((dir / ("labels_" + std::to_string(m) + ".png")).string(), lab);
    }
    meta["sides"] = sides;
    std::ofstream os(dir / "meta.json");
    os << meta.dump(2) << "\n";
}

template <typename T>
PyramidImage<T> load_slide(const std::filesystem::path& dir) {
    std::ifstream is(dir / "meta.json");
    if (!is) throw std::runtime_error("load_slide: missing meta.json in " + dir.string());
    nlohmann::json meta = nlohmann::json::parse(is);
    PyramidImage<T> img;
    img.seed = meta.at("seed").template get<std::uint64_t>();
    img.n_classes = meta.at("n_classes").template get<int>();
    img.spec.factors = meta.at("factors").template get<std::array<int, 3>>();
    img.spec.patch_size = meta.at("patch_size").template get<int>();
    for (int li = 0; li < 3; ++li) {
        const int m = img.spec.factors[static_cast<std::size_t>(li)];
        cv::Mat rgb = cv::imread((dir / ("level_" + std::to_string(m) + ".png")).string(),
                                 cv::IMREAD_COLOR);
        cv::Mat lab = cv::imread((dir / ("labels_" + std::to_string(m) + ".png")).string(),
                                 cv::IMREAD_GRAYSCALE);
        if (rgb.empty() || lab.empty())
            throw std::runtime_error("load_slide: missing level " + std::to_string(m) + " in " +
                                     dir.string());
        const int side = rgb.rows;
        Tensor<T> lvl({3, side, side});
        LabelMap lblmap({side, side});
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x) {
                const auto& px = rgb.at<cv::Vec3b>(y, x);
                for (int ch = 0; ch < 3; ++ch)
                    lvl.at(ch, y, x) = static_cast<T>(px[2 - ch] / 255.0);
                lblmap.at2(y, x) = lab.at<unsigned char>(y, x);
            }
        img.levels.push_back(std::move(lvl));
        img.label_levels.push_back(std::move(lblmap));
    }
    return img;
}

inline void save_splits(const std::filesystem::path& file, const DatasetSplit& split) {
    nlohmann::json j;
    for (const auto& [id, s] : split.slide_assignment) j[std::to_string(id)] = s;
    std::ofstream os(file);
    os << j.dump(2) << "\n";
}

inline DatasetSplit load_splits(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw std::runtime_error("load_splits: cannot open " + file.string());
    nlohmann::json j = nlohmann::json::parse(is);
    DatasetSplit split;
    for (auto& [k, v] : j.items()) split.slide_assignment[std::stoi(k)] = v.get<std::string>();
    return split;
}

// Class-index map as grayscale PNG plus a colorized companion for eyeballing.
inline void save_label_png(const std::filesystem::path& file, const LabelMap& map, int n_classes) {
    const int h = map.dim(0), w = map.dim(1);
    cv::Mat lab(h, w, CV_8UC1), rgb(h, w, CV_8UC3);
    static const cv::Vec3b palette[] = {{60, 60, 220},  {80, 180, 80},  {200, 130, 50},
                                        {60, 200, 220}, {180, 80, 180}, {90, 90, 90},
                                        {40, 220, 160}, {150, 60, 255}};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int c = map.at2(y, x);
            lab.at<unsigned char>(y, x) = static_cast<unsigned char>(c);
            rgb.at<cv::Vec3b>(y, x) = c < n_classes ? palette[c % 8] : cv::Vec3b{0, 0, 0};
        }
    cv::imwrite(file.string(), lab);
    auto color_file = file;
    color_file.replace_extension();
    cv::imwrite(color_file.string() + "_rgb.png", rgb);
}

}  // namespace msn
