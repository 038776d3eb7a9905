#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "diffaug/backbone.hpp"
#include "diffaug/classifiers.hpp"
#include "diffaug/dataset.hpp"
#include "diffaug/image_io.hpp"
#include "diffaug/random.hpp"

namespace testutil {

// Fresh scratch directory under the system temp root.
inline std::string tmp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / "diffaug_tests" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

inline diffaug::BackboneConfig tiny_backbone(int classes = 3, int size = 8) {
    diffaug::BackboneConfig cfg;
    cfg.image_size = size;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.blocks_per_level = 1;
    cfg.embedding_dim = 8;
    cfg.se_reduction = 2;
    cfg.attention_heads = 2;
    cfg.class_count = classes;
    cfg.dropout = 0.0;
    cfg.norm_groups = 2;
    cfg.attention_resolutions = {4};
    return cfg;
}

inline diffaug::GuidanceConfig tiny_guidance(int classes = 3, int size = 8) {
    diffaug::GuidanceConfig cfg;
    cfg.image_size = size;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1, 2};
    cfg.blocks_per_level = 1;
    cfg.embedding_dim = 8;
    cfg.se_reduction = 2;
    cfg.class_count = classes;
    cfg.dropout = 0.0;
    cfg.norm_groups = 2;
    return cfg;
}

// d loss / d cell by central differences; restores the cell.
inline double central_diff(const std::function<double()>& eval, double* cell, double h = 1e-5) {
    const double orig = *cell;
    *cell = orig + h;
    const double up = eval();
    *cell = orig - h;
    const double down = eval();
    *cell = orig;
    return (up - down) / (2.0 * h);
}

inline double rel_err(double a, double b) {
    const double scale = std::max({1e-12, std::abs(a), std::abs(b)});
    return std::abs(a - b) / scale;
}

// Writes a small PNG dataset whose classes are bright horizontal bands at
// class-dependent rows, split round-robin (3 train : 1 val : 1 test per 5).
// Returns the manifest path.
inline std::string tiny_dataset(const std::string& name, int classes, int per_class, int size) {
    const std::string dir = tmp_dir(name);
    diffaug::DatasetManifest m;
    m.class_count = classes;
    m.image_size = size;
    for (int c = 0; c < classes; ++c) {
        for (int i = 0; i < per_class; ++i) {
            diffaug::Tensor img({1, size, size});
            diffaug::Rng rng(static_cast<uint64_t>(c) * 1000 + static_cast<uint64_t>(i));
            for (int64_t j = 0; j < img.size(); ++j) img[j] = -1.0 + 0.2 * rng.uniform();
            for (int x = 0; x < size; ++x) img[static_cast<int64_t>(2 * c % size) * size + x] = 1.0;
            const std::string file = "img_" + std::to_string(c) + "_" + std::to_string(i) + ".png";
            diffaug::write_grayscale_png(dir + "/" + file, img);
            diffaug::ImageRecord rec;
            rec.path = file;
            rec.label = c;
            rec.split = i % 5 == 3   ? diffaug::Split::val
                        : i % 5 == 4 ? diffaug::Split::test
                                     : diffaug::Split::train;
            m.records.push_back(std::move(rec));
        }
    }
    const std::string manifest = dir + "/manifest.csv";
    diffaug::save_manifest(m, manifest);
    return manifest;
}

}  // namespace testutil
