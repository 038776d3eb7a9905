#include "diffaug/toy_glyphs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "diffaug/errors.hpp"
#include "diffaug/image_io.hpp"
#include "diffaug/random.hpp"

namespace diffaug {

namespace {

struct Segment {
    double x1, y1, x2, y2;  // normalized [0,1] glyph-box coordinates
};

// Letter-like stroke templates, visually distinct by construction.
const std::vector<std::vector<Segment>>& templates() {
    static const std::vector<std::vector<Segment>> all = {
        // T
        {{0.2, 0.2, 0.8, 0.2}, {0.5, 0.2, 0.5, 0.8}},
        // L
        {{0.3, 0.2, 0.3, 0.8}, {0.3, 0.8, 0.8, 0.8}},
        // X
        {{0.2, 0.2, 0.8, 0.8}, {0.8, 0.2, 0.2, 0.8}},
        // O (diamond loop)
        {{0.5, 0.15, 0.85, 0.5}, {0.85, 0.5, 0.5, 0.85}, {0.5, 0.85, 0.15, 0.5}, {0.15, 0.5, 0.5, 0.15}},
        // Z
        {{0.2, 0.2, 0.8, 0.2}, {0.8, 0.2, 0.2, 0.8}, {0.2, 0.8, 0.8, 0.8}},
        // H
        {{0.25, 0.2, 0.25, 0.8}, {0.75, 0.2, 0.75, 0.8}, {0.25, 0.5, 0.75, 0.5}},
        // V
        {{0.2, 0.2, 0.5, 0.8}, {0.8, 0.2, 0.5, 0.8}},
        // +
        {{0.5, 0.15, 0.5, 0.85}, {0.15, 0.5, 0.85, 0.5}},
        // N
        {{0.25, 0.8, 0.25, 0.2}, {0.25, 0.2, 0.75, 0.8}, {0.75, 0.8, 0.75, 0.2}},
        // C
        {{0.75, 0.25, 0.3, 0.25}, {0.3, 0.25, 0.3, 0.75}, {0.3, 0.75, 0.75, 0.75}},
        // U
        {{0.25, 0.2, 0.25, 0.7}, {0.25, 0.7, 0.5, 0.85}, {0.5, 0.85, 0.75, 0.7}, {0.75, 0.7, 0.75, 0.2}},
        // F
        {{0.3, 0.2, 0.3, 0.8}, {0.3, 0.2, 0.8, 0.2}, {0.3, 0.5, 0.7, 0.5}},
        // Y
        {{0.2, 0.2, 0.5, 0.5}, {0.8, 0.2, 0.5, 0.5}, {0.5, 0.5, 0.5, 0.85}},
        // E
        {{0.3, 0.2, 0.3, 0.8}, {0.3, 0.2, 0.8, 0.2}, {0.3, 0.5, 0.7, 0.5}, {0.3, 0.8, 0.8, 0.8}},
        // A
        {{0.2, 0.8, 0.5, 0.15}, {0.5, 0.15, 0.8, 0.8}, {0.33, 0.55, 0.67, 0.55}},
        // W (zigzag)
        {{0.15, 0.2, 0.35, 0.8}, {0.35, 0.8, 0.5, 0.4}, {0.5, 0.4, 0.65, 0.8}, {0.65, 0.8, 0.85, 0.2}},
    };
    return all;
}

double point_segment_distance(double px, double py, const Segment& s) {
    const double dx = s.x2 - s.x1, dy = s.y2 - s.y1;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - s.x1) * dx + (py - s.y1) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = s.x1 + t * dx, cy = s.y1 + t * dy;
    return std::hypot(px - cx, py - cy);
}

// Dark strokes on a light background with mild pixel noise; values [-1,+1].
Tensor render_glyph(const std::vector<Segment>& strokes, int size, Rng& rng) {
    const double theta = rng.uniform(-0.18, 0.18);
    const double scale = rng.uniform(0.8, 1.05);
    const double shift_x = rng.uniform(-0.06, 0.06);
    const double shift_y = rng.uniform(-0.06, 0.06);
    const double radius = rng.uniform(0.045, 0.075);
    const double ct = std::cos(theta), st = std::sin(theta);

    std::vector<Segment> placed(strokes.size());
    for (size_t i = 0; i < strokes.size(); ++i) {
        const Segment& s = strokes[i];
        auto map_point = [&](double x, double y, double jx, double jy) {
            const double cx = (x - 0.5) * scale, cy = (y - 0.5) * scale;
            return std::pair<double, double>{ct * cx - st * cy + 0.5 + shift_x + jx,
                                             st * cx + ct * cy + 0.5 + shift_y + jy};
        };
        const auto [ax, ay] =
            map_point(s.x1, s.y1, rng.uniform(-0.025, 0.025), rng.uniform(-0.025, 0.025));
        const auto [bx, by] =
            map_point(s.x2, s.y2, rng.uniform(-0.025, 0.025), rng.uniform(-0.025, 0.025));
        placed[i] = {ax, ay, bx, by};
    }

    Tensor image({1, size, size});
    const double aa = 1.5 / size;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double px = (x + 0.5) / size, py = (y + 0.5) / size;
            double d = 1e9;
            for (const Segment& s : placed) d = std::min(d, point_segment_distance(px, py, s));
            const double ink = std::clamp((radius + aa - d) / aa, 0.0, 1.0);
            const double noise = 3.0 * rng.gaussian();
            const double value = std::clamp(255.0 * (1.0 - ink) + noise, 0.0, 255.0);
            image[static_cast<int64_t>(y) * size + x] = value / 127.5 - 1.0;
        }
    }
    return image;
}

}  // namespace

int toy_glyph_template_count() { return static_cast<int>(templates().size()); }

DatasetManifest make_toy_glyph_dataset(const std::string& dir, int classes, int per_class, uint64_t seed,
                                       int image_size, const std::array<double, 3>& fractions) {
    require(classes >= 2, ErrorKind::InvalidRange, "need at least 2 classes");
    require(classes <= toy_glyph_template_count(), ErrorKind::InvalidRange,
            "only " + std::to_string(toy_glyph_template_count()) + " stroke templates available");
    require(per_class >= 10, ErrorKind::InvalidRange, "need at least 10 images per class");
    require(image_size >= 8, ErrorKind::InvalidRange, "image_size too small");

    std::filesystem::create_directories(dir);
    std::vector<ImageRecord> records;
    records.reserve(static_cast<size_t>(classes) * static_cast<size_t>(per_class));
    for (int c = 0; c < classes; ++c) {
        for (int i = 0; i < per_class; ++i) {
            Rng rng(Rng::derive(seed, "glyph/class=" + std::to_string(c) + "/index=" + std::to_string(i)));
            const Tensor image = render_glyph(templates()[static_cast<size_t>(c)], image_size, rng);
            char name[64];
            std::snprintf(name, sizeof(name), "glyph_c%02d_%05d.png", c, i);
            write_grayscale_png((std::filesystem::path(dir) / name).string(), image);
            records.push_back({name, c, Split::train, Origin::real});
        }
    }
    DatasetManifest manifest = stratified_split(records, fractions, seed, classes, image_size);
    manifest.base_dir = dir;
    save_manifest(manifest, (std::filesystem::path(dir) / "manifest.csv").string());
    return manifest;
}

}  // namespace diffaug
