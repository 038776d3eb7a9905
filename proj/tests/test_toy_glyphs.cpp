#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "diffaug/errors.hpp"
#include "diffaug/image_io.hpp"
#include "diffaug/toy_glyphs.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace diffaug;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

std::map<Split, int> split_counts(const DatasetManifest& m, int label = -1) {
    std::map<Split, int> counts;
    for (const auto& rec : m.records)
        if (label < 0 || rec.label == label) counts[rec.split] += 1;
    return counts;
}

}  // namespace

TEST_CASE("toy glyphs: five classes by two hundred yield a stratified thousand") {
    const std::string dir = testutil::tmp_dir("glyphs_main");
    const DatasetManifest m = make_toy_glyph_dataset(dir, 5, 200, 1);

    CHECK(m.class_count == 5);
    CHECK(m.image_size == 32);
    REQUIRE(m.records.size() == 1000);
    const auto totals = split_counts(m);
    CHECK(totals.at(Split::train) == 800);
    CHECK(totals.at(Split::val) == 100);
    CHECK(totals.at(Split::test) == 100);
    for (int c = 0; c < 5; ++c) {
        const auto per = split_counts(m, c);
        CHECK(per.at(Split::train) == 160);
        CHECK(per.at(Split::val) == 20);
        CHECK(per.at(Split::test) == 20);
    }

    for (const auto& rec : m.records) {
        CHECK(rec.origin == Origin::real);
        CHECK(std::filesystem::exists(m.resolve(rec)));
    }

    const DatasetManifest back = load_manifest(dir + "/manifest.csv");
    REQUIRE(back.records.size() == m.records.size());
    CHECK(back.class_count == 5);
    for (size_t i = 0; i < m.records.size(); ++i) {
        CHECK(back.records[i].path == m.records[i].path);
        CHECK(back.records[i].label == m.records[i].label);
        CHECK(back.records[i].split == m.records[i].split);
    }
}

TEST_CASE("toy glyphs: same seed gives byte-identical datasets") {
    const std::string dir_a = testutil::tmp_dir("glyphs_rep_a");
    const std::string dir_b = testutil::tmp_dir("glyphs_rep_b");
    const DatasetManifest a = make_toy_glyph_dataset(dir_a, 3, 10, 7, 16);
    const DatasetManifest b = make_toy_glyph_dataset(dir_b, 3, 10, 7, 16);

    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
        CHECK(a.records[i].path == b.records[i].path);
        CHECK(a.records[i].split == b.records[i].split);
        CHECK(slurp(a.resolve(a.records[i])) == slurp(b.resolve(b.records[i])));
    }
    CHECK(slurp(dir_a + "/manifest.csv") == slurp(dir_b + "/manifest.csv"));

    const std::string dir_c = testutil::tmp_dir("glyphs_rep_c");
    const DatasetManifest c = make_toy_glyph_dataset(dir_c, 3, 10, 8, 16);
    bool any_differs = false;
    for (size_t i = 0; i < a.records.size() && !any_differs; ++i)
        any_differs = slurp(a.resolve(a.records[i])) != slurp(c.resolve(c.records[i]));
    CHECK(any_differs);
}

TEST_CASE("toy glyphs: input validation") {
    const std::string dir = testutil::tmp_dir("glyphs_invalid");
    const auto kind_of = [&](const std::function<void()>& fn) {
        try {
            fn();
        } catch (const Error& e) {
            return e.kind();
        }
        FAIL("expected a diffaug::Error");
        return ErrorKind::IoError;
    };
    CHECK(kind_of([&] { make_toy_glyph_dataset(dir, 1, 10, 1); }) == ErrorKind::InvalidRange);
    CHECK(kind_of([&] { make_toy_glyph_dataset(dir, toy_glyph_template_count() + 1, 10, 1); }) ==
          ErrorKind::InvalidRange);
    CHECK(kind_of([&] { make_toy_glyph_dataset(dir, 2, 9, 1); }) == ErrorKind::InvalidRange);
    CHECK(kind_of([&] { make_toy_glyph_dataset(dir, 2, 10, 1, 4); }) == ErrorKind::InvalidRange);
}

TEST_CASE("toy glyphs: template stock covers the paper-scale class count") {
    CHECK(toy_glyph_template_count() >= 5);
}

TEST_CASE("toy glyphs: rendered images are dark strokes on a light background") {
    const std::string dir = testutil::tmp_dir("glyphs_pixels");
    const DatasetManifest m = make_toy_glyph_dataset(dir, 4, 10, 11);

    for (int i = 0; i < 8; ++i) {
        const Tensor img = load_pixel_tensor(m.resolve(m.records[static_cast<size_t>(i * 5)]), 32);
        REQUIRE(img.rank() == 3);
        REQUIRE(img.dim(0) == 1);
        REQUIRE(img.dim(1) == 32);
        REQUIRE(img.dim(2) == 32);

        double lo = 1e9, hi = -1e9, mean = 0.0;
        int64_t ink = 0;
        for (int64_t j = 0; j < img.size(); ++j) {
            lo = std::min(lo, img[j]);
            hi = std::max(hi, img[j]);
            mean += img[j];
            if (img[j] < 0.0) ink += 1;
        }
        mean /= static_cast<double>(img.size());
        CHECK(lo >= -1.0);
        CHECK(hi <= 1.0);
        CHECK(lo < -0.5);   // stroke interior is dark
        CHECK(hi > 0.9);    // background stays light
        CHECK(mean > 0.0);  // strokes cover a minority of the frame
        CHECK(ink > img.size() / 50);
        CHECK(ink < img.size() / 2);
    }
}

TEST_CASE("toy glyphs: classes separate under a nearest-centroid rule") {
    const std::string dir = testutil::tmp_dir("glyphs_sep");
    const DatasetManifest m = make_toy_glyph_dataset(dir, 5, 20, 3);

    std::vector<Tensor> centroids(5, Tensor::zeros({1, 32, 32}));
    std::vector<int> counts(5, 0);
    std::vector<std::pair<Tensor, int>> train;
    for (const auto& rec : m.records) {
        if (rec.split != Split::train) continue;
        Tensor img = load_pixel_tensor(m.resolve(rec), 32);
        Tensor& acc = centroids[static_cast<size_t>(rec.label)];
        for (int64_t j = 0; j < img.size(); ++j) acc[j] += img[j];
        counts[static_cast<size_t>(rec.label)] += 1;
        train.emplace_back(std::move(img), rec.label);
    }
    for (int c = 0; c < 5; ++c) {
        REQUIRE(counts[static_cast<size_t>(c)] == 16);
        Tensor& acc = centroids[static_cast<size_t>(c)];
        for (int64_t j = 0; j < acc.size(); ++j) acc[j] /= 16.0;
    }

    int correct = 0;
    for (const auto& [img, label] : train) {
        int best = -1;
        double best_d = 1e18;
        for (int c = 0; c < 5; ++c) {
            double d = 0.0;
            const Tensor& ctr = centroids[static_cast<size_t>(c)];
            for (int64_t j = 0; j < img.size(); ++j) d += (img[j] - ctr[j]) * (img[j] - ctr[j]);
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (best == label) correct += 1;
    }
    CHECK(correct >= 72);  // >= 90% of 80
}

TEST_CASE("toy glyphs: custom fractions and size flow through") {
    const std::string dir = testutil::tmp_dir("glyphs_frac");
    const DatasetManifest m = make_toy_glyph_dataset(dir, 2, 20, 5, 16, {0.5, 0.25, 0.25});
    CHECK(m.image_size == 16);
    for (int c = 0; c < 2; ++c) {
        const auto per = split_counts(m, c);
        CHECK(per.at(Split::train) == 10);
        CHECK(per.at(Split::val) == 5);
        CHECK(per.at(Split::test) == 5);
    }
    const Tensor img = load_pixel_tensor(m.resolve(m.records[0]), 16);
    CHECK(img.dim(1) == 16);
}
