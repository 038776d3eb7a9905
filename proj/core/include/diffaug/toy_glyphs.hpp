#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "diffaug/dataset.hpp"

namespace diffaug {

// Procedural glyph dataset: one stroke template per class, rendered with
// per-sample affine and endpoint jitter, written as PNGs under dir with a
// stratified manifest at dir/manifest.csv. Deterministic given seed.
DatasetManifest make_toy_glyph_dataset(const std::string& dir, int classes, int per_class, uint64_t seed,
                                       int image_size = 32,
                                       const std::array<double, 3>& fractions = {0.8, 0.1, 0.1});

// Number of distinct stroke templates available (upper bound on classes).
int toy_glyph_template_count();

}  // namespace diffaug
