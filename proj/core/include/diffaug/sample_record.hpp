#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug {

struct ConfidenceEntry {
    int predicted_class = 0;
    double confidence = 0.0;
};

// One generated sample with its provenance. The image lives in memory right
// after generation; sidecar round-trips reference the PNG on disk instead.
struct SyntheticSampleRecord {
    Tensor image;
    std::string path;
    int intended_class = 0;
    double guidance_scale = 0.0;
    int steps = 0;
    uint64_t seed = 0;
    std::map<std::string, ConfidenceEntry> confidences;
};

// JSON-lines sidecar: one record per line with keys path, intended_class,
// guidance_scale, steps, seed, and (when present) confidences.
void save_sidecar(const std::string& path, const std::vector<SyntheticSampleRecord>& records);

// Relative record paths are resolved against the sidecar's directory.
// load_images decodes each referenced PNG into the record's image field.
std::vector<SyntheticSampleRecord> load_sidecar(const std::string& path, int image_size, bool load_images);

}  // namespace diffaug
