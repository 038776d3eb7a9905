#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/sample_record.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

enum class Split { train, val, test };
enum class Origin { real, synthetic };

Split split_from_string(const std::string& s);
Origin origin_from_string(const std::string& s);
const char* to_string(Split s);
const char* to_string(Origin o);

struct ImageRecord {
    std::string path;
    int label = 0;
    Split split = Split::train;
    Origin origin = Origin::real;
};

// Declarative dataset listing. Record paths are stored as written in the
// manifest file; relative ones resolve against base_dir.
struct DatasetManifest {
    int class_count = 0;
    int image_size = 32;
    uint64_t seed = 0;
    std::vector<ImageRecord> records;
    std::string base_dir;

    std::array<int, 3> split_counts() const;
    std::vector<int> class_counts(Split s) const;
    std::vector<const ImageRecord*> split_records(Split s) const;
    std::string resolve(const ImageRecord& rec) const;
    std::string resolve(const std::string& path) const;
};

// Parses and eagerly validates structure: header, label ranges, enum fields,
// duplicate paths, and the synthetic-never-test rule. Image decodability is
// checked lazily at load time, not here.
DatasetManifest load_manifest(const std::string& path);

void save_manifest(const DatasetManifest& manifest, const std::string& path);

// Largest-remainder apportionment of each class across train/val/test,
// shuffled by a per-class generator derived from seed.
DatasetManifest stratified_split(const std::vector<ImageRecord>& records,
                                 const std::array<double, 3>& fractions, uint64_t seed, int class_count,
                                 int image_size);

// Union of real train records with retained synthetic samples (train-only,
// origin=synthetic); val/test copied from real unchanged.
DatasetManifest fuse_datasets(const DatasetManifest& real,
                              const std::vector<SyntheticSampleRecord>& synthetic);

}  // namespace diffaug
