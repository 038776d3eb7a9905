#include "diffaug/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "diffaug/image_io.hpp"
#include "diffaug/random.hpp"

namespace fs = std::filesystem;

namespace diffaug {

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    fail(ErrorKind::ParseError, "unknown split: " + s);
}

Origin origin_from_string(const std::string& s) {
    if (s == "real") return Origin::real;
    if (s == "synthetic") return Origin::synthetic;
    fail(ErrorKind::ParseError, "unknown origin: " + s);
}

const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

const char* to_string(Origin o) { return o == Origin::real ? "real" : "synthetic"; }

std::array<int, 3> DatasetManifest::split_counts() const {
    std::array<int, 3> counts{0, 0, 0};
    for (const auto& r : records) ++counts[static_cast<size_t>(r.split)];
    return counts;
}

std::vector<int> DatasetManifest::class_counts(Split s) const {
    std::vector<int> counts(static_cast<size_t>(class_count), 0);
    for (const auto& r : records)
        if (r.split == s) ++counts[static_cast<size_t>(r.label)];
    return counts;
}

std::vector<const ImageRecord*> DatasetManifest::split_records(Split s) const {
    std::vector<const ImageRecord*> out;
    for (const auto& r : records)
        if (r.split == s) out.push_back(&r);
    return out;
}

std::string DatasetManifest::resolve(const std::string& path) const {
    fs::path p(path);
    if (p.is_absolute() || base_dir.empty()) return path;
    return (fs::path(base_dir) / p).string();
}

std::string DatasetManifest::resolve(const ImageRecord& rec) const { return resolve(rec.path); }

namespace {

std::vector<std::string> split_fields(const std::string& line, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t pos = line.find(sep, start);
        if (pos == std::string::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

int64_t parse_int(const std::string& s, int line_no, const char* what) {
    try {
        size_t used = 0;
        const int64_t v = std::stoll(s, &used);
        require(used == s.size(), ErrorKind::ParseError, "");
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::ParseError,
             "line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" + s + "'");
    }
}

uint64_t parse_u64(const std::string& s, int line_no, const char* what) {
    try {
        size_t used = 0;
        const uint64_t v = std::stoull(s, &used);
        require(used == s.size(), ErrorKind::ParseError, "");
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::ParseError,
             "line " + std::to_string(line_no) + ": bad " + std::string(what) + " '" + s + "'");
    }
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
    require(fs::exists(path), ErrorKind::MissingFile, path);
    std::ifstream in(path);
    require(in.good(), ErrorKind::IoError, "cannot open " + path);

    DatasetManifest m;
    m.base_dir = fs::path(path).parent_path().string();

    std::string line;
    int line_no = 0;

    require(static_cast<bool>(std::getline(in, line)), ErrorKind::ParseError, "empty manifest: " + path);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    for (const std::string& field : split_fields(line, ';')) {
        const size_t eq = field.find('=');
        require(eq != std::string::npos, ErrorKind::ParseError, "line 1: bad header field '" + field + "'");
        const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
        if (key == "classes")
            m.class_count = static_cast<int>(parse_int(value, 1, "classes"));
        else if (key == "image_size")
            m.image_size = static_cast<int>(parse_int(value, 1, "image_size"));
        else if (key == "seed")
            m.seed = parse_u64(value, 1, "seed");
        else
            fail(ErrorKind::ParseError, "line 1: unknown header key '" + key + "'");
    }
    require(m.class_count >= 2, ErrorKind::ParseError, "line 1: classes must be >= 2");
    require(m.image_size >= 1, ErrorKind::ParseError, "line 1: image_size must be >= 1");

    std::unordered_set<std::string> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_fields(line, ',');
        require(fields.size() == 4, ErrorKind::ParseError,
                "line " + std::to_string(line_no) + ": expected path,label,split,origin");
        ImageRecord rec;
        rec.path = fields[0];
        require(!rec.path.empty(), ErrorKind::ParseError, "line " + std::to_string(line_no) + ": empty path");
        rec.label = static_cast<int>(parse_int(fields[1], line_no, "label"));
        require(rec.label >= 0 && rec.label < m.class_count, ErrorKind::LabelOutOfRange,
                "line " + std::to_string(line_no) + ": label " + fields[1] + " outside [0," +
                    std::to_string(m.class_count) + ")");
        try {
            rec.split = split_from_string(fields[2]);
            rec.origin = origin_from_string(fields[3]);
        } catch (const Error& e) {
            fail(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": " + e.what());
        }
        require(!(rec.origin == Origin::synthetic && rec.split == Split::test), ErrorKind::ParseError,
                "line " + std::to_string(line_no) + ": synthetic records may not be in the test split");
        require(seen.insert(rec.path).second, ErrorKind::DuplicatePath,
                "line " + std::to_string(line_no) + ": " + rec.path);
        m.records.push_back(std::move(rec));
    }
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path);
    require(out.good(), ErrorKind::IoError, "cannot write " + path);
    out << "classes=" << manifest.class_count << ";image_size=" << manifest.image_size
        << ";seed=" << manifest.seed << "\n";
    for (const auto& r : manifest.records)
        out << r.path << "," << r.label << "," << to_string(r.split) << "," << to_string(r.origin) << "\n";
    require(out.good(), ErrorKind::IoError, "write failed for " + path);
}

DatasetManifest stratified_split(const std::vector<ImageRecord>& records,
                                 const std::array<double, 3>& fractions, uint64_t seed, int class_count,
                                 int image_size) {
    const double total = fractions[0] + fractions[1] + fractions[2];
    require(std::abs(total - 1.0) <= 1e-9, ErrorKind::InvalidRange,
            "split fractions must sum to 1, got " + std::to_string(total));
    for (double f : fractions)
        require(f >= 0.0, ErrorKind::InvalidRange, "split fractions must be non-negative");

    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        require(r.label >= 0 && r.label < class_count, ErrorKind::LabelOutOfRange,
                "record label " + std::to_string(r.label));
        by_class[r.label].push_back(i);
    }
    for (const auto& [label, idx] : by_class)
        require(idx.size() >= 3, ErrorKind::ClassTooSmall,
                "class " + std::to_string(label) + " has " + std::to_string(idx.size()) + " records (< 3)");

    DatasetManifest out;
    out.class_count = class_count;
    out.image_size = image_size;
    out.seed = seed;

    for (auto& [label, idx] : by_class) {
        // Largest-remainder apportionment of this class across the 3 splits.
        const int n = static_cast<int>(idx.size());
        std::array<int, 3> take{};
        std::array<double, 3> rem{};
        int assigned = 0;
        for (int s = 0; s < 3; ++s) {
            const double quota = n * fractions[static_cast<size_t>(s)];
            take[static_cast<size_t>(s)] = static_cast<int>(std::floor(quota));
            rem[static_cast<size_t>(s)] = quota - take[static_cast<size_t>(s)];
            assigned += take[static_cast<size_t>(s)];
        }
        std::array<int, 3> order{0, 1, 2};
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (rem[static_cast<size_t>(a)] != rem[static_cast<size_t>(b)])
                return rem[static_cast<size_t>(a)] > rem[static_cast<size_t>(b)];
            return a < b;
        });
        for (int k = 0; k < n - assigned; ++k) ++take[static_cast<size_t>(order[static_cast<size_t>(k)])];

        Rng rng(Rng::derive(seed, "split/class=" + std::to_string(label)));
        const std::vector<int> perm = rng.permutation(n);
        int cursor = 0;
        for (int s = 0; s < 3; ++s) {
            for (int k = 0; k < take[static_cast<size_t>(s)]; ++k, ++cursor) {
                ImageRecord rec = records[idx[static_cast<size_t>(perm[static_cast<size_t>(cursor)])]];
                rec.split = static_cast<Split>(s);
                out.records.push_back(std::move(rec));
            }
        }
    }
    return out;
}

DatasetManifest fuse_datasets(const DatasetManifest& real, const std::vector<SyntheticSampleRecord>& synthetic) {
    DatasetManifest fused = real;
    for (const auto& s : synthetic) {
        require(s.intended_class >= 0 && s.intended_class < real.class_count, ErrorKind::ClassMismatch,
                "synthetic intended_class " + std::to_string(s.intended_class) + " outside [0," +
                    std::to_string(real.class_count) + ")");
        ImageRecord rec;
        rec.path = s.path;
        rec.label = s.intended_class;
        rec.split = Split::train;
        rec.origin = Origin::synthetic;
        fused.records.push_back(std::move(rec));
    }
    return fused;
}

void save_sidecar(const std::string& path, const std::vector<SyntheticSampleRecord>& records) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(path);
    require(out.good(), ErrorKind::IoError, "cannot write " + path);
    for (const auto& r : records) {
        nlohmann::json j{{"path", r.path},
                         {"intended_class", r.intended_class},
                         {"guidance_scale", r.guidance_scale},
                         {"steps", r.steps},
                         {"seed", r.seed}};
        if (!r.confidences.empty()) {
            nlohmann::json c = nlohmann::json::object();
            for (const auto& [id, entry] : r.confidences)
                c[id] = {{"predicted_class", entry.predicted_class}, {"confidence", entry.confidence}};
            j["confidences"] = std::move(c);
        }
        out << j.dump() << "\n";
    }
    require(out.good(), ErrorKind::IoError, "write failed for " + path);
}

std::vector<SyntheticSampleRecord> load_sidecar(const std::string& path, int image_size, bool load_images) {
    require(fs::exists(path), ErrorKind::MissingFile, path);
    std::ifstream in(path);
    require(in.good(), ErrorKind::IoError, "cannot open " + path);
    const fs::path dir = fs::path(path).parent_path();

    std::vector<SyntheticSampleRecord> records;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": " + e.what());
        }
        try {
            SyntheticSampleRecord r;
            r.path = j.at("path").get<std::string>();
            r.intended_class = j.at("intended_class").get<int>();
            r.guidance_scale = j.at("guidance_scale").get<double>();
            r.steps = j.at("steps").get<int>();
            r.seed = j.at("seed").get<uint64_t>();
            if (j.contains("confidences"))
                for (const auto& [id, entry] : j.at("confidences").items())
                    r.confidences[id] = {entry.at("predicted_class").get<int>(),
                                         entry.at("confidence").get<double>()};
            if (fs::path(r.path).is_relative() && !dir.empty()) r.path = (dir / r.path).string();
            if (load_images) r.image = load_pixel_tensor(r.path, image_size);
            records.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::ParseError, "line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

}  // namespace diffaug
