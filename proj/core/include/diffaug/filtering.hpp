#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffaug/classifiers.hpp"
#include "diffaug/sample_record.hpp"

namespace diffaug {

struct ClassRetention {
    int in = 0;
    int retained = 0;
};

struct FilterReport {
    std::string filter_model_id;
    double threshold = 0.90;
    int total_in = 0;
    int total_retained = 0;
    std::map<int, ClassRetention> per_class;
    // Means over p(intended class); absent when the partition is empty.
    std::optional<double> mean_confidence_retained;
    std::optional<double> mean_confidence_rejected;
};

struct FilterResult {
    // Copies of the input records, each with a confidence entry appended for
    // this filter model; the input pool itself is never mutated.
    std::vector<SyntheticSampleRecord> retained;
    std::vector<SyntheticSampleRecord> rejected;
    FilterReport report;
};

// A record passes when p(intended_class) >= threshold; require_argmax_match
// additionally demands argmax agreement with the intended class.
FilterResult filter_batch(const std::vector<SyntheticSampleRecord>& records,
                          const DownstreamModel& classifier, const ParameterStore& params,
                          const std::string& model_id, double threshold = 0.90,
                          bool require_argmax_match = false);

struct FilterClassifier {
    const DownstreamModel* model = nullptr;
    const ParameterStore* params = nullptr;
    std::string id;
};

// Each classifier filters the same full pool independently.
std::map<std::string, FilterResult> multi_filter(const std::vector<SyntheticSampleRecord>& records,
                                                 const std::vector<FilterClassifier>& classifiers,
                                                 double threshold = 0.90,
                                                 bool require_argmax_match = false);

std::string filter_report_json(const FilterReport& report);
std::string render_filter_report(const FilterReport& report);

}  // namespace diffaug
