#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/classifiers.hpp"
#include "diffaug/tensor.hpp"

namespace diffaug {

struct EvalReport {
    double loss = 0.0;  // filled by the evaluating loop, not classification_report
    double accuracy = 0.0;
    double precision_macro = 0.0;
    double recall_macro = 0.0;
    double f1_macro = 0.0;
    std::vector<std::vector<int>> confusion;  // rows = actual, cols = predicted
    std::vector<int> support;
    std::vector<int> zero_predicted_classes;  // contribute 0 to macro precision
    std::vector<int> zero_actual_classes;     // contribute 0 to macro recall
};

EvalReport classification_report(const std::vector<int>& predictions, const std::vector<int>& labels,
                                 int class_count);

std::string eval_report_json(const EvalReport& report);
std::string render_eval_report(const EvalReport& report);

// Feature rows (count x D) of the model's named layer, eval mode.
Tensor extract_features(const std::vector<Tensor>& images, const DownstreamModel& model,
                        const ParameterStore& params, const std::string& layer = "penultimate");

// Parallel-safe mergeable moment accumulator: count, sum, outer-product sum.
struct FeatureAccumulator {
    int64_t count = 0;
    Tensor sum;        // (D)
    Tensor outer_sum;  // (D,D)

    void add_rows(const Tensor& rows);
    void merge(const FeatureAccumulator& other);
};

struct FrechetStats {
    Tensor mean;        // (D)
    Tensor covariance;  // (D,D), unbiased, symmetric
    int64_t count = 0;
    std::string extractor_id;
};

// count >= 2 required (unbiased covariance).
FrechetStats finalize_stats(const FeatureAccumulator& acc, const std::string& extractor_id);
FrechetStats compute_stats(const Tensor& features, const std::string& extractor_id);

// Squared Fréchet distance |mu1-mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).
// Eigenvalues of S1 S2 within -1e-8 of zero clamp to 0; clamped, when given,
// reports whether the final result needed clamping to 0.
double frechet_distance(const FrechetStats& a, const FrechetStats& b, bool* clamped = nullptr);

struct FidReport {
    double value = 0.0;
    int64_t real_count = 0;
    int64_t synthetic_count = 0;
    std::string extractor_id;
    bool low_sample_warning = false;  // a set smaller than D+1
    bool clamped = false;
};

FidReport fid_between_sets(const std::vector<Tensor>& real_images,
                           const std::vector<Tensor>& synthetic_images, const DownstreamModel& extractor,
                           const ParameterStore& params, const std::string& extractor_id);

std::string fid_report_json(const FidReport& report);

// Aligned-text / CSV tables in the shape of the report tables.
struct RetentionRow {
    std::string label;
    int64_t retained = 0;
    double fid = 0.0;
    bool has_fid = false;
};
std::string render_retention_table(const std::vector<RetentionRow>& rows, bool csv = false);

struct PerformanceRow {
    std::string model;
    EvalReport report;
};
std::string render_performance_table(const std::vector<PerformanceRow>& rows, bool csv = false);

}  // namespace diffaug
