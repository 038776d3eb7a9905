#include "diffaug/filtering.hpp"

#include <algorithm>
#include <cstdio>

#include "diffaug/errors.hpp"
#include "nlohmann/json.hpp"

namespace diffaug {

FilterResult filter_batch(const std::vector<SyntheticSampleRecord>& records,
                          const DownstreamModel& classifier, const ParameterStore& params,
                          const std::string& model_id, double threshold, bool require_argmax_match) {
    require(threshold >= 0.0 && threshold <= 1.0, ErrorKind::InvalidRange,
            "threshold must be in [0,1]");
    const int k = classifier.spec().class_count;
    const int size = classifier.spec().input_size;
    for (const auto& rec : records)
        require(rec.intended_class >= 0 && rec.intended_class < k, ErrorKind::ClassMismatch,
                "record intends class " + std::to_string(rec.intended_class) +
                    " but the filter model has " + std::to_string(k) + " classes");

    FilterResult result;
    result.report.filter_model_id = model_id;
    result.report.threshold = threshold;
    result.report.total_in = static_cast<int>(records.size());
    double retained_sum = 0.0, rejected_sum = 0.0;

    const int total = static_cast<int>(records.size());
    const int chunk = 64;
    for (int begin = 0; begin < total; begin += chunk) {
        const int n = std::min(chunk, total - begin);
        Tensor batch({n, 1, size, size});
        for (int i = 0; i < n; ++i) {
            const Tensor& img = records[static_cast<size_t>(begin + i)].image;
            require(img.rank() == 3 && img.dim(0) == 1 && img.dim(1) == size && img.dim(2) == size,
                    ErrorKind::ShapeMismatch, "record image is not (1,S,S) at the filter input size");
            std::copy_n(img.data(), img.size(), batch.data() + static_cast<int64_t>(i) * img.size());
        }
        const std::vector<Prediction> preds = classifier.predict_batch(params, batch);
        for (int i = 0; i < n; ++i) {
            const SyntheticSampleRecord& rec = records[static_cast<size_t>(begin + i)];
            const Prediction& pred = preds[static_cast<size_t>(i)];
            const double p_intended = pred.probabilities[static_cast<size_t>(rec.intended_class)];

            SyntheticSampleRecord annotated = rec;
            annotated.confidences[model_id] = ConfidenceEntry{pred.predicted_class, p_intended};

            ClassRetention& cr = result.report.per_class[rec.intended_class];
            cr.in += 1;
            const bool pass = p_intended >= threshold &&
                              (!require_argmax_match || pred.predicted_class == rec.intended_class);
            if (pass) {
                cr.retained += 1;
                result.report.total_retained += 1;
                retained_sum += p_intended;
                result.retained.push_back(std::move(annotated));
            } else {
                rejected_sum += p_intended;
                result.rejected.push_back(std::move(annotated));
            }
        }
    }
    if (!result.retained.empty())
        result.report.mean_confidence_retained = retained_sum / static_cast<double>(result.retained.size());
    if (!result.rejected.empty())
        result.report.mean_confidence_rejected = rejected_sum / static_cast<double>(result.rejected.size());
    return result;
}

std::map<std::string, FilterResult> multi_filter(const std::vector<SyntheticSampleRecord>& records,
                                                 const std::vector<FilterClassifier>& classifiers,
                                                 double threshold, bool require_argmax_match) {
    std::map<std::string, FilterResult> out;
    for (const auto& fc : classifiers) {
        require(fc.model != nullptr && fc.params != nullptr, ErrorKind::ConfigError,
                "filter classifier " + fc.id + " is missing a model or parameters");
        require(out.find(fc.id) == out.end(), ErrorKind::ConfigError,
                "duplicate filter classifier id: " + fc.id);
        out.emplace(fc.id,
                    filter_batch(records, *fc.model, *fc.params, fc.id, threshold, require_argmax_match));
    }
    return out;
}

std::string filter_report_json(const FilterReport& report) {
    nlohmann::json j;
    j["filter_model_id"] = report.filter_model_id;
    j["threshold"] = report.threshold;
    j["total_in"] = report.total_in;
    j["total_retained"] = report.total_retained;
    nlohmann::json per;
    for (const auto& [cls, cr] : report.per_class)
        per[std::to_string(cls)] = {{"in", cr.in}, {"retained", cr.retained}};
    j["per_class"] = per;
    if (report.mean_confidence_retained) j["mean_confidence_retained"] = *report.mean_confidence_retained;
    if (report.mean_confidence_rejected) j["mean_confidence_rejected"] = *report.mean_confidence_rejected;
    return j.dump(2);
}

std::string render_filter_report(const FilterReport& report) {
    char buf[160];
    std::string out;
    std::snprintf(buf, sizeof(buf), "filter %s  threshold %.2f  retained %d/%d\n",
                  report.filter_model_id.c_str(), report.threshold, report.total_retained,
                  report.total_in);
    out += buf;
    if (report.mean_confidence_retained) {
        std::snprintf(buf, sizeof(buf), "mean confidence retained %.4f\n",
                      *report.mean_confidence_retained);
        out += buf;
    }
    if (report.mean_confidence_rejected) {
        std::snprintf(buf, sizeof(buf), "mean confidence rejected %.4f\n",
                      *report.mean_confidence_rejected);
        out += buf;
    }
    out += "class     in  retained\n";
    for (const auto& [cls, cr] : report.per_class) {
        std::snprintf(buf, sizeof(buf), "%5d  %5d  %8d\n", cls, cr.in, cr.retained);
        out += buf;
    }
    return out;
}

}  // namespace diffaug
