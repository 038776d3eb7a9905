#include "diffaug/metrics.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdio>

#include "diffaug/errors.hpp"
#include "nlohmann/json.hpp"

namespace diffaug {

EvalReport classification_report(const std::vector<int>& predictions, const std::vector<int>& labels,
                                 int class_count) {
    require(predictions.size() == labels.size(), ErrorKind::LengthMismatch,
            "predictions and labels differ in length");
    require(!predictions.empty(), ErrorKind::LengthMismatch, "empty prediction list");
    require(class_count >= 1, ErrorKind::ClassOutOfRange, "class_count must be >= 1");

    EvalReport rep;
    rep.confusion.assign(static_cast<size_t>(class_count), std::vector<int>(static_cast<size_t>(class_count), 0));
    rep.support.assign(static_cast<size_t>(class_count), 0);
    for (size_t i = 0; i < labels.size(); ++i) {
        const int a = labels[i], p = predictions[i];
        require(a >= 0 && a < class_count, ErrorKind::ClassOutOfRange,
                "label " + std::to_string(a) + " outside 0.." + std::to_string(class_count - 1));
        require(p >= 0 && p < class_count, ErrorKind::ClassOutOfRange,
                "prediction " + std::to_string(p) + " outside 0.." + std::to_string(class_count - 1));
        rep.confusion[static_cast<size_t>(a)][static_cast<size_t>(p)] += 1;
        rep.support[static_cast<size_t>(a)] += 1;
    }

    int correct = 0;
    double psum = 0.0, rsum = 0.0, fsum = 0.0;
    for (int c = 0; c < class_count; ++c) {
        const size_t cc = static_cast<size_t>(c);
        const int tp = rep.confusion[cc][cc];
        correct += tp;
        int predicted = 0;
        for (int a = 0; a < class_count; ++a) predicted += rep.confusion[static_cast<size_t>(a)][cc];
        const int actual = rep.support[cc];

        double prec = 0.0, rec = 0.0;
        if (predicted > 0)
            prec = static_cast<double>(tp) / predicted;
        else
            rep.zero_predicted_classes.push_back(c);
        if (actual > 0)
            rec = static_cast<double>(tp) / actual;
        else
            rep.zero_actual_classes.push_back(c);
        psum += prec;
        rsum += rec;
        if (prec + rec > 0.0) fsum += 2.0 * prec * rec / (prec + rec);
    }
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    rep.precision_macro = psum / class_count;
    rep.recall_macro = rsum / class_count;
    rep.f1_macro = fsum / class_count;
    return rep;
}

std::string eval_report_json(const EvalReport& report) {
    nlohmann::json j;
    j["loss"] = report.loss;
    j["accuracy"] = report.accuracy;
    j["precision_macro"] = report.precision_macro;
    j["recall_macro"] = report.recall_macro;
    j["f1_macro"] = report.f1_macro;
    j["confusion"] = report.confusion;
    j["support"] = report.support;
    j["zero_predicted_classes"] = report.zero_predicted_classes;
    j["zero_actual_classes"] = report.zero_actual_classes;
    return j.dump(2);
}

std::string render_eval_report(const EvalReport& report) {
    char buf[128];
    std::string out;
    std::snprintf(buf, sizeof(buf), "loss       %.4f\n", report.loss);
    out += buf;
    std::snprintf(buf, sizeof(buf), "accuracy   %.4f\n", report.accuracy);
    out += buf;
    std::snprintf(buf, sizeof(buf), "precision  %.4f (macro)\n", report.precision_macro);
    out += buf;
    std::snprintf(buf, sizeof(buf), "recall     %.4f (macro)\n", report.recall_macro);
    out += buf;
    std::snprintf(buf, sizeof(buf), "f1         %.4f (macro)\n", report.f1_macro);
    out += buf;
    out += "confusion (rows actual, cols predicted):\n";
    for (const auto& row : report.confusion) {
        for (int v : row) {
            std::snprintf(buf, sizeof(buf), " %5d", v);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

Tensor extract_features(const std::vector<Tensor>& images, const DownstreamModel& model,
                        const ParameterStore& params, const std::string& layer) {
    const int size = model.spec().input_size;
    const int d = model.feature_dim(layer);
    const int total = static_cast<int>(images.size());
    Tensor out({total, d});
    const int chunk = 64;
    for (int begin = 0; begin < total; begin += chunk) {
        const int n = std::min(chunk, total - begin);
        Tensor batch({n, 1, size, size});
        for (int i = 0; i < n; ++i) {
            const Tensor& img = images[static_cast<size_t>(begin + i)];
            require(img.rank() == 3 && img.dim(0) == 1 && img.dim(1) == size && img.dim(2) == size,
                    ErrorKind::ShapeMismatch, "image " + std::to_string(begin + i) + " is not (1,S,S)");
            std::copy_n(img.data(), img.size(), batch.data() + static_cast<int64_t>(i) * img.size());
        }
        const Tensor feats = model.features_eval(params, batch, layer);
        std::copy_n(feats.data(), feats.size(), out.data() + static_cast<int64_t>(begin) * d);
    }
    return out;
}

void FeatureAccumulator::add_rows(const Tensor& rows) {
    require(rows.rank() == 2, ErrorKind::ShapeMismatch, "expected (N,D) feature rows");
    const int n = rows.dim(0), d = rows.dim(1);
    if (count == 0) {
        sum = Tensor::zeros({d});
        outer_sum = Tensor::zeros({d, d});
    }
    require(sum.dim(0) == d, ErrorKind::DimensionMismatch, "feature width changed mid-accumulation");
    Eigen::Map<Eigen::VectorXd> s(sum.data(), d);
    auto o = outer_sum.mat(d, d);
    for (int i = 0; i < n; ++i) {
        Eigen::Map<const Eigen::VectorXd> r(rows.data() + static_cast<int64_t>(i) * d, d);
        s += r;
        o += r * r.transpose();
    }
    count += n;
}

void FeatureAccumulator::merge(const FeatureAccumulator& other) {
    if (other.count == 0) return;
    if (count == 0) {
        *this = other;
        return;
    }
    require(sum.dim(0) == other.sum.dim(0), ErrorKind::DimensionMismatch,
            "cannot merge accumulators of different widths");
    for (int64_t i = 0; i < sum.size(); ++i) sum[i] += other.sum[i];
    for (int64_t i = 0; i < outer_sum.size(); ++i) outer_sum[i] += other.outer_sum[i];
    count += other.count;
}

FrechetStats finalize_stats(const FeatureAccumulator& acc, const std::string& extractor_id) {
    require(acc.count >= 2, ErrorKind::TooFewSamples,
            "need at least 2 samples for an unbiased covariance, got " + std::to_string(acc.count));
    const int d = acc.sum.dim(0);
    FrechetStats stats;
    stats.count = acc.count;
    stats.extractor_id = extractor_id;
    stats.mean = Tensor({d});
    const double inv = 1.0 / static_cast<double>(acc.count);
    for (int i = 0; i < d; ++i) stats.mean[i] = acc.sum[i] * inv;
    stats.covariance = Tensor({d, d});
    Eigen::Map<const Eigen::VectorXd> mu(stats.mean.data(), d);
    auto cov = stats.covariance.mat(d, d);
    auto outer = acc.outer_sum.mat(d, d);
    cov = (outer - static_cast<double>(acc.count) * mu * mu.transpose()) /
          static_cast<double>(acc.count - 1);
    cov = ((cov + cov.transpose()) * 0.5).eval();
    return stats;
}

FrechetStats compute_stats(const Tensor& features, const std::string& extractor_id) {
    FeatureAccumulator acc;
    acc.add_rows(features);
    return finalize_stats(acc, extractor_id);
}

double frechet_distance(const FrechetStats& a, const FrechetStats& b, bool* clamped) {
    const int d = a.mean.dim(0);
    require(b.mean.dim(0) == d, ErrorKind::DimensionMismatch, "feature dimensions differ");
    auto s1 = a.covariance.mat(d, d);
    auto s2 = b.covariance.mat(d, d);
    require((s1 - s1.transpose()).cwiseAbs().maxCoeff() <= 1e-9, ErrorKind::InvalidRange,
            "first covariance not symmetric");
    require((s2 - s2.transpose()).cwiseAbs().maxCoeff() <= 1e-9, ErrorKind::InvalidRange,
            "second covariance not symmetric");

    double mean_term = 0.0;
    for (int i = 0; i < d; ++i) {
        const double diff = a.mean[i] - b.mean[i];
        mean_term += diff * diff;
    }

    const Eigen::MatrixXd product = s1 * s2;
    Eigen::EigenSolver<Eigen::MatrixXd> solver(product, /*computeEigenvectors=*/false);
    require(solver.info() == Eigen::Success, ErrorKind::NonPSDProduct, "eigen decomposition failed");
    double trace_sqrt = 0.0;
    for (int i = 0; i < d; ++i) {
        const std::complex<double> ev = solver.eigenvalues()[i];
        const double tol = 1e-8 * std::max(1.0, std::abs(ev.real()));
        require(std::abs(ev.imag()) <= std::max(1e-8, 1e-6 * std::abs(ev.real())),
                ErrorKind::NonPSDProduct, "covariance product has a complex eigenvalue");
        double lambda = ev.real();
        if (lambda < 0.0) {
            require(lambda >= -tol, ErrorKind::NonPSDProduct,
                    "covariance product has negative eigenvalue " + std::to_string(lambda));
            lambda = 0.0;
        }
        trace_sqrt += std::sqrt(lambda);
    }

    double d2 = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
    const bool needs_clamp = d2 < 0.0;
    if (needs_clamp) d2 = 0.0;
    if (clamped != nullptr) *clamped = needs_clamp;
    return d2;
}

FidReport fid_between_sets(const std::vector<Tensor>& real_images,
                           const std::vector<Tensor>& synthetic_images, const DownstreamModel& extractor,
                           const ParameterStore& params, const std::string& extractor_id) {
    require(real_images.size() >= 2 && synthetic_images.size() >= 2, ErrorKind::TooFewSamples,
            "each set needs at least 2 images");
    const Tensor real_feats = extract_features(real_images, extractor, params);
    const Tensor synth_feats = extract_features(synthetic_images, extractor, params);
    FidReport report;
    report.real_count = static_cast<int64_t>(real_images.size());
    report.synthetic_count = static_cast<int64_t>(synthetic_images.size());
    report.extractor_id = extractor_id;
    const int d = extractor.feature_dim("penultimate");
    report.low_sample_warning =
        std::min(report.real_count, report.synthetic_count) < static_cast<int64_t>(d) + 1;
    report.value = frechet_distance(compute_stats(real_feats, extractor_id),
                                    compute_stats(synth_feats, extractor_id), &report.clamped);
    return report;
}

std::string fid_report_json(const FidReport& report) {
    nlohmann::json j;
    j["fid"] = report.value;
    j["real_count"] = report.real_count;
    j["synthetic_count"] = report.synthetic_count;
    j["extractor_id"] = report.extractor_id;
    j["low_sample_warning"] = report.low_sample_warning;
    j["clamped"] = report.clamped;
    return j.dump(2);
}

std::string render_retention_table(const std::vector<RetentionRow>& rows, bool csv) {
    std::string out;
    char buf[160];
    size_t width = std::string("Dataset").size();
    for (const auto& row : rows) width = std::max(width, row.label.size());
    if (csv) {
        out += "dataset,images_retained,fid\n";
        for (const auto& row : rows) {
            if (row.has_fid)
                std::snprintf(buf, sizeof(buf), "%s,%lld,%.6f\n", row.label.c_str(),
                              static_cast<long long>(row.retained), row.fid);
            else
                std::snprintf(buf, sizeof(buf), "%s,%lld,\n", row.label.c_str(),
                              static_cast<long long>(row.retained));
            out += buf;
        }
        return out;
    }
    std::snprintf(buf, sizeof(buf), "%-*s  %15s  %8s\n", static_cast<int>(width), "Dataset",
                  "Images Retained", "FID");
    out += buf;
    for (const auto& row : rows) {
        if (row.has_fid)
            std::snprintf(buf, sizeof(buf), "%-*s  %15lld  %8.2f\n", static_cast<int>(width),
                          row.label.c_str(), static_cast<long long>(row.retained), row.fid);
        else
            std::snprintf(buf, sizeof(buf), "%-*s  %15lld  %8s\n", static_cast<int>(width),
                          row.label.c_str(), static_cast<long long>(row.retained), "-");
        out += buf;
    }
    return out;
}

std::string render_performance_table(const std::vector<PerformanceRow>& rows, bool csv) {
    std::string out;
    char buf[200];
    size_t width = std::string("Model").size();
    for (const auto& row : rows) width = std::max(width, row.model.size());
    if (csv) {
        out += "model,loss,accuracy,precision,recall\n";
        for (const auto& row : rows) {
            std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f\n", row.model.c_str(),
                          row.report.loss, row.report.accuracy, row.report.precision_macro,
                          row.report.recall_macro);
            out += buf;
        }
        return out;
    }
    std::snprintf(buf, sizeof(buf), "%-*s  %6s  %8s  %9s  %6s\n", static_cast<int>(width), "Model",
                  "Loss", "Accuracy", "Precision", "Recall");
    out += buf;
    for (const auto& row : rows) {
        std::snprintf(buf, sizeof(buf), "%-*s  %6.3f  %8.3f  %9.4f  %6.4f\n", static_cast<int>(width),
                      row.model.c_str(), row.report.loss, row.report.accuracy,
                      row.report.precision_macro, row.report.recall_macro);
        out += buf;
    }
    return out;
}

}  // namespace diffaug
