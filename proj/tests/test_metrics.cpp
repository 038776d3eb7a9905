#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffaug/errors.hpp"
#include "diffaug/metrics.hpp"
#include "diffaug/random.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace diffaug;

namespace {

FrechetStats stats_of(const std::vector<double>& mean, const std::vector<double>& cov) {
    const int d = static_cast<int>(mean.size());
    FrechetStats s;
    s.count = 2;
    s.extractor_id = "manual";
    s.mean = Tensor({d});
    for (int i = 0; i < d; ++i) s.mean[i] = mean[static_cast<size_t>(i)];
    s.covariance = Tensor({d, d});
    for (int64_t i = 0; i < s.covariance.size(); ++i) s.covariance[i] = cov[static_cast<size_t>(i)];
    return s;
}

FrechetStats stats_of_eigen(const Eigen::VectorXd& mean, const Eigen::MatrixXd& cov) {
    const int d = static_cast<int>(mean.size());
    FrechetStats s;
    s.count = 2;
    s.extractor_id = "manual";
    s.mean = Tensor({d});
    for (int i = 0; i < d; ++i) s.mean[i] = mean(i);
    s.covariance = Tensor({d, d});
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) s.covariance[static_cast<int64_t>(i) * d + j] = cov(i, j);
    return s;
}

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected a diffaug::Error");
    return ErrorKind::IoError;
}

DownstreamModel small_extractor(ParameterStore& ps) {
    DownstreamModelSpec spec;
    spec.family = Family::residual;
    spec.preset = DepthPreset::desk;
    spec.class_count = 2;
    spec.input_size = 8;
    DownstreamModel model(spec);
    Rng rng(31);
    model.init_params(ps, rng);
    return model;
}

std::vector<Tensor> random_images(int n, uint64_t seed, int size = 8) {
    Rng rng(seed);
    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        Tensor t({1, size, size});
        for (int64_t j = 0; j < t.size(); ++j) t[j] = rng.uniform(-1.0, 1.0);
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

TEST_CASE("metrics: two-class report from a hand-counted confusion") {
    // labels [0,0,1,1], predictions [0,1,1,1]:
    //   confusion [[1,1],[0,2]]; class0 P=1 R=1/2, class1 P=2/3 R=1.
    const EvalReport rep = classification_report({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
    CHECK(rep.accuracy == 0.75);
    CHECK(rep.precision_macro == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
    CHECK(rep.recall_macro == 0.75);
    // F1: class0 2/3, class1 4/5.
    CHECK(rep.f1_macro == doctest::Approx((2.0 / 3.0 + 0.8) / 2.0).epsilon(1e-12));
    CHECK(rep.confusion == std::vector<std::vector<int>>{{1, 1}, {0, 2}});
    CHECK(rep.support == std::vector<int>{2, 2});
    CHECK(rep.zero_predicted_classes.empty());
    CHECK(rep.zero_actual_classes.empty());
}

TEST_CASE("metrics: constant predictor over three uniform classes") {
    // Everything predicted 0: recall 1/0/0, precision 1/3 for class 0 and
    // undefined (flagged, counted as 0) for classes 1 and 2.
    const EvalReport rep = classification_report({0, 0, 0}, {0, 1, 2}, 3);
    CHECK(rep.accuracy == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(rep.recall_macro == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(rep.precision_macro == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
    CHECK(rep.zero_predicted_classes == std::vector<int>{1, 2});
    CHECK(rep.zero_actual_classes.empty());
    // Only class 0 has a defined F1: 2*(1/3)*1/(4/3) = 1/2.
    CHECK(rep.f1_macro == doctest::Approx(0.5 / 3.0).epsilon(1e-12));
}

TEST_CASE("metrics: perfect predictions") {
    const std::vector<int> labels = {0, 1, 2, 3, 2, 1, 0, 3, 2, 1};
    const EvalReport rep = classification_report(labels, labels, 4);
    CHECK(rep.accuracy == 1.0);
    CHECK(rep.precision_macro == 1.0);
    CHECK(rep.recall_macro == 1.0);
    CHECK(rep.f1_macro == 1.0);
    for (size_t a = 0; a < 4; ++a)
        for (size_t p = 0; p < 4; ++p)
            CHECK(rep.confusion[a][p] == (a == p ? rep.support[a] : 0));
}

TEST_CASE("metrics: confusion rows always sum to support") {
    Rng rng(77);
    std::vector<int> labels(300), preds(300);
    for (auto& v : labels) v = rng.uniform_int(5);
    for (auto& v : preds) v = rng.uniform_int(5);
    const EvalReport rep = classification_report(preds, labels, 5);

    int trace = 0, total = 0;
    for (int c = 0; c < 5; ++c) {
        int row = 0;
        for (int p = 0; p < 5; ++p) row += rep.confusion[static_cast<size_t>(c)][static_cast<size_t>(p)];
        CHECK(row == rep.support[static_cast<size_t>(c)]);
        trace += rep.confusion[static_cast<size_t>(c)][static_cast<size_t>(c)];
        total += row;
    }
    CHECK(total == 300);
    CHECK(rep.accuracy == doctest::Approx(static_cast<double>(trace) / 300.0).epsilon(1e-12));
    for (double v : {rep.accuracy, rep.precision_macro, rep.recall_macro, rep.f1_macro}) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("metrics: classification_report input validation") {
    CHECK(kind_of([] { classification_report({0, 1}, {0}, 2); }) == ErrorKind::LengthMismatch);
    CHECK(kind_of([] { classification_report({}, {}, 2); }) == ErrorKind::LengthMismatch);
    CHECK(kind_of([] { classification_report({0, 2}, {0, 1}, 2); }) == ErrorKind::ClassOutOfRange);
    CHECK(kind_of([] { classification_report({0, 1}, {0, -1}, 2); }) == ErrorKind::ClassOutOfRange);
}

TEST_CASE("metrics: eval report serialization") {
    EvalReport rep = classification_report({0, 0, 0}, {0, 1, 2}, 3);
    rep.loss = 0.515;
    const nlohmann::json j = nlohmann::json::parse(eval_report_json(rep));
    CHECK(j.at("loss") == 0.515);
    CHECK(j.at("accuracy") == rep.accuracy);
    CHECK(j.at("precision_macro") == rep.precision_macro);
    CHECK(j.at("recall_macro") == rep.recall_macro);
    CHECK(j.at("f1_macro") == rep.f1_macro);
    CHECK(j.at("confusion") == nlohmann::json(rep.confusion));
    CHECK(j.at("support") == nlohmann::json(rep.support));
    CHECK(j.at("zero_predicted_classes") == nlohmann::json(std::vector<int>{1, 2}));
    CHECK(j.at("zero_actual_classes").empty());

    const std::string text = render_eval_report(rep);
    CHECK(text.find("accuracy") != std::string::npos);
    CHECK(text.find("confusion (rows actual, cols predicted):") != std::string::npos);
}

TEST_CASE("metrics: scalar Frechet distances in closed form") {
    // (0-1)^2 + (1 + 1 - 2) = 1.
    CHECK(frechet_distance(stats_of({0.0}, {1.0}), stats_of({1.0}, {1.0})) ==
          doctest::Approx(1.0).epsilon(1e-12));
    // 0 + (4 + 1 - 2*sqrt(4)) = 1.
    CHECK(frechet_distance(stats_of({0.5}, {4.0}), stats_of({0.5}, {1.0})) ==
          doctest::Approx(1.0).epsilon(1e-12));

    const FrechetStats a = stats_of({0.3, -0.2}, {2.0, 0.5, 0.5, 1.0});
    CHECK(frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-6));

    bool clamped = false;
    frechet_distance(a, a, &clamped);
    // Self-distance may round slightly negative; either way the result is 0.
    CHECK(frechet_distance(a, a) >= 0.0);
    (void)clamped;
}

TEST_CASE("metrics: dense Frechet distance matches the symmetric-form oracle") {
    const int d = 8;
    Rng rng(11);
    Eigen::MatrixXd r1(d, d), r2(d, d);
    Eigen::VectorXd mu1(d), mu2(d);
    for (int i = 0; i < d; ++i) {
        mu1(i) = rng.uniform(-1.0, 1.0);
        mu2(i) = rng.uniform(-1.0, 1.0);
        for (int j = 0; j < d; ++j) {
            r1(i, j) = rng.gaussian();
            r2(i, j) = rng.gaussian();
        }
    }
    Eigen::MatrixXd s1 = r1 * r1.transpose() / d + 0.5 * Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd s2 = r2 * r2.transpose() / d + 0.5 * Eigen::MatrixXd::Identity(d, d);
    s1 = ((s1 + s1.transpose()) * 0.5).eval();
    s2 = ((s2 + s2.transpose()) * 0.5).eval();

    // Tr((S1 S2)^{1/2}) = Tr((S1^{1/2} S2 S1^{1/2})^{1/2}) with the inner
    // matrix symmetric psd, so its root comes from a self-adjoint solver.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es1(s1);
    const Eigen::MatrixXd s1_half =
        es1.eigenvectors() * es1.eigenvalues().cwiseSqrt().asDiagonal() * es1.eigenvectors().transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> esm(s1_half * s2 * s1_half);
    const double trace_sqrt = esm.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double oracle = (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * trace_sqrt;

    const FrechetStats a = stats_of_eigen(mu1, s1);
    const FrechetStats b = stats_of_eigen(mu2, s2);
    const double got = frechet_distance(a, b);
    CHECK(got == doctest::Approx(oracle).epsilon(1e-6));
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) <= 1e-8);
}

TEST_CASE("metrics: translation behavior of the Frechet distance") {
    const int n = 40, d = 5;
    Rng rng(7);
    Tensor x({n, d}), y({n, d});
    rng.fill_gaussian(x);
    rng.fill_gaussian(y);
    const std::vector<double> c = {0.3, -1.2, 0.5, 0.0, 2.0};

    auto shifted = [&](const Tensor& t) {
        Tensor out = t;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) out[static_cast<int64_t>(i) * d + j] += c[static_cast<size_t>(j)];
        return out;
    };

    const double base = frechet_distance(compute_stats(x, "e"), compute_stats(y, "e"));
    const double both = frechet_distance(compute_stats(shifted(x), "e"), compute_stats(shifted(y), "e"));
    CHECK(both == doctest::Approx(base).epsilon(1e-6));

    // Shifting one copy of the same set keeps covariances equal, so the
    // distance is exactly the squared shift length.
    double c2 = 0.0;
    for (double v : c) c2 += v * v;
    const double one = frechet_distance(compute_stats(x, "e"), compute_stats(shifted(x), "e"));
    CHECK(one == doctest::Approx(c2).epsilon(1e-6));
}

TEST_CASE("metrics: accumulator merge law and stats finalization") {
    Rng rng(13);
    Tensor rows({20, 6});
    rng.fill_gaussian(rows);

    FeatureAccumulator whole;
    whole.add_rows(rows);

    Tensor first({12, 6}), rest({8, 6});
    std::copy_n(rows.data(), first.size(), first.data());
    std::copy_n(rows.data() + first.size(), rest.size(), rest.data());
    FeatureAccumulator a, b;
    a.add_rows(first);
    b.add_rows(rest);
    a.merge(b);

    CHECK(a.count == whole.count);
    for (int64_t i = 0; i < whole.sum.size(); ++i)
        CHECK(a.sum[i] == doctest::Approx(whole.sum[i]).epsilon(1e-12));
    for (int64_t i = 0; i < whole.outer_sum.size(); ++i)
        CHECK(a.outer_sum[i] == doctest::Approx(whole.outer_sum[i]).epsilon(1e-12));

    // Merge into an empty accumulator adopts the other side; merging an empty
    // one is a no-op.
    FeatureAccumulator empty;
    empty.merge(whole);
    CHECK(empty.count == 20);
    whole.merge(FeatureAccumulator{});
    CHECK(whole.count == 20);

    const FrechetStats s = finalize_stats(whole, "acc");
    CHECK(s.count == 20);
    CHECK(s.extractor_id == "acc");
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < i; ++j)
            CHECK(s.covariance[static_cast<int64_t>(i) * 6 + j] ==
                  s.covariance[static_cast<int64_t>(j) * 6 + i]);

    // Hand-checked stats: rows (0,0),(1,1),(2,2) give mean (1,1) and unit
    // covariance in every cell.
    Tensor tiny({3, 2});
    tiny[0] = 0; tiny[1] = 0; tiny[2] = 1; tiny[3] = 1; tiny[4] = 2; tiny[5] = 2;
    const FrechetStats ts = compute_stats(tiny, "tiny");
    CHECK(ts.mean[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ts.mean[1] == doctest::Approx(1.0).epsilon(1e-12));
    for (int64_t i = 0; i < 4; ++i) CHECK(ts.covariance[i] == doctest::Approx(1.0).epsilon(1e-12));

    FeatureAccumulator one;
    Tensor single({1, 6});
    one.add_rows(single);
    CHECK(kind_of([&] { finalize_stats(one, "x"); }) == ErrorKind::TooFewSamples);

    Tensor wrong({2, 5});
    CHECK(kind_of([&] { whole.add_rows(wrong); }) == ErrorKind::DimensionMismatch);
    FeatureAccumulator narrow;
    narrow.add_rows(wrong);
    CHECK(kind_of([&] { whole.merge(narrow); }) == ErrorKind::DimensionMismatch);
}

TEST_CASE("metrics: Frechet distance input validation") {
    const FrechetStats a2 = stats_of({0.0, 0.0}, {1.0, 0.0, 0.0, 1.0});
    const FrechetStats a3 = stats_of({0.0, 0.0, 0.0},
                                     {1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0});
    CHECK(kind_of([&] { frechet_distance(a2, a3); }) == ErrorKind::DimensionMismatch);

    const FrechetStats skew = stats_of({0.0, 0.0}, {1.0, 0.5, 0.0, 1.0});
    CHECK(kind_of([&] { frechet_distance(skew, a2); }) == ErrorKind::InvalidRange);

    // diag(1,-1) is symmetric but indefinite: the product with the identity
    // has a hard negative eigenvalue.
    const FrechetStats indef = stats_of({0.0, 0.0}, {1.0, 0.0, 0.0, -1.0});
    CHECK(kind_of([&] { frechet_distance(indef, a2); }) == ErrorKind::NonPSDProduct);
}

TEST_CASE("metrics: disjoint halves of one distribution shrink with size") {
    double previous = std::numeric_limits<double>::infinity();
    for (int n : {64, 256, 1024}) {
        Rng rng(42);
        Tensor a({n / 2, 8}), b({n / 2, 8});
        rng.fill_gaussian(a);
        rng.fill_gaussian(b);
        const double d = frechet_distance(compute_stats(a, "g"), compute_stats(b, "g"));
        CHECK(d > 0.0);
        CHECK(d < previous);
        previous = d;
    }
}

TEST_CASE("metrics: feature extraction is deterministic and input-sensitive") {
    ParameterStore ps;
    const DownstreamModel model = small_extractor(ps);
    const int d = model.feature_dim("penultimate");
    CHECK(d == 64);

    // 70 images crosses the 64-image batching boundary.
    const auto images = random_images(70, 3);
    const Tensor f1 = extract_features(images, model, ps);
    const Tensor f2 = extract_features(images, model, ps);
    REQUIRE(f1.dim(0) == 70);
    REQUIRE(f1.dim(1) == d);
    for (int64_t i = 0; i < f1.size(); ++i) CHECK(f1[i] == f2[i]);

    double diff = 0.0;
    for (int j = 0; j < d; ++j) diff += std::abs(f1[j] - f1[static_cast<int64_t>(d) + j]);
    CHECK(diff > 1e-8);

    CHECK(kind_of([&] { extract_features(images, model, ps, "stem"); }) == ErrorKind::UnknownLayer);
    auto bad = images;
    bad[5] = Tensor({1, 4, 4});
    CHECK_THROWS_AS(extract_features(bad, model, ps), Error);
}

TEST_CASE("metrics: fid_between_sets end to end") {
    ParameterStore ps;
    const DownstreamModel model = small_extractor(ps);

    const auto real = random_images(66, 5);
    const auto synth = random_images(66, 6);
    const FidReport rep = fid_between_sets(real, synth, model, ps, "residual-desk#7");
    CHECK(rep.value >= 0.0);
    CHECK(std::isfinite(rep.value));
    CHECK(rep.real_count == 66);
    CHECK(rep.synthetic_count == 66);
    CHECK(rep.extractor_id == "residual-desk#7");
    CHECK_FALSE(rep.low_sample_warning);

    const FidReport self = fid_between_sets(real, real, model, ps, "residual-desk#7");
    CHECK(self.value >= 0.0);
    CHECK(self.value <= 1e-6);

    const FidReport small = fid_between_sets(random_images(10, 8), synth, model, ps, "x");
    CHECK(small.low_sample_warning);

    CHECK(kind_of([&] { fid_between_sets(random_images(1, 9), synth, model, ps, "x"); }) ==
          ErrorKind::TooFewSamples);

    const nlohmann::json j = nlohmann::json::parse(fid_report_json(rep));
    CHECK(j.at("fid") == rep.value);
    CHECK(j.at("real_count") == 66);
    CHECK(j.at("synthetic_count") == 66);
    CHECK(j.at("extractor_id") == "residual-desk#7");
    CHECK(j.at("low_sample_warning") == false);
    CHECK(j.contains("clamped"));
}

TEST_CASE("metrics: table renderers") {
    const std::vector<RetentionRow> rows = {
        {"Unfiltered", 57285, 24.63, true},
        {"ViT Filtered", 17743, 24.04, true},
        {"pending", 100, 0.0, false},
    };
    const std::string text = render_retention_table(rows);
    CHECK(text.find("Dataset") != std::string::npos);
    CHECK(text.find("Images Retained") != std::string::npos);
    CHECK(text.find("24.63") != std::string::npos);
    CHECK(text.find("pending") != std::string::npos);
    CHECK(text.find('-') != std::string::npos);

    const std::string csv = render_retention_table(rows, true);
    CHECK(csv.find("dataset,images_retained,fid\n") == 0);
    CHECK(csv.find("Unfiltered,57285,24.630000") != std::string::npos);
    CHECK(csv.find("pending,100,\n") != std::string::npos);

    EvalReport er = classification_report({0, 1, 1, 1}, {0, 0, 1, 1}, 2);
    er.loss = 0.515;
    const std::vector<PerformanceRow> perf = {{"residual", er}, {"dense", er}};
    const std::string ptext = render_performance_table(perf);
    CHECK(ptext.find("Model") != std::string::npos);
    CHECK(ptext.find("Accuracy") != std::string::npos);
    CHECK(ptext.find("residual") != std::string::npos);
    const std::string pcsv = render_performance_table(perf, true);
    CHECK(pcsv.find("model,loss,accuracy,precision,recall\n") == 0);
    CHECK(pcsv.find("dense,0.515000,0.750000") != std::string::npos);
}
