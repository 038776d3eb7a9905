#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>

#include "diffaug/errors.hpp"
#include "diffaug/experiment.hpp"
#include "diffaug/random.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace diffaug;
using nlohmann::json;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected a diffaug::Error");
    return ErrorKind::IoError;
}

std::string write_config(const std::string& dir, const std::string& body) {
    const std::string path = dir + "/config.json";
    std::ofstream os(path);
    os << body;
    REQUIRE(os.good());
    return path;
}

}  // namespace

TEST_CASE("experiment: defaults cover every pipeline stage") {
    const json cfg = default_experiment_config();
    for (const char* key : {"seed", "dataset", "schedule", "backbone", "guidance", "sampler",
                            "training", "classifier", "filter", "metrics", "inputs"})
        CHECK(cfg.contains(key));

    CHECK(cfg.at("schedule").at("kind") == "linear");
    CHECK(cfg.at("schedule").at("timesteps") == 200);
    CHECK(cfg.at("schedule").at("beta_start") == 1e-4);
    CHECK(cfg.at("schedule").at("beta_end") == 0.02);
    CHECK(cfg.at("backbone").at("base_channels") == 64);
    CHECK(cfg.at("backbone").at("channel_multipliers") == json({1, 2, 4}));
    CHECK(cfg.at("training").at("learning_rate") == 1e-4);
    CHECK(cfg.at("training").at("early_stop_patience") == 10);
    CHECK(cfg.at("training").at("weight_decay") == 0.01);
    CHECK(cfg.at("filter").at("threshold") == 0.90);
    CHECK(cfg.at("filter").at("require_argmax_match") == false);
    CHECK(cfg.at("sampler").at("method") == "ddpm");
    CHECK(cfg.at("classifier").at("family") == "residual");
    CHECK(cfg.at("classifier").at("preset") == "desk");

    CHECK(load_experiment_config("") == cfg);
}

TEST_CASE("experiment: user files merge over defaults") {
    const std::string dir = testutil::tmp_dir("exp_merge");
    const std::string path = write_config(
        dir, R"({"training": {"batch_size": 16}, "schedule": {"timesteps": 10}, "seed": 42})");
    const json cfg = load_experiment_config(path);
    CHECK(cfg.at("training").at("batch_size") == 16);
    CHECK(cfg.at("schedule").at("timesteps") == 10);
    CHECK(cfg.at("seed") == 42);
    // Untouched siblings keep their defaults.
    CHECK(cfg.at("training").at("learning_rate") == 1e-4);
    CHECK(cfg.at("schedule").at("beta_start") == 1e-4);
}

TEST_CASE("experiment: unknown or mistyped keys are rejected") {
    const std::string dir = testutil::tmp_dir("exp_strict");

    CHECK(kind_of([&] { load_experiment_config(dir + "/absent.json"); }) == ErrorKind::MissingFile);
    CHECK(kind_of([&] { load_experiment_config(write_config(dir, "{nope")); }) ==
          ErrorKind::ParseError);
    CHECK(kind_of([&] { load_experiment_config(write_config(dir, "[1,2]")); }) ==
          ErrorKind::ParseError);
    CHECK(kind_of([&] { load_experiment_config(write_config(dir, R"({"foo": 1})")); }) ==
          ErrorKind::ConfigError);

    try {
        load_experiment_config(write_config(dir, R"({"training": {"batch_sz": 1}})"));
        FAIL("expected ConfigError");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::ConfigError);
        CHECK(std::string(e.what()).find("training.batch_sz") != std::string::npos);
    }

    CHECK(kind_of([&] {
              load_experiment_config(write_config(dir, R"({"training": {"batch_size": "x"}})"));
          }) == ErrorKind::ConfigError);
    CHECK(kind_of([&] { load_experiment_config(write_config(dir, R"({"schedule": "linear"})")); }) ==
          ErrorKind::ConfigError);
    CHECK(kind_of([&] {
              load_experiment_config(write_config(dir, R"({"classifier": {"family": 3}})"));
          }) == ErrorKind::ConfigError);
    CHECK(kind_of([&] {
              load_experiment_config(
                  write_config(dir, R"({"backbone": {"channel_multipliers": 2}})"));
          }) == ErrorKind::ConfigError);
}

TEST_CASE("experiment: overrides coerce to the existing type") {
    json cfg = default_experiment_config();

    apply_override(cfg, "training.batch_size", "64");
    CHECK(cfg.at("training").at("batch_size") == 64);
    CHECK(cfg.at("training").at("batch_size").is_number_integer());

    apply_override(cfg, "schedule.beta_end", "0.05");
    CHECK(cfg.at("schedule").at("beta_end") == 0.05);

    apply_override(cfg, "training.cosine_lr", "true");
    CHECK(cfg.at("training").at("cosine_lr") == true);

    apply_override(cfg, "classifier.family", "dense");
    CHECK(cfg.at("classifier").at("family") == "dense");

    // A numeric-looking value stays a string when the target is a string.
    apply_override(cfg, "dataset.manifest", "123");
    CHECK(cfg.at("dataset").at("manifest") == "123");

    apply_override(cfg, "backbone.attention_resolutions", "[4]");
    CHECK(cfg.at("backbone").at("attention_resolutions") == json({4}));
    apply_override(cfg, "backbone.channel_multipliers", "[1,2]");
    CHECK(cfg.at("backbone").at("channel_multipliers") == json({1, 2}));

    CHECK(kind_of([&] { apply_override(cfg, "training.nope", "1"); }) == ErrorKind::ConfigError);
    CHECK(kind_of([&] { apply_override(cfg, "nope.x", "1"); }) == ErrorKind::ConfigError);
    CHECK(kind_of([&] { apply_override(cfg, "training.cosine_lr", "maybe"); }) ==
          ErrorKind::ConfigError);
    CHECK(kind_of([&] { apply_override(cfg, "training.batch_size", "abc"); }) ==
          ErrorKind::ConfigError);
    CHECK(kind_of([&] { apply_override(cfg, "training", "{}"); }) == ErrorKind::ConfigError);
}

TEST_CASE("experiment: stage seeds derive from the global seed") {
    json cfg = default_experiment_config();
    cfg["seed"] = 9;
    CHECK(stage_seed(cfg, "diffusion") == Rng::derive(9, "stage/diffusion"));
    CHECK(stage_seed(cfg, "sample") == Rng::derive(9, "stage/sample"));
    CHECK(stage_seed(cfg, "diffusion") != stage_seed(cfg, "sample"));
    cfg["seed"] = 10;
    CHECK(stage_seed(cfg, "diffusion") == Rng::derive(10, "stage/diffusion"));
}

TEST_CASE("experiment: json builders wire through class count and size") {
    json cfg = default_experiment_config();

    const NoiseSchedule sched = schedule_from_json(cfg);
    CHECK(sched.kind == ScheduleKind::linear);
    CHECK(sched.T == 200);
    CHECK(sched.betas.front() == 1e-4);
    CHECK(sched.betas.back() == 0.02);

    const BackboneConfig bb = backbone_from_json(cfg, 5, 32);
    CHECK(bb.class_count == 5);
    CHECK(bb.image_size == 32);
    CHECK(bb.base_channels == 64);

    const GuidanceConfig gd = guidance_from_json(cfg, 5, 32);
    CHECK(gd.class_count == 5);
    CHECK(gd.image_size == 32);

    const SamplerConfig sp = sampler_from_json(cfg);
    CHECK(sp.steps == 200);
    CHECK(sp.method == SamplerMethod::ddpm);

    const TrainConfig tr = train_from_json(cfg, 77);
    CHECK(tr.seed == 77);
    CHECK(tr.batch_size == 128);

    const DownstreamModelSpec spec = classifier_from_json(cfg, 4, 16);
    CHECK(spec.family == Family::residual);
    CHECK(spec.preset == DepthPreset::desk);
    CHECK(spec.class_count == 4);
    CHECK(spec.input_size == 16);

    apply_override(cfg, "sampler.ddim_eta", "1.5");
    CHECK(kind_of([&] { sampler_from_json(cfg); }) == ErrorKind::InvalidRange);
    apply_override(cfg, "sampler.ddim_eta", "0.5");
    apply_override(cfg, "sampler.guidance_scale", "-1.0");
    CHECK(kind_of([&] { sampler_from_json(cfg); }) == ErrorKind::InvalidRange);
}

TEST_CASE("experiment: runs root precedence is flag, environment, default") {
    unsetenv("DIFFAUG_RUNS_ROOT");
    CHECK(resolve_runs_root("explicit") == "explicit");
    CHECK(resolve_runs_root("") == "runs");
    setenv("DIFFAUG_RUNS_ROOT", "/tmp/elsewhere", 1);
    CHECK(resolve_runs_root("") == "/tmp/elsewhere");
    CHECK(resolve_runs_root("explicit") == "explicit");
    unsetenv("DIFFAUG_RUNS_ROOT");
}

TEST_CASE("experiment: run directory lifecycle") {
    const std::string root = testutil::tmp_dir("exp_rundir");

    CHECK(kind_of([&] { RunDir bad(root, "a/b"); }) == ErrorKind::ConfigError);
    CHECK(kind_of([&] { RunDir bad(root, ""); }) == ErrorKind::ConfigError);

    auto run = std::make_unique<RunDir>(root, "trial");
    const std::string path = run->path();
    for (const char* sub : {"checkpoints", "samples", "reports"})
        CHECK(std::filesystem::is_directory(std::filesystem::path(path) / sub));
    CHECK(std::filesystem::exists(std::filesystem::path(path) / ".lock"));

    // Concurrent use of the same run directory is refused while locked.
    CHECK(kind_of([&] { RunDir clash(root, "trial"); }) == ErrorKind::IoError);

    json cfg = default_experiment_config();
    cfg["seed"] = 3;
    run->echo_config(cfg);
    std::ifstream echoed(path + "/config.json");
    json back;
    echoed >> back;
    CHECK(back == cfg);

    run->add_artifact("reports/fid.json", "pool FID");
    run->write_manifest();
    std::ifstream mf(path + "/MANIFEST.txt");
    const std::string manifest((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
    CHECK(manifest.find("config.json\tresolved configuration") != std::string::npos);
    CHECK(manifest.find("reports/fid.json\tpool FID") != std::string::npos);

    run->write_error("ConfigError", "boom");
    std::ifstream ef(path + "/error.json");
    json err;
    ef >> err;
    CHECK(err.at("kind") == "ConfigError");
    CHECK(err.at("message") == "boom");

    const std::string nested = run->sub("reports/deep/x.json");
    CHECK(std::filesystem::is_directory(std::filesystem::path(path) / "reports" / "deep"));
    CHECK(nested.find(path) == 0);

    // Destruction releases the lock; the name becomes reusable.
    run.reset();
    CHECK_FALSE(std::filesystem::exists(std::filesystem::path(path) / ".lock"));
    RunDir again(root, "trial");
    CHECK(again.path() == path);
}
