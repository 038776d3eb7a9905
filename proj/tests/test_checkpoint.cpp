#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "diffaug/checkpoint.hpp"
#include "diffaug/errors.hpp"
#include "diffaug/random.hpp"
#include "diffaug/schedule.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace diffaug;

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

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(os.good());
}

ParameterStore seeded_params() {
    ParameterStore ps;
    Rng rng(3);
    rng.fill_gaussian(ps.create("stem.w", {4, 1, 3, 3}));
    rng.fill_gaussian(ps.create("stem.b", {4}));
    rng.fill_gaussian(ps.create("head.fc.w", {2, 4}));
    return ps;
}

}  // namespace

TEST_CASE("checkpoint: config and parameters round trip") {
    const std::string dir = testutil::tmp_dir("ckpt_roundtrip");
    const std::string path = dir + "/model.ckpt";

    ConfigMap config;
    config["model.family"] = "residual";
    config["training.lr"] = "0.0001";
    config["note"] = "a=b=c";  // values may contain '='

    const ParameterStore ps = seeded_params();
    save_checkpoint(path, config, ps);

    const LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.schema_version == kCheckpointSchemaVersion);
    CHECK(loaded.config == config);
    REQUIRE(loaded.params.names() == ps.names());
    for (const auto& name : ps.names()) {
        const Tensor& a = ps.get(name);
        const Tensor& b = loaded.params.get(name);
        REQUIRE(a.shape() == b.shape());
        for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
}

TEST_CASE("checkpoint: empty payload round trips") {
    const std::string path = testutil::tmp_dir("ckpt_empty") + "/empty.ckpt";
    save_checkpoint(path, {}, ParameterStore{});
    const LoadedCheckpoint loaded = load_checkpoint(path);
    CHECK(loaded.config.empty());
    CHECK(loaded.params.names().empty());
}

TEST_CASE("checkpoint: corruption is detected") {
    const std::string dir = testutil::tmp_dir("ckpt_corrupt");
    const std::string path = dir + "/model.ckpt";
    save_checkpoint(path, {{"k", "v"}}, seeded_params());
    const std::string good = slurp(path);

    CHECK(kind_of([&] { load_checkpoint(dir + "/absent.ckpt"); }) == ErrorKind::MissingFile);

    std::string bad_magic = good;
    bad_magic[0] = 'X';
    spit(dir + "/bad_magic.ckpt", bad_magic);
    CHECK(kind_of([&] { load_checkpoint(dir + "/bad_magic.ckpt"); }) == ErrorKind::CheckpointError);

    std::string bad_version = good;
    bad_version[8] = 9;  // version field follows the 8-byte magic
    spit(dir + "/bad_version.ckpt", bad_version);
    CHECK(kind_of([&] { load_checkpoint(dir + "/bad_version.ckpt"); }) == ErrorKind::CheckpointError);

    spit(dir + "/truncated.ckpt", good.substr(0, good.size() / 2));
    CHECK(kind_of([&] { load_checkpoint(dir + "/truncated.ckpt"); }) == ErrorKind::CheckpointError);

    std::string bad_dtype = good;
    const size_t pos = bad_dtype.find("f64");
    REQUIRE(pos != std::string::npos);
    bad_dtype.replace(pos, 3, "f32");
    spit(dir + "/bad_dtype.ckpt", bad_dtype);
    CHECK(kind_of([&] { load_checkpoint(dir + "/bad_dtype.ckpt"); }) == ErrorKind::CheckpointError);
}

TEST_CASE("checkpoint: config accessors") {
    const ConfigMap config = {{"n", "12"}, {"x", "0.25"}, {"s", "text"}};
    CHECK(config_get(config, "s") == "text");
    CHECK(config_get_int(config, "n") == 12);
    CHECK(config_get_double(config, "x") == 0.25);
    CHECK(kind_of([&] { config_get(config, "missing"); }) == ErrorKind::CheckpointError);
    CHECK(kind_of([&] { config_get_int(config, "s"); }) == ErrorKind::CheckpointError);
    CHECK(kind_of([&] { config_get_double(config, "s"); }) == ErrorKind::CheckpointError);
}

TEST_CASE("checkpoint: format_double emits shortest round-trip decimals") {
    CHECK(format_double(0.1) == "0.1");
    CHECK(format_double(1.0) == "1");
    CHECK(format_double(1.0 / 3.0) == "0.3333333333333333");

    Rng rng(21);
    std::vector<double> values = {0.0, -1.5, 1e-300, 1e300, 0.1, 2.5e-8};
    for (int i = 0; i < 100; ++i) values.push_back(rng.gaussian() * std::pow(10.0, rng.uniform_int(61) - 30));
    for (double v : values) CHECK(std::stod(format_double(v)) == v);
}

TEST_CASE("checkpoint: fnv1a64 matches the reference vectors") {
    CHECK(fnv1a64("", 0) == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
    CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("checkpoint: schedule round trips through config") {
    for (const ScheduleKind kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
        const NoiseSchedule sched = make_schedule(kind, 20, 1e-4, 0.02);
        ConfigMap config;
        schedule_to_config(sched, config);
        const NoiseSchedule back = schedule_from_config(config);
        CHECK(back.kind == sched.kind);
        CHECK(back.T == sched.T);
        for (int t = 0; t < sched.T; ++t) {
            CHECK(back.betas[static_cast<size_t>(t)] == sched.betas[static_cast<size_t>(t)]);
            CHECK(back.alpha_bars[static_cast<size_t>(t)] == sched.alpha_bars[static_cast<size_t>(t)]);
        }

        ConfigMap tampered = config;
        tampered["schedule.betas_checksum"] = "0000000000000000";
        CHECK(kind_of([&] { schedule_from_config(tampered); }) == ErrorKind::CheckpointError);
    }
}

TEST_CASE("checkpoint: backbone config round trips") {
    BackboneConfig cfg = testutil::tiny_backbone(5, 16);
    cfg.channel_multipliers = {1, 2, 4};
    cfg.dropout = 0.15;
    ConfigMap config;
    backbone_config_to_map(cfg, config);
    const BackboneConfig back = backbone_config_from_map(config);
    CHECK(back.image_size == cfg.image_size);
    CHECK(back.base_channels == cfg.base_channels);
    CHECK(back.channel_multipliers == cfg.channel_multipliers);
    CHECK(back.blocks_per_level == cfg.blocks_per_level);
    CHECK(back.embedding_dim == cfg.embedding_dim);
    CHECK(back.se_reduction == cfg.se_reduction);
    CHECK(back.attention_heads == cfg.attention_heads);
    CHECK(back.class_count == cfg.class_count);
    CHECK(back.dropout == cfg.dropout);
    CHECK(back.norm_groups == cfg.norm_groups);
    CHECK(back.attention_resolutions == cfg.attention_resolutions);

    cfg.attention_resolutions = {};
    ConfigMap no_attn;
    backbone_config_to_map(cfg, no_attn);
    CHECK(backbone_config_from_map(no_attn).attention_resolutions.empty());
}

TEST_CASE("checkpoint: guidance config round trips") {
    GuidanceConfig cfg = testutil::tiny_guidance(4, 16);
    cfg.dropout = 0.2;
    ConfigMap config;
    guidance_config_to_map(cfg, config);
    const GuidanceConfig back = guidance_config_from_map(config);
    CHECK(back.image_size == cfg.image_size);
    CHECK(back.base_channels == cfg.base_channels);
    CHECK(back.channel_multipliers == cfg.channel_multipliers);
    CHECK(back.blocks_per_level == cfg.blocks_per_level);
    CHECK(back.embedding_dim == cfg.embedding_dim);
    CHECK(back.se_reduction == cfg.se_reduction);
    CHECK(back.class_count == cfg.class_count);
    CHECK(back.dropout == cfg.dropout);
    CHECK(back.norm_groups == cfg.norm_groups);
}

TEST_CASE("checkpoint: downstream spec round trips for every family and preset") {
    for (const Family family :
         {Family::residual, Family::dense, Family::plainconv, Family::patch_transformer}) {
        for (const DepthPreset preset : {DepthPreset::desk, DepthPreset::paper}) {
            DownstreamModelSpec spec;
            spec.family = family;
            spec.preset = preset;
            spec.class_count = 7;
            spec.input_size = 32;
            ConfigMap config;
            downstream_spec_to_map(spec, config);
            const DownstreamModelSpec back = downstream_spec_from_map(config);
            CHECK(back.family == spec.family);
            CHECK(back.preset == spec.preset);
            CHECK(back.class_count == 7);
            CHECK(back.input_size == 32);
        }
    }
}

TEST_CASE("checkpoint: model card is a sorted key=value file") {
    const std::string path = testutil::tmp_dir("ckpt_card") + "/card.txt";
    write_model_card(path, {{"family", "residual"}, {"class_count", "5"}, {"seed", "7"}});
    CHECK(slurp(path) == "class_count=5\nfamily=residual\nseed=7\n");
}

TEST_CASE("checkpoint: manifest checksum pins the canonical serialization") {
    DatasetManifest m;
    m.class_count = 2;
    m.image_size = 32;
    m.seed = 9;
    ImageRecord a, b;
    a.path = "one.png";
    a.label = 0;
    a.split = Split::train;
    b.path = "two.png";
    b.label = 1;
    b.split = Split::test;
    m.records = {a, b};

    std::string text = "classes=2;image_size=32;seed=9\n";
    for (const auto& rec : m.records)
        text += rec.path + "," + std::to_string(rec.label) + "," + to_string(rec.split) + "," +
                to_string(rec.origin) + "\n";
    CHECK(manifest_checksum(m) == fnv1a64(text.data(), text.size()));

    const uint64_t before = manifest_checksum(m);
    std::swap(m.records[0], m.records[1]);
    CHECK(manifest_checksum(m) != before);
    std::swap(m.records[0], m.records[1]);
    CHECK(manifest_checksum(m) == before);
    m.records[0].label = 1;
    CHECK(manifest_checksum(m) != before);
}
