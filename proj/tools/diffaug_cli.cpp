// Command line front end chaining the pipeline stages: dataset preparation,
// diffusion and guidance training, guided sampling, confidence filtering,
// fusion, downstream training, evaluation, and FID measurement.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "nlohmann/json.hpp"

#include "diffaug/checkpoint.hpp"
#include "diffaug/dataset.hpp"
#include "diffaug/errors.hpp"
#include "diffaug/experiment.hpp"
#include "diffaug/filtering.hpp"
#include "diffaug/metrics.hpp"
#include "diffaug/sample_record.hpp"
#include "diffaug/sampler.hpp"
#include "diffaug/toy_glyphs.hpp"
#include "diffaug/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace diffaug;

namespace {

struct UsageError {
    std::string message;
};

struct Common {
    std::string config_path;
    std::string runs_root;
    std::string run_name;
};

void add_common(CLI::App* cmd, Common& c, const std::string& default_run) {
    c.run_name = default_run;
    cmd->add_option("--config", c.config_path, "experiment config JSON (defaults apply when omitted)");
    cmd->add_option("--runs-root", c.runs_root, "root for run directories (or DIFFAUG_RUNS_ROOT)");
    cmd->add_option("--run", c.run_name, "run directory name under the runs root");
    cmd->allow_extras();
}

// Leftover tokens are dotted config overrides: --section.key value or
// --section.key=value.
std::vector<std::pair<std::string, std::string>> parse_override_tokens(
    const std::vector<std::string>& extras) {
    std::vector<std::pair<std::string, std::string>> out;
    for (size_t i = 0; i < extras.size(); ++i) {
        std::string tok = extras[i];
        if (tok.rfind("--", 0) != 0 || tok.find('.') == std::string::npos)
            throw UsageError{"unrecognized argument: " + tok};
        tok.erase(0, 2);
        if (const size_t eq = tok.find('='); eq != std::string::npos) {
            out.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
        } else {
            if (i + 1 == extras.size()) throw UsageError{"missing value for --" + tok};
            out.emplace_back(tok, extras[++i]);
        }
    }
    return out;
}

json make_config(const CLI::App* cmd, const Common& c) {
    json cfg = load_experiment_config(c.config_path);
    for (const auto& [key, value] : parse_override_tokens(cmd->remaining())) {
        try {
            apply_override(cfg, key, value);
        } catch (const Error& e) {
            throw UsageError{e.what()};
        }
    }
    return cfg;
}

void fold(json& cfg, const char* section, const char* key, const std::string& value) {
    if (!value.empty()) cfg[section][key] = value;
}

std::string require_input(const json& cfg, const char* section, const char* key,
                          const std::string& flag) {
    const std::string v = cfg.at(section).at(key).get<std::string>();
    if (v.empty()) throw UsageError{"missing " + flag + " (config key " + section + "." + key + ")"};
    return v;
}

std::string hex16(uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t params_checksum(const ParameterStore& ps) {
    std::string acc;
    for (const auto& name : ps.names()) {
        const Tensor& t = ps.get(name);
        acc += name + "=" +
               hex16(fnv1a64(t.data(), static_cast<size_t>(t.size()) * sizeof(double))) + "\n";
    }
    return fnv1a64(acc.data(), acc.size());
}

fs::path resolve_against(const std::string& stored, const fs::path& base_dir) {
    const fs::path p(stored);
    return p.is_absolute() ? p : base_dir / p;
}

std::string relativize(const fs::path& target, const fs::path& base) {
    std::error_code ec;
    const fs::path abs_target = fs::absolute(target).lexically_normal();
    const fs::path rel = fs::relative(abs_target, fs::absolute(base), ec);
    if (ec || rel.empty()) return abs_target.string();
    return rel.string();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::IoError, "cannot open for write: " + path);
    os << text;
    if (!text.empty() && text.back() != '\n') os << "\n";
    if (!os) fail(ErrorKind::IoError, "write failed: " + path);
}

void print_block(const std::string& text) {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << "\n";
}

void stamp(ConfigMap& cm, const char* kind, uint64_t seed, const DatasetManifest& manifest) {
    cm["kind"] = kind;
    cm["seed"] = std::to_string(seed);
    cm["manifest_checksum"] = hex16(manifest_checksum(manifest));
}

struct LoadedClassifier {
    DownstreamModelSpec spec;
    ParameterStore params;
    ConfigMap config;
    std::string id;
};

LoadedClassifier load_classifier(const std::string& path) {
    LoadedCheckpoint ck = load_checkpoint(path);
    require(config_get(ck.config, "kind") == "classifier", ErrorKind::CheckpointError,
            path + " is not a classifier checkpoint");
    LoadedClassifier lc;
    lc.spec = downstream_spec_from_map(ck.config);
    lc.id = ck.config.count("model_id") != 0
                ? ck.config.at("model_id")
                : std::string(to_string(lc.spec.family)) + "-" + to_string(lc.spec.preset);
    lc.params = std::move(ck.params);
    lc.config = std::move(ck.config);
    return lc;
}

template <typename Fn>
void with_run(const Common& c, const json& cfg, Fn&& body) {
    RunDir run(resolve_runs_root(c.runs_root), c.run_name);
    try {
        run.echo_config(cfg);
        body(run);
        run.write_manifest();
    } catch (const Error& e) {
        const std::string what = e.what();
        const std::string prefix = std::string(error_kind_name(e.kind())) + ": ";
        run.write_error(error_kind_name(e.kind()),
                        what.rfind(prefix, 0) == 0 ? what.substr(prefix.size()) : what);
        throw;
    }
}

// --- prepare-data ----------------------------------------------------------

struct PrepareOpts {
    bool toy = false;
    std::string out;
    std::string manifest;
    int classes = 5;
    int per_class = 200;
    uint64_t seed = 1;
    int image_size = 32;
    std::vector<double> fractions{0.8, 0.1, 0.1};
};

void cmd_prepare_data(const PrepareOpts& o) {
    if (o.fractions.size() != 3) throw UsageError{"--fractions takes train,val,test"};
    const std::array<double, 3> fr{o.fractions[0], o.fractions[1], o.fractions[2]};
    if (o.toy == !o.manifest.empty())
        throw UsageError{"use exactly one of --toy or --manifest <path>"};

    DatasetManifest result;
    if (o.toy) {
        result = make_toy_glyph_dataset(o.out, o.classes, o.per_class, o.seed, o.image_size, fr);
    } else {
        const DatasetManifest src = load_manifest(o.manifest);
        std::vector<ImageRecord> records = src.records;
        for (auto& r : records) r.path = fs::absolute(src.resolve(r)).lexically_normal().string();
        result = stratified_split(records, fr, o.seed, src.class_count, src.image_size);
        fs::create_directories(o.out);
        for (auto& r : result.records) r.path = relativize(r.path, o.out);
        result.base_dir = o.out;
        save_manifest(result, (fs::path(o.out) / "manifest.csv").string());
    }
    const auto sc = result.split_counts();
    const json line{{"manifest", (fs::path(o.out) / "manifest.csv").string()},
                    {"images", result.records.size()},
                    {"classes", result.class_count},
                    {"image_size", result.image_size},
                    {"splits", json::array({sc[0], sc[1], sc[2]})}};
    std::cout << line.dump() << "\n";
}

// --- train-diffusion / train-guidance ---------------------------------------

void cmd_train_diffusion(const CLI::App* cmd, const Common& c, const std::string& manifest_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "dataset", "manifest", manifest_flag);
    const std::string mpath = require_input(cfg, "dataset", "manifest", "--manifest");
    with_run(c, cfg, [&](RunDir& run) {
        const DatasetManifest manifest = load_manifest(mpath);
        const NoiseSchedule sched = schedule_from_json(cfg);
        const BackboneConfig bb = backbone_from_json(cfg, manifest.class_count, manifest.image_size);
        const TrainConfig tc = train_from_json(cfg, stage_seed(cfg, "train-diffusion"));
        const TrainResult res = train_denoiser(manifest, sched, bb, tc);

        ConfigMap cm;
        stamp(cm, "denoiser", tc.seed, manifest);
        schedule_to_config(sched, cm);
        backbone_config_to_map(bb, cm);
        save_checkpoint(run.sub("checkpoints/denoiser.ckpt"), cm, res.params);
        save_run_log(res.log, run.sub("reports/log.jsonl"), run.sub("reports/summary.json"));
        run.add_artifact("checkpoints/denoiser.ckpt", "denoiser weights with schedule scalars");
        run.add_artifact("reports/log.jsonl", "per-epoch training records");
        run.add_artifact("reports/summary.json", "best epoch and stop reason");

        const json line{{"checkpoint", run.sub("checkpoints/denoiser.ckpt")},
                        {"epochs", res.log.records.size()},
                        {"best_epoch", res.log.best_epoch},
                        {"stop_reason", to_string(res.log.stop_reason)}};
        std::cout << line.dump() << "\n";
    });
}

void cmd_train_guidance(const CLI::App* cmd, const Common& c, const std::string& manifest_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "dataset", "manifest", manifest_flag);
    const std::string mpath = require_input(cfg, "dataset", "manifest", "--manifest");
    with_run(c, cfg, [&](RunDir& run) {
        const DatasetManifest manifest = load_manifest(mpath);
        const NoiseSchedule sched = schedule_from_json(cfg);
        const GuidanceConfig gc = guidance_from_json(cfg, manifest.class_count, manifest.image_size);
        const TrainConfig tc = train_from_json(cfg, stage_seed(cfg, "train-guidance"));
        const TrainResult res = train_guidance_classifier(manifest, sched, gc, tc);

        ConfigMap cm;
        stamp(cm, "guidance", tc.seed, manifest);
        schedule_to_config(sched, cm);
        guidance_config_to_map(gc, cm);
        save_checkpoint(run.sub("checkpoints/guidance.ckpt"), cm, res.params);
        save_run_log(res.log, run.sub("reports/log.jsonl"), run.sub("reports/summary.json"));
        run.add_artifact("checkpoints/guidance.ckpt", "noisy-image classifier weights");
        run.add_artifact("reports/log.jsonl", "per-epoch training records");
        run.add_artifact("reports/summary.json", "best epoch and stop reason");

        const json line{{"checkpoint", run.sub("checkpoints/guidance.ckpt")},
                        {"epochs", res.log.records.size()},
                        {"best_epoch", res.log.best_epoch},
                        {"stop_reason", to_string(res.log.stop_reason)}};
        std::cout << line.dump() << "\n";
    });
}

// --- sample ------------------------------------------------------------------

void cmd_sample(const CLI::App* cmd, const Common& c, const std::string& denoiser_flag,
                const std::string& guidance_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "inputs", "denoiser", denoiser_flag);
    fold(cfg, "inputs", "guidance", guidance_flag);
    const std::string dpath = require_input(cfg, "inputs", "denoiser", "--denoiser");
    const std::string gpath = cfg.at("inputs").at("guidance").get<std::string>();
    with_run(c, cfg, [&](RunDir& run) {
        const LoadedCheckpoint dck = load_checkpoint(dpath);
        require(config_get(dck.config, "kind") == "denoiser", ErrorKind::CheckpointError,
                dpath + " is not a denoiser checkpoint");
        const NoiseSchedule sched = schedule_from_config(dck.config);
        const BackboneConfig bb = backbone_config_from_map(dck.config);
        const DenoiserUNet denoiser(bb);

        std::optional<LoadedCheckpoint> gck;
        std::optional<GuidanceClassifier> gmodel;
        if (!gpath.empty()) {
            gck = load_checkpoint(gpath);
            require(config_get(gck->config, "kind") == "guidance", ErrorKind::CheckpointError,
                    gpath + " is not a guidance checkpoint");
            const GuidanceConfig gc = guidance_config_from_map(gck->config);
            require(gc.class_count == bb.class_count && gc.image_size == bb.image_size,
                    ErrorKind::ClassMismatch, "guidance checkpoint does not match the denoiser");
            gmodel.emplace(gc);
        }

        SamplerConfig scfg = sampler_from_json(cfg);
        if (scfg.steps <= 0) scfg.steps = sched.T;
        const int per_class = cfg.at("sampler").at("per_class").get<int>();
        const int batch = cfg.at("sampler").at("batch_size").get<int>();
        require(per_class >= 1, ErrorKind::InvalidRange, "sampler.per_class must be >= 1");
        require(batch >= 1, ErrorKind::InvalidRange, "sampler.batch_size must be >= 1");

        std::vector<int> labels;
        labels.reserve(static_cast<size_t>(bb.class_count) * per_class);
        for (int cls = 0; cls < bb.class_count; ++cls)
            labels.insert(labels.end(), static_cast<size_t>(per_class), cls);

        const uint64_t seed = stage_seed(cfg, "sample");
        std::vector<SyntheticSampleRecord> records =
            generate(labels, scfg, denoiser, dck.params, gmodel ? &*gmodel : nullptr,
                     gck ? &gck->params : nullptr, sched, seed, batch);
        write_sample_images(records, run.sub("samples"));
        save_sidecar(run.sub("samples/sidecar.jsonl"), records);
        run.add_artifact("samples/sidecar.jsonl", "per-sample provenance records");
        run.add_artifact("samples/", "generated PNG images");

        const json line{{"sidecar", run.sub("samples/sidecar.jsonl")},
                        {"samples", records.size()},
                        {"classes", bb.class_count},
                        {"per_class", per_class},
                        {"method", to_string(scfg.method)},
                        {"steps", scfg.steps},
                        {"guidance_scale", records.empty() ? 0.0 : records.front().guidance_scale},
                        {"seed", seed}};
        write_text(run.sub("reports/sample_report.json"), line.dump(2));
        run.add_artifact("reports/sample_report.json", "generation summary");
        std::cout << line.dump() << "\n";
    });
}

// --- filter ------------------------------------------------------------------

void cmd_filter(const CLI::App* cmd, const Common& c, const std::string& pool_flag,
                const std::string& model_flag, const CLI::Option* thr_opt, double thr_value,
                bool argmax_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "inputs", "pool", pool_flag);
    fold(cfg, "inputs", "model", model_flag);
    if (thr_opt->count() != 0) cfg["filter"]["threshold"] = thr_value;
    if (argmax_flag) cfg["filter"]["require_argmax_match"] = true;
    const std::string pool_path = require_input(cfg, "inputs", "pool", "--pool");
    const std::string model_path = require_input(cfg, "inputs", "model", "--model");
    with_run(c, cfg, [&](RunDir& run) {
        const LoadedClassifier lc = load_classifier(model_path);
        const std::vector<SyntheticSampleRecord> pool =
            load_sidecar(pool_path, lc.spec.input_size, /*load_images=*/true);
        const DownstreamModel model(lc.spec);
        FilterResult fr =
            filter_batch(pool, model, lc.params, lc.id, cfg.at("filter").at("threshold").get<double>(),
                         cfg.at("filter").at("require_argmax_match").get<bool>());

        const fs::path pool_dir = fs::absolute(pool_path).parent_path();
        const fs::path out_dir = fs::path(run.path()) / "samples";
        for (auto* part : {&fr.retained, &fr.rejected})
            for (auto& rec : *part) rec.path = relativize(resolve_against(rec.path, pool_dir), out_dir);

        save_sidecar(run.sub("samples/retained.jsonl"), fr.retained);
        save_sidecar(run.sub("samples/rejected.jsonl"), fr.rejected);
        write_text(run.sub("reports/filter_report.json"), filter_report_json(fr.report));
        run.add_artifact("samples/retained.jsonl", "records passing the confidence gate");
        run.add_artifact("samples/rejected.jsonl", "records failing the confidence gate");
        run.add_artifact("reports/filter_report.json", "retention statistics");
        print_block(render_filter_report(fr.report));
    });
}

// --- fuse --------------------------------------------------------------------

void cmd_fuse(const CLI::App* cmd, const Common& c, const std::string& real_flag,
              const std::string& retained_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "inputs", "real", real_flag);
    fold(cfg, "inputs", "retained", retained_flag);
    const std::string real_path = require_input(cfg, "inputs", "real", "--real");
    const std::string retained_path = require_input(cfg, "inputs", "retained", "--retained");
    with_run(c, cfg, [&](RunDir& run) {
        const DatasetManifest real = load_manifest(real_path);
        std::vector<SyntheticSampleRecord> retained =
            load_sidecar(retained_path, real.image_size, /*load_images=*/false);

        DatasetManifest real_abs = real;
        real_abs.base_dir.clear();
        for (auto& r : real_abs.records)
            r.path = fs::absolute(real.resolve(r)).lexically_normal().string();
        const fs::path sidecar_dir = fs::absolute(retained_path).parent_path();
        for (auto& r : retained)
            r.path = fs::absolute(resolve_against(r.path, sidecar_dir)).lexically_normal().string();

        DatasetManifest fused = fuse_datasets(real_abs, retained);
        const std::string out_dir = run.sub("fused");
        fs::create_directories(out_dir);
        for (auto& r : fused.records) r.path = relativize(r.path, out_dir);
        fused.base_dir = out_dir;
        const std::string out_path = (fs::path(out_dir) / "manifest.csv").string();
        save_manifest(fused, out_path);
        run.add_artifact("fused/manifest.csv", "real train split plus retained synthetic records");

        const auto sc = fused.split_counts();
        const json line{{"fused_manifest", out_path},
                        {"records", fused.records.size()},
                        {"synthetic_added", retained.size()},
                        {"splits", json::array({sc[0], sc[1], sc[2]})}};
        std::cout << line.dump() << "\n";
    });
}

// --- train-classifier ----------------------------------------------------------

void cmd_train_classifier(const CLI::App* cmd, const Common& c, const std::string& manifest_flag,
                          const std::string& model_id_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "dataset", "manifest", manifest_flag);
    fold(cfg, "classifier", "model_id", model_id_flag);
    const std::string mpath = require_input(cfg, "dataset", "manifest", "--manifest");
    with_run(c, cfg, [&](RunDir& run) {
        const DatasetManifest manifest = load_manifest(mpath);
        const DownstreamModelSpec spec = classifier_from_json(cfg, manifest.class_count, manifest.image_size);
        const TrainConfig tc = train_from_json(cfg, stage_seed(cfg, "train-classifier"));
        const DownstreamTrainResult res = train_downstream(manifest, spec, tc);

        ConfigMap cm;
        stamp(cm, "classifier", tc.seed, manifest);
        downstream_spec_to_map(spec, cm);
        const std::string cfg_id = cfg.at("classifier").at("model_id").get<std::string>();
        cm["model_id"] = cfg_id.empty() ? std::string(to_string(spec.family)) + "-" + to_string(spec.preset)
                                        : cfg_id;
        save_checkpoint(run.sub("checkpoints/classifier.ckpt"), cm, res.params);
        write_model_card(run.sub("checkpoints/model_card.txt"), cm);
        save_run_log(res.log, run.sub("reports/log.jsonl"), run.sub("reports/summary.json"));
        write_text(run.sub("reports/test_report.json"), eval_report_json(res.test_report));
        run.add_artifact("checkpoints/classifier.ckpt", "downstream classifier weights");
        run.add_artifact("checkpoints/model_card.txt", "model identity and training provenance");
        run.add_artifact("reports/log.jsonl", "per-epoch training records");
        run.add_artifact("reports/summary.json", "best epoch and stop reason");
        run.add_artifact("reports/test_report.json", "held-out test metrics");

        print_block(render_eval_report(res.test_report));
        const json line{{"checkpoint", run.sub("checkpoints/classifier.ckpt")},
                        {"model_id", cm["model_id"]},
                        {"test_accuracy", res.test_report.accuracy},
                        {"best_epoch", res.log.best_epoch},
                        {"stop_reason", to_string(res.log.stop_reason)}};
        std::cout << line.dump() << "\n";
    });
}

// --- evaluate ------------------------------------------------------------------

void cmd_evaluate(const CLI::App* cmd, const Common& c, const std::vector<std::string>& model_flags,
                  const std::string& manifest_flag, const std::string& split_flag, bool csv) {
    json cfg = make_config(cmd, c);
    if (!model_flags.empty()) cfg["inputs"]["models"] = model_flags;
    fold(cfg, "dataset", "manifest", manifest_flag);
    cfg["metrics"]["split"] = split_flag;
    const auto models = cfg.at("inputs").at("models").get<std::vector<std::string>>();
    if (models.empty()) throw UsageError{"at least one --model is required"};
    const std::string mpath = require_input(cfg, "dataset", "manifest", "--manifest");

    const DatasetManifest manifest = load_manifest(mpath);
    const Split split = split_from_string(cfg.at("metrics").at("split").get<std::string>());
    const LoadedSplit data = load_split(manifest, split);

    std::vector<PerformanceRow> rows;
    for (const auto& path : models) {
        const LoadedClassifier lc = load_classifier(path);
        require(lc.spec.class_count == manifest.class_count, ErrorKind::ClassMismatch,
                path + ": classifier classes do not match the manifest");
        const DownstreamModel model(lc.spec);
        const EvalReport rep = evaluate_downstream(model, lc.params, data, manifest.class_count);
        std::string label = lc.id;
        for (int n = 2; std::any_of(rows.begin(), rows.end(),
                                    [&](const PerformanceRow& r) { return r.model == label; });
             ++n)
            label = lc.id + "#" + std::to_string(n);
        rows.push_back({label, rep});
    }

    if (rows.size() == 1)
        print_block(render_eval_report(rows.front().report));
    else
        print_block(render_performance_table(rows, csv));
    for (const auto& row : rows) {
        json j = json::parse(eval_report_json(row.report));
        j["model"] = row.model;
        j["split"] = to_string(split);
        std::cout << j.dump() << "\n";
    }
}

// --- fid -------------------------------------------------------------------------

void cmd_fid(const CLI::App* cmd, const Common& c, const std::string& real_flag,
             const std::string& synthetic_flag, const std::string& extractor_flag,
             const std::string& split_flag) {
    json cfg = make_config(cmd, c);
    fold(cfg, "inputs", "real", real_flag);
    fold(cfg, "inputs", "synthetic", synthetic_flag);
    fold(cfg, "inputs", "extractor", extractor_flag);
    if (!split_flag.empty()) cfg["metrics"]["split"] = split_flag;
    const std::string real_path = require_input(cfg, "inputs", "real", "--real");
    const std::string synth_path = require_input(cfg, "inputs", "synthetic", "--synthetic");
    const std::string ex_path = require_input(cfg, "inputs", "extractor", "--extractor");

    const DatasetManifest manifest = load_manifest(real_path);
    const Split split = split_from_string(cfg.at("metrics").at("split").get<std::string>());
    const std::vector<Tensor> real_images = load_split(manifest, split).images;
    const std::vector<SyntheticSampleRecord> synth =
        load_sidecar(synth_path, manifest.image_size, /*load_images=*/true);
    std::vector<Tensor> synth_images;
    synth_images.reserve(synth.size());
    for (const auto& rec : synth) synth_images.push_back(rec.image);

    const LoadedClassifier lc = load_classifier(ex_path);
    require(lc.spec.input_size == manifest.image_size, ErrorKind::DimensionMismatch,
            "extractor input size does not match the manifest image size");
    const std::string label = cfg.at("metrics").at("extractor").get<std::string>();
    const std::string ex_id =
        label.empty() ? lc.id + "#" + hex16(params_checksum(lc.params)) : label;
    const DownstreamModel extractor(lc.spec);

    const FidReport rep = fid_between_sets(real_images, synth_images, extractor, lc.params, ex_id);
    if (rep.low_sample_warning)
        std::cerr << "warning: a set is smaller than feature_dim + 1; the covariance "
                     "estimate is rank-deficient\n";
    std::cout << json::parse(fid_report_json(rep)).dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"confidence-guided diffusion augmentation for 32x32 grayscale glyphs"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "diffaug 0.1.0");

    PrepareOpts prep;
    auto* pd = app.add_subcommand("prepare-data", "build the toy glyph dataset or re-split a manifest");
    pd->add_flag("--toy", prep.toy, "render the procedural glyph dataset");
    pd->add_option("--out", prep.out, "output dataset directory")->required();
    pd->add_option("--manifest", prep.manifest, "existing manifest to re-split");
    pd->add_option("--classes", prep.classes, "glyph classes (toy mode)");
    pd->add_option("--per-class", prep.per_class, "images per class (toy mode)");
    pd->add_option("--seed", prep.seed, "dataset seed");
    pd->add_option("--image-size", prep.image_size, "square image size (toy mode)");
    pd->add_option("--fractions", prep.fractions, "train,val,test fractions")->delimiter(',');
    pd->callback([&] { cmd_prepare_data(prep); });

    Common td_c;
    std::string td_manifest;
    auto* td = app.add_subcommand("train-diffusion", "train the denoiser on a dataset manifest");
    add_common(td, td_c, "train-diffusion");
    td->add_option("--manifest", td_manifest, "dataset manifest (overrides dataset.manifest)");
    td->callback([&] { cmd_train_diffusion(td, td_c, td_manifest); });

    Common tg_c;
    std::string tg_manifest;
    auto* tg = app.add_subcommand("train-guidance", "train the noisy-image guidance classifier");
    add_common(tg, tg_c, "train-guidance");
    tg->add_option("--manifest", tg_manifest, "dataset manifest (overrides dataset.manifest)");
    tg->callback([&] { cmd_train_guidance(tg, tg_c, tg_manifest); });

    Common sa_c;
    std::string sa_denoiser, sa_guidance;
    auto* sa = app.add_subcommand("sample", "generate class-conditional samples from a checkpoint");
    add_common(sa, sa_c, "sample");
    sa->add_option("--denoiser", sa_denoiser, "denoiser checkpoint");
    sa->add_option("--guidance", sa_guidance, "guidance classifier checkpoint (optional)");
    sa->callback([&] { cmd_sample(sa, sa_c, sa_denoiser, sa_guidance); });

    Common fi_c;
    std::string fi_pool, fi_model;
    double fi_threshold = 0.90;
    bool fi_argmax = false;
    auto* fi = app.add_subcommand("filter", "apply the confidence gate to a sample pool");
    add_common(fi, fi_c, "filter");
    fi->add_option("--pool", fi_pool, "sidecar of candidate samples");
    fi->add_option("--model", fi_model, "filtering classifier checkpoint");
    auto* fi_thr = fi->add_option("--threshold", fi_threshold, "retention threshold on p(intended)");
    fi->add_flag("--require-argmax-match", fi_argmax, "also require argmax == intended class");
    fi->callback([&] { cmd_filter(fi, fi_c, fi_pool, fi_model, fi_thr, fi_threshold, fi_argmax); });

    Common fu_c;
    std::string fu_real, fu_retained;
    auto* fu = app.add_subcommand("fuse", "union real train records with retained synthetic samples");
    add_common(fu, fu_c, "fuse");
    fu->add_option("--real", fu_real, "real dataset manifest");
    fu->add_option("--retained", fu_retained, "retained sidecar from filter");
    fu->callback([&] { cmd_fuse(fu, fu_c, fu_real, fu_retained); });

    Common tc_c;
    std::string tc_manifest, tc_model_id;
    auto* tc = app.add_subcommand("train-classifier", "train a downstream recognition model");
    add_common(tc, tc_c, "train-classifier");
    tc->add_option("--manifest", tc_manifest, "dataset manifest (overrides dataset.manifest)");
    tc->add_option("--model-id", tc_model_id, "label stored in the checkpoint (default family-preset)");
    tc->callback([&] { cmd_train_classifier(tc, tc_c, tc_manifest, tc_model_id); });

    Common ev_c;
    std::vector<std::string> ev_models;
    std::string ev_manifest, ev_split = "test";
    bool ev_csv = false;
    auto* ev = app.add_subcommand("evaluate", "report classifier metrics on a manifest split");
    add_common(ev, ev_c, "evaluate");
    ev->add_option("--model", ev_models, "classifier checkpoint (repeatable for a comparison table)");
    ev->add_option("--manifest", ev_manifest, "dataset manifest");
    ev->add_option("--split", ev_split, "split to evaluate (train|val|test)");
    ev->add_flag("--csv", ev_csv, "emit the comparison table as CSV");
    ev->callback([&] { cmd_evaluate(ev, ev_c, ev_models, ev_manifest, ev_split, ev_csv); });

    Common fd_c;
    std::string fd_real, fd_synth, fd_extractor, fd_split;
    auto* fd = app.add_subcommand("fid", "Frechet distance between real and synthetic feature sets");
    add_common(fd, fd_c, "fid");
    fd->add_option("--real", fd_real, "real dataset manifest");
    fd->add_option("--synthetic", fd_synth, "synthetic sample sidecar");
    fd->add_option("--extractor", fd_extractor, "feature extractor checkpoint");
    fd->add_option("--split", fd_split, "real split to compare against (default train)");
    fd->callback([&] { cmd_fid(fd, fd_c, fd_real, fd_synth, fd_extractor, fd_split); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.message << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
