#include "diffaug/experiment.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "diffaug/errors.hpp"

namespace diffaug {

namespace {

using nlohmann::json;

void check_known_keys(const json& user, const json& defaults, const std::string& prefix) {
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        require(defaults.contains(key), ErrorKind::ConfigError, "unknown config key: " + path);
        const json& dv = defaults.at(key);
        if (dv.is_object()) {
            require(value.is_object(), ErrorKind::ConfigError, "expected an object at: " + path);
            check_known_keys(value, dv, path);
        } else if (dv.is_number() && !value.is_number()) {
            fail(ErrorKind::ConfigError, "expected a number at: " + path);
        } else if (dv.is_string() && !value.is_string()) {
            fail(ErrorKind::ConfigError, "expected a string at: " + path);
        } else if (dv.is_boolean() && !value.is_boolean()) {
            fail(ErrorKind::ConfigError, "expected a boolean at: " + path);
        } else if (dv.is_array() && !value.is_array()) {
            fail(ErrorKind::ConfigError, "expected an array at: " + path);
        }
    }
}

void deep_merge(json& base, const json& over) {
    for (const auto& [key, value] : over.items()) {
        if (value.is_object() && base.contains(key) && base.at(key).is_object())
            deep_merge(base.at(key), value);
        else
            base[key] = value;
    }
}

std::vector<int> int_list(const json& arr, const std::string& path) {
    std::vector<int> out;
    for (const auto& v : arr) {
        require(v.is_number_integer(), ErrorKind::ConfigError, "expected integers in: " + path);
        out.push_back(v.get<int>());
    }
    return out;
}

}  // namespace

nlohmann::json default_experiment_config() {
    return json{
        {"seed", 1},
        {"dataset", {{"manifest", ""}}},
        {"schedule",
         {{"kind", "linear"}, {"timesteps", 200}, {"beta_start", 1e-4}, {"beta_end", 0.02}}},
        {"backbone",
         {{"base_channels", 64},
          {"channel_multipliers", {1, 2, 4}},
          {"blocks_per_level", 2},
          {"embedding_dim", 0},
          {"se_reduction", 16},
          {"attention_heads", 4},
          {"dropout", 0.1},
          {"norm_groups", 8},
          {"attention_resolutions", {16, 8}}}},
        {"guidance",
         {{"base_channels", 32},
          {"channel_multipliers", {1, 2, 4}},
          {"blocks_per_level", 1},
          {"embedding_dim", 0},
          {"se_reduction", 8},
          {"dropout", 0.1},
          {"norm_groups", 8}}},
        {"sampler",
         {{"steps", 200},
          {"guidance_scale", 1.0},
          {"method", "ddpm"},
          {"ddim_eta", 0.0},
          {"clamp_each_step", false},
          {"per_class", 10},
          {"batch_size", 32}}},
        {"training",
         {{"learning_rate", 1e-4},
          {"batch_size", 128},
          {"max_epochs", 50},
          {"early_stop_patience", 10},
          {"weight_decay", 0.01},
          {"ema_decay", 0.0},
          {"eval_every", 1},
          {"cosine_lr", false}}},
        {"classifier", {{"family", "residual"}, {"preset", "desk"}}},
        {"filter", {{"threshold", 0.90}, {"require_argmax_match", false}}},
        {"metrics", {{"extractor", ""}, {"split", "train"}}},
        {"inputs",
         {{"denoiser", ""},
          {"guidance", ""},
          {"pool", ""},
          {"model", ""},
          {"models", json::array()},
          {"real", ""},
          {"retained", ""},
          {"synthetic", ""},
          {"extractor", ""}}},
    };
}

nlohmann::json load_experiment_config(const std::string& path) {
    json resolved = default_experiment_config();
    if (path.empty()) return resolved;
    std::ifstream in(path);
    if (!in) fail(ErrorKind::MissingFile, "no such config file: " + path);
    json user;
    try {
        in >> user;
    } catch (const json::parse_error& e) {
        fail(ErrorKind::ParseError, "config " + path + ": " + e.what());
    }
    require(user.is_object(), ErrorKind::ParseError, "config root must be a JSON object: " + path);
    check_known_keys(user, resolved, "");
    deep_merge(resolved, user);
    return resolved;
}

void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value) {
    json* node = &config;
    size_t start = 0;
    std::vector<std::string> parts;
    while (true) {
        const size_t dot = dotted_key.find('.', start);
        parts.push_back(dotted_key.substr(start, dot - start));
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        require(node->is_object() && node->contains(parts[i]), ErrorKind::ConfigError,
                "unknown config key: " + dotted_key);
        node = &node->at(parts[i]);
    }
    const std::string& leaf = parts.back();
    require(node->is_object() && node->contains(leaf), ErrorKind::ConfigError,
            "unknown config key: " + dotted_key);
    json& target = node->at(leaf);
    json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
    if (target.is_string()) {
        target = parsed.is_string() ? parsed.get<std::string>() : value;
    } else if (target.is_boolean()) {
        require(parsed.is_boolean(), ErrorKind::ConfigError,
                "expected true/false for " + dotted_key + ", got: " + value);
        target = parsed;
    } else if (target.is_number() || target.is_array()) {
        require(!parsed.is_discarded() && (parsed.is_number() || parsed.is_array()),
                ErrorKind::ConfigError, "cannot parse value for " + dotted_key + ": " + value);
        target = parsed;
    } else {
        fail(ErrorKind::ConfigError, "cannot override non-scalar key: " + dotted_key);
    }
}

uint64_t stage_seed(const nlohmann::json& config, const std::string& stage) {
    return Rng::derive(config.at("seed").get<uint64_t>(), "stage/" + stage);
}

NoiseSchedule schedule_from_json(const nlohmann::json& config) {
    const json& s = config.at("schedule");
    return make_schedule(schedule_kind_from_string(s.at("kind").get<std::string>()),
                         s.at("timesteps").get<int>(), s.at("beta_start").get<double>(),
                         s.at("beta_end").get<double>());
}

BackboneConfig backbone_from_json(const nlohmann::json& config, int class_count, int image_size) {
    const json& b = config.at("backbone");
    BackboneConfig cfg;
    cfg.image_size = image_size;
    cfg.base_channels = b.at("base_channels").get<int>();
    cfg.channel_multipliers = int_list(b.at("channel_multipliers"), "backbone.channel_multipliers");
    cfg.blocks_per_level = b.at("blocks_per_level").get<int>();
    cfg.embedding_dim = b.at("embedding_dim").get<int>();
    cfg.se_reduction = b.at("se_reduction").get<int>();
    cfg.attention_heads = b.at("attention_heads").get<int>();
    cfg.class_count = class_count;
    cfg.dropout = b.at("dropout").get<double>();
    cfg.norm_groups = b.at("norm_groups").get<int>();
    cfg.attention_resolutions = int_list(b.at("attention_resolutions"), "backbone.attention_resolutions");
    cfg.validate();
    return cfg;
}

GuidanceConfig guidance_from_json(const nlohmann::json& config, int class_count, int image_size) {
    const json& g = config.at("guidance");
    GuidanceConfig cfg;
    cfg.image_size = image_size;
    cfg.base_channels = g.at("base_channels").get<int>();
    cfg.channel_multipliers = int_list(g.at("channel_multipliers"), "guidance.channel_multipliers");
    cfg.blocks_per_level = g.at("blocks_per_level").get<int>();
    cfg.embedding_dim = g.at("embedding_dim").get<int>();
    cfg.se_reduction = g.at("se_reduction").get<int>();
    cfg.class_count = class_count;
    cfg.dropout = g.at("dropout").get<double>();
    cfg.norm_groups = g.at("norm_groups").get<int>();
    cfg.validate();
    return cfg;
}

SamplerConfig sampler_from_json(const nlohmann::json& config) {
    const json& s = config.at("sampler");
    SamplerConfig cfg;
    cfg.steps = s.at("steps").get<int>();
    cfg.guidance_scale = s.at("guidance_scale").get<double>();
    cfg.method = sampler_method_from_string(s.at("method").get<std::string>());
    cfg.ddim_eta = s.at("ddim_eta").get<double>();
    cfg.clamp_each_step = s.at("clamp_each_step").get<bool>();
    require(cfg.guidance_scale >= 0.0, ErrorKind::InvalidRange, "sampler.guidance_scale must be >= 0");
    require(cfg.ddim_eta >= 0.0 && cfg.ddim_eta <= 1.0, ErrorKind::InvalidRange,
            "sampler.ddim_eta must be in [0,1]");
    return cfg;
}

TrainConfig train_from_json(const nlohmann::json& config, uint64_t seed) {
    const json& t = config.at("training");
    TrainConfig cfg;
    cfg.learning_rate = t.at("learning_rate").get<double>();
    cfg.batch_size = t.at("batch_size").get<int>();
    cfg.max_epochs = t.at("max_epochs").get<int>();
    cfg.early_stop_patience = t.at("early_stop_patience").get<int>();
    cfg.weight_decay = t.at("weight_decay").get<double>();
    cfg.seed = seed;
    cfg.ema_decay = t.at("ema_decay").get<double>();
    cfg.eval_every = t.at("eval_every").get<int>();
    cfg.cosine_lr = t.at("cosine_lr").get<bool>();
    cfg.validate();
    return cfg;
}

DownstreamModelSpec classifier_from_json(const nlohmann::json& config, int class_count, int image_size) {
    const json& c = config.at("classifier");
    DownstreamModelSpec spec;
    spec.family = family_from_string(c.at("family").get<std::string>());
    spec.preset = preset_from_string(c.at("preset").get<std::string>());
    spec.class_count = class_count;
    spec.input_size = image_size;
    return spec;
}

std::string resolve_runs_root(const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (const char* env = std::getenv("DIFFAUG_RUNS_ROOT"); env != nullptr && env[0] != '\0')
        return env;
    return "runs";
}

RunDir::RunDir(const std::string& root, const std::string& name) {
    require(!name.empty() && name.find('/') == std::string::npos, ErrorKind::ConfigError,
            "run name must be a plain directory name");
    path_ = (std::filesystem::path(root) / name).string();
    std::filesystem::create_directories(path_);
    for (const char* sub : {"checkpoints", "samples", "reports"})
        std::filesystem::create_directories(std::filesystem::path(path_) / sub);
    lock_path_ = (std::filesystem::path(path_) / ".lock").string();
    std::FILE* lock = std::fopen(lock_path_.c_str(), "wx");
    if (lock == nullptr)
        fail(ErrorKind::IoError,
             "run directory is locked (remove " + lock_path_ + " if no other process is using it)");
    std::fclose(lock);
}

RunDir::~RunDir() {
    std::error_code ec;
    std::filesystem::remove(lock_path_, ec);
}

std::string RunDir::sub(const std::string& relative) const {
    const std::filesystem::path p = std::filesystem::path(path_) / relative;
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    return p.string();
}

void RunDir::echo_config(const nlohmann::json& resolved) {
    std::ofstream os(sub("config.json"));
    if (!os) fail(ErrorKind::IoError, "cannot write config echo in " + path_);
    os << resolved.dump(2) << "\n";
    add_artifact("config.json", "resolved configuration echoed before any work");
}

void RunDir::add_artifact(const std::string& relative, const std::string& description) {
    artifacts_.emplace_back(relative, description);
}

void RunDir::write_manifest() {
    std::ofstream os(sub("MANIFEST.txt"));
    if (!os) fail(ErrorKind::IoError, "cannot write MANIFEST.txt in " + path_);
    for (const auto& [rel, desc] : artifacts_) os << rel << "\t" << desc << "\n";
}

void RunDir::write_error(const std::string& kind, const std::string& message) {
    nlohmann::json j{{"kind", kind}, {"message", message}};
    std::ofstream os(sub("error.json"));
    if (os) os << j.dump(2) << "\n";
}

}  // namespace diffaug
