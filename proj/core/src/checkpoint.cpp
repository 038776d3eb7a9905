#include "diffaug/checkpoint.hpp"

#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "diffaug/errors.hpp"

namespace diffaug {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'U', 'G', 'C', 'K', 'P', 'T'};

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t read_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        fail(ErrorKind::CheckpointError, "truncated checkpoint: " + path);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

uint64_t read_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8))
        fail(ErrorKind::CheckpointError, "truncated checkpoint: " + path);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

std::string read_str(std::istream& is, const std::string& path) {
    const uint32_t n = read_u32(is, path);
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), n)) fail(ErrorKind::CheckpointError, "truncated checkpoint: " + path);
    return s;
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

std::vector<int> parse_ints(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            fail(ErrorKind::CheckpointError, "bad integer list for " + key + ": " + s);
        }
    }
    return out;
}

}  // namespace

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

uint64_t fnv1a64(const void* data, size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 14695981039346656037ull;
    for (size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

void save_checkpoint(const std::string& path, const ConfigMap& config, const ParameterStore& params) {
    const std::filesystem::path fp(path);
    if (fp.has_parent_path()) std::filesystem::create_directories(fp.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::IoError, "cannot open for write: " + path);

    os.write(kMagic, sizeof(kMagic));
    write_u32(os, kCheckpointSchemaVersion);

    std::string block;
    for (const auto& [k, v] : config) block += k + "=" + v + "\n";
    write_u64(os, block.size());
    os.write(block.data(), static_cast<std::streamsize>(block.size()));

    const auto names = params.names();
    write_u32(os, static_cast<uint32_t>(names.size()));
    for (const auto& name : names) {
        const Tensor& t = params.get(name);
        write_str(os, name);
        write_str(os, "f64");
        write_u32(os, static_cast<uint32_t>(t.rank()));
        for (int d = 0; d < t.rank(); ++d) write_u32(os, static_cast<uint32_t>(t.dim(d)));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) fail(ErrorKind::IoError, "write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::MissingFile, "no such checkpoint: " + path);

    char magic[sizeof(kMagic)];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        fail(ErrorKind::CheckpointError, "bad magic: " + path);

    LoadedCheckpoint out;
    out.schema_version = read_u32(is, path);
    if (out.schema_version != kCheckpointSchemaVersion)
        fail(ErrorKind::CheckpointError,
             "unsupported schema version " + std::to_string(out.schema_version) + ": " + path);

    const uint64_t block_size = read_u64(is, path);
    std::string block(block_size, '\0');
    if (block_size > 0 && !is.read(block.data(), static_cast<std::streamsize>(block_size)))
        fail(ErrorKind::CheckpointError, "truncated checkpoint: " + path);
    std::stringstream bs(block);
    std::string line;
    while (std::getline(bs, line)) {
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) fail(ErrorKind::CheckpointError, "bad config line: " + line);
        out.config[line.substr(0, eq)] = line.substr(eq + 1);
    }

    const uint32_t count = read_u32(is, path);
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = read_str(is, path);
        const std::string dtype = read_str(is, path);
        if (dtype != "f64") fail(ErrorKind::CheckpointError, "unsupported dtype " + dtype + ": " + path);
        const uint32_t rank = read_u32(is, path);
        std::vector<int> shape(rank);
        for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(read_u32(is, path));
        Tensor& t = out.params.create(name, shape);
        if (!is.read(reinterpret_cast<char*>(t.data()),
                     static_cast<std::streamsize>(t.size() * sizeof(double))))
            fail(ErrorKind::CheckpointError, "truncated checkpoint: " + path);
    }
    return out;
}

std::string config_get(const ConfigMap& config, const std::string& key) {
    const auto it = config.find(key);
    if (it == config.end()) fail(ErrorKind::CheckpointError, "missing config key: " + key);
    return it->second;
}

int config_get_int(const ConfigMap& config, const std::string& key) {
    try {
        return std::stoi(config_get(config, key));
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorKind::CheckpointError, "bad integer for config key: " + key);
    }
}

double config_get_double(const ConfigMap& config, const std::string& key) {
    try {
        return std::stod(config_get(config, key));
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        fail(ErrorKind::CheckpointError, "bad number for config key: " + key);
    }
}

void schedule_to_config(const NoiseSchedule& sched, ConfigMap& config) {
    config["schedule.kind"] = to_string(sched.kind);
    config["schedule.timesteps"] = std::to_string(sched.T);
    config["schedule.beta_start"] = format_double(sched.beta_start);
    config["schedule.beta_end"] = format_double(sched.beta_end);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(
                      fnv1a64(sched.betas.data(), sched.betas.size() * sizeof(double))));
    config["schedule.betas_checksum"] = buf;
}

NoiseSchedule schedule_from_config(const ConfigMap& config) {
    NoiseSchedule sched =
        make_schedule(schedule_kind_from_string(config_get(config, "schedule.kind")),
                      config_get_int(config, "schedule.timesteps"),
                      config_get_double(config, "schedule.beta_start"),
                      config_get_double(config, "schedule.beta_end"));
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(
                      fnv1a64(sched.betas.data(), sched.betas.size() * sizeof(double))));
    if (config_get(config, "schedule.betas_checksum") != buf)
        fail(ErrorKind::CheckpointError, "schedule betas checksum mismatch");
    return sched;
}

void backbone_config_to_map(const BackboneConfig& cfg, ConfigMap& config) {
    config["backbone.image_size"] = std::to_string(cfg.image_size);
    config["backbone.base_channels"] = std::to_string(cfg.base_channels);
    config["backbone.channel_multipliers"] = join_ints(cfg.channel_multipliers);
    config["backbone.blocks_per_level"] = std::to_string(cfg.blocks_per_level);
    config["backbone.embedding_dim"] = std::to_string(cfg.embedding_dim);
    config["backbone.se_reduction"] = std::to_string(cfg.se_reduction);
    config["backbone.attention_heads"] = std::to_string(cfg.attention_heads);
    config["backbone.class_count"] = std::to_string(cfg.class_count);
    config["backbone.dropout"] = format_double(cfg.dropout);
    config["backbone.norm_groups"] = std::to_string(cfg.norm_groups);
    config["backbone.attention_resolutions"] = join_ints(cfg.attention_resolutions);
}

BackboneConfig backbone_config_from_map(const ConfigMap& config) {
    BackboneConfig cfg;
    cfg.image_size = config_get_int(config, "backbone.image_size");
    cfg.base_channels = config_get_int(config, "backbone.base_channels");
    cfg.channel_multipliers =
        parse_ints(config_get(config, "backbone.channel_multipliers"), "backbone.channel_multipliers");
    cfg.blocks_per_level = config_get_int(config, "backbone.blocks_per_level");
    cfg.embedding_dim = config_get_int(config, "backbone.embedding_dim");
    cfg.se_reduction = config_get_int(config, "backbone.se_reduction");
    cfg.attention_heads = config_get_int(config, "backbone.attention_heads");
    cfg.class_count = config_get_int(config, "backbone.class_count");
    cfg.dropout = config_get_double(config, "backbone.dropout");
    cfg.norm_groups = config_get_int(config, "backbone.norm_groups");
    cfg.attention_resolutions =
        parse_ints(config_get(config, "backbone.attention_resolutions"), "backbone.attention_resolutions");
    cfg.validate();
    return cfg;
}

void guidance_config_to_map(const GuidanceConfig& cfg, ConfigMap& config) {
    config["guidance.image_size"] = std::to_string(cfg.image_size);
    config["guidance.base_channels"] = std::to_string(cfg.base_channels);
    config["guidance.channel_multipliers"] = join_ints(cfg.channel_multipliers);
    config["guidance.blocks_per_level"] = std::to_string(cfg.blocks_per_level);
    config["guidance.embedding_dim"] = std::to_string(cfg.embedding_dim);
    config["guidance.se_reduction"] = std::to_string(cfg.se_reduction);
    config["guidance.class_count"] = std::to_string(cfg.class_count);
    config["guidance.dropout"] = format_double(cfg.dropout);
    config["guidance.norm_groups"] = std::to_string(cfg.norm_groups);
}

GuidanceConfig guidance_config_from_map(const ConfigMap& config) {
    GuidanceConfig cfg;
    cfg.image_size = config_get_int(config, "guidance.image_size");
    cfg.base_channels = config_get_int(config, "guidance.base_channels");
    cfg.channel_multipliers =
        parse_ints(config_get(config, "guidance.channel_multipliers"), "guidance.channel_multipliers");
    cfg.blocks_per_level = config_get_int(config, "guidance.blocks_per_level");
    cfg.embedding_dim = config_get_int(config, "guidance.embedding_dim");
    cfg.se_reduction = config_get_int(config, "guidance.se_reduction");
    cfg.class_count = config_get_int(config, "guidance.class_count");
    cfg.dropout = config_get_double(config, "guidance.dropout");
    cfg.norm_groups = config_get_int(config, "guidance.norm_groups");
    cfg.validate();
    return cfg;
}

void downstream_spec_to_map(const DownstreamModelSpec& spec, ConfigMap& config) {
    config["model.family"] = to_string(spec.family);
    config["model.preset"] = to_string(spec.preset);
    config["model.class_count"] = std::to_string(spec.class_count);
    config["model.input_size"] = std::to_string(spec.input_size);
}

DownstreamModelSpec downstream_spec_from_map(const ConfigMap& config) {
    DownstreamModelSpec spec;
    spec.family = family_from_string(config_get(config, "model.family"));
    spec.preset = preset_from_string(config_get(config, "model.preset"));
    spec.class_count = config_get_int(config, "model.class_count");
    spec.input_size = config_get_int(config, "model.input_size");
    return spec;
}

void write_model_card(const std::string& path, const ConfigMap& fields) {
    const std::filesystem::path fp(path);
    if (fp.has_parent_path()) std::filesystem::create_directories(fp.parent_path());
    std::ofstream os(path);
    if (!os) fail(ErrorKind::IoError, "cannot open for write: " + path);
    for (const auto& [k, v] : fields) os << k << "=" << v << "\n";
    if (!os) fail(ErrorKind::IoError, "write failed: " + path);
}

uint64_t manifest_checksum(const DatasetManifest& manifest) {
    std::string text = "classes=" + std::to_string(manifest.class_count) +
                       ";image_size=" + std::to_string(manifest.image_size) +
                       ";seed=" + std::to_string(manifest.seed) + "\n";
    for (const auto& rec : manifest.records)
        text += rec.path + "," + std::to_string(rec.label) + "," + to_string(rec.split) + "," +
                to_string(rec.origin) + "\n";
    return fnv1a64(text.data(), text.size());
}

}  // namespace diffaug
