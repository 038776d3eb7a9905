#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/backbone.hpp"
#include "diffaug/classifiers.hpp"
#include "diffaug/sampler.hpp"
#include "diffaug/schedule.hpp"
#include "diffaug/training.hpp"
#include "nlohmann/json.hpp"

namespace diffaug {

// Full default configuration; user files may override any subset but must
// not introduce unknown keys.
nlohmann::json default_experiment_config();

// Reads, strictly validates, and merges a config file over the defaults.
// An empty path yields the defaults.
nlohmann::json load_experiment_config(const std::string& path);

// Applies one dotted-path override (e.g. "training.batch_size" = "64"). The
// path must exist in the resolved config; the value is coerced to the
// existing type.
void apply_override(nlohmann::json& config, const std::string& dotted_key, const std::string& value);

// One global seed expands into per-stage seeds.
uint64_t stage_seed(const nlohmann::json& config, const std::string& stage);

NoiseSchedule schedule_from_json(const nlohmann::json& config);
BackboneConfig backbone_from_json(const nlohmann::json& config, int class_count, int image_size);
GuidanceConfig guidance_from_json(const nlohmann::json& config, int class_count, int image_size);
SamplerConfig sampler_from_json(const nlohmann::json& config);
TrainConfig train_from_json(const nlohmann::json& config, uint64_t seed);
DownstreamModelSpec classifier_from_json(const nlohmann::json& config, int class_count, int image_size);

// runs-root resolution: explicit flag > DIFFAUG_RUNS_ROOT > "runs".
std::string resolve_runs_root(const std::string& flag_value);

// Run directory with config echo, artifact manifest, and a lock file that
// rejects concurrent use.
class RunDir {
  public:
    RunDir(const std::string& root, const std::string& name);
    ~RunDir();

    RunDir(const RunDir&) = delete;
    RunDir& operator=(const RunDir&) = delete;

    const std::string& path() const { return path_; }
    // Joins against the run directory, creating parent directories.
    std::string sub(const std::string& relative) const;

    void echo_config(const nlohmann::json& resolved);
    void add_artifact(const std::string& relative, const std::string& description);
    void write_manifest();  // MANIFEST.txt from the artifacts recorded so far
    void write_error(const std::string& kind, const std::string& message);

  private:
    std::string path_;
    std::string lock_path_;
    std::vector<std::pair<std::string, std::string>> artifacts_;
};

}  // namespace diffaug
