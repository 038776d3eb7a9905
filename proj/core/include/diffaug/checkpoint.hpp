#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "diffaug/classifiers.hpp"
#include "diffaug/dataset.hpp"
#include "diffaug/nn.hpp"
#include "diffaug/schedule.hpp"

namespace diffaug {

inline constexpr uint32_t kCheckpointSchemaVersion = 1;

// Flat key=value configuration block stored alongside the weights.
using ConfigMap = std::map<std::string, std::string>;

struct LoadedCheckpoint {
    uint32_t schema_version = 0;
    ConfigMap config;
    ParameterStore params;
};

// Single-archive format: magic, schema version, config text block, then
// named f64 arrays with shape headers in parameter creation order.
void save_checkpoint(const std::string& path, const ConfigMap& config, const ParameterStore& params);
LoadedCheckpoint load_checkpoint(const std::string& path);

std::string config_get(const ConfigMap& config, const std::string& key);
int config_get_int(const ConfigMap& config, const std::string& key);
double config_get_double(const ConfigMap& config, const std::string& key);
std::string format_double(double v);  // shortest round-trip decimal

uint64_t fnv1a64(const void* data, size_t size);

// Schedules persist as scalars plus a betas checksum; loading rebuilds the
// derived arrays and verifies them against the checksum.
void schedule_to_config(const NoiseSchedule& sched, ConfigMap& config);
NoiseSchedule schedule_from_config(const ConfigMap& config);

void backbone_config_to_map(const BackboneConfig& cfg, ConfigMap& config);
BackboneConfig backbone_config_from_map(const ConfigMap& config);
void guidance_config_to_map(const GuidanceConfig& cfg, ConfigMap& config);
GuidanceConfig guidance_config_from_map(const ConfigMap& config);
void downstream_spec_to_map(const DownstreamModelSpec& spec, ConfigMap& config);
DownstreamModelSpec downstream_spec_from_map(const ConfigMap& config);

// Model card: family, preset, class count, seed, training-manifest checksum.
void write_model_card(const std::string& path, const ConfigMap& fields);

// Checksum over the manifest's canonical serialization.
uint64_t manifest_checksum(const DatasetManifest& manifest);

}  // namespace diffaug
