#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffaug/backbone.hpp"
#include "diffaug/classifiers.hpp"
#include "diffaug/sample_record.hpp"
#include "diffaug/schedule.hpp"

namespace diffaug {

enum class SamplerMethod { ddpm, ddim };

SamplerMethod sampler_method_from_string(const std::string& s);
const char* to_string(SamplerMethod m);

struct SamplerConfig {
    int steps = 0;  // 1..T
    double guidance_scale = 1.0;
    SamplerMethod method = SamplerMethod::ddpm;
    double ddim_eta = 0.0;
    bool clamp_each_step = false;
};

// mean + s * variance * grad
Tensor apply_guidance(const Tensor& mean, double variance, const Tensor& grad, double s);

// Ascending subset of 0..T-1 visited when sampling with the given step
// count: uniform stride including both endpoints (steps = 1 keeps T-1 only).
std::vector<int> sample_timesteps(int T, int steps);

// One ancestral reverse step x_t -> x_{t-1} on a batch (N,1,S,S). t indexes
// sched; cond_t/cond_T are the original timestep and horizon the networks
// are conditioned on (respaced schedules keep original indices; -1 means t
// and sched.T). guidance = nullptr gives the unguided step; noise is
// required unless t = 0.
Tensor ddpm_step(const Tensor& x_t, int t, const std::vector<int>& y, const DenoiserUNet& denoiser,
                 const ParameterStore& denoiser_params, const GuidanceClassifier* guidance,
                 const ParameterStore* guidance_params, const NoiseSchedule& sched, double s,
                 const Tensor* noise, int cond_t = -1, int cond_T = -1);

// Deterministic-by-default jump x_{t_from} -> x_{t_to} on the original
// schedule; eta scales the re-noising sigma and requires noise when > 0.
Tensor ddim_step(const Tensor& x_t, int t_from, int t_to, const std::vector<int>& y,
                 const DenoiserUNet& denoiser, const ParameterStore& denoiser_params,
                 const NoiseSchedule& sched, double eta, const Tensor* noise = nullptr);

// Reverse-process generation from per-sample standard-normal starts. Noise
// streams derive from (seed, sample index), so outputs are independent of
// batch_size. step_trace, when given, receives the original-timestep
// sequence each sample visits.
std::vector<SyntheticSampleRecord> generate(const std::vector<int>& labels, const SamplerConfig& cfg,
                                            const DenoiserUNet& denoiser,
                                            const ParameterStore& denoiser_params,
                                            const GuidanceClassifier* guidance,
                                            const ParameterStore* guidance_params,
                                            const NoiseSchedule& sched, uint64_t seed, int batch_size = 32,
                                            std::vector<int>* step_trace = nullptr);

// Writes each record's image as PNG under dir (created if needed) and fills
// record.path with the file name: <prefix><index>_c<class>.png
void write_sample_images(std::vector<SyntheticSampleRecord>& records, const std::string& dir,
                         const std::string& prefix = "sample_");

}  // namespace diffaug
