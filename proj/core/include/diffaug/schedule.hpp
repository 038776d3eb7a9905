#pragma once

#include <string>
#include <vector>

#include "diffaug/tensor.hpp"

namespace diffaug {

enum class ScheduleKind { linear, cosine };
enum class VarianceKind { posterior, beta };

ScheduleKind schedule_kind_from_string(const std::string& s);
const char* to_string(ScheduleKind k);
VarianceKind variance_kind_from_string(const std::string& s);
const char* to_string(VarianceKind k);

// Immutable closed-form diffusion schedule. alpha_bars are cumulative
// products of alphas; posterior variances use the convention abar(-1) = 1,
// so posterior_variances[0] = 0.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::linear;
    int T = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> posterior_variances;

    double alpha_bar_prev(int t) const { return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t) - 1]; }
    void check_timestep(int t) const;
};

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_start = 1e-4, double beta_end = 0.02);

// Rebuilds the derived arrays for an explicit beta sequence (used by
// respaced sampling schedules and checkpoint loading).
NoiseSchedule schedule_from_betas(ScheduleKind kind, std::vector<double> betas, double beta_start,
                                  double beta_end);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

struct PosteriorParams {
    Tensor mean;
    double variance = 0.0;
};

// mean = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t);
// variance per VarianceKind, forced to 0 at t = 0.
PosteriorParams posterior_params(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                                 VarianceKind variance = VarianceKind::posterior);

// x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t), optionally clamped
// to [-1, 1].
Tensor predict_x0_from_eps(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                           bool clamp = false);

}  // namespace diffaug
