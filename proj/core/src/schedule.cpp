#include "diffaug/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace diffaug {

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::linear;
    if (s == "cosine") return ScheduleKind::cosine;
    fail(ErrorKind::ConfigError, "unknown schedule kind: " + s);
}

const char* to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

VarianceKind variance_kind_from_string(const std::string& s) {
    if (s == "posterior") return VarianceKind::posterior;
    if (s == "beta") return VarianceKind::beta;
    fail(ErrorKind::ConfigError, "unknown variance kind: " + s);
}

const char* to_string(VarianceKind k) { return k == VarianceKind::posterior ? "posterior" : "beta"; }

void NoiseSchedule::check_timestep(int t) const {
    require(t >= 0 && t < T, ErrorKind::TimestepOutOfRange,
            "timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + ")");
}

NoiseSchedule schedule_from_betas(ScheduleKind kind, std::vector<double> betas, double beta_start,
                                  double beta_end) {
    NoiseSchedule s;
    s.kind = kind;
    s.T = static_cast<int>(betas.size());
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.betas = std::move(betas);
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    s.posterior_variances.resize(s.betas.size());
    double abar = 1.0;
    for (size_t t = 0; t < s.betas.size(); ++t) {
        require(s.betas[t] > 0.0 && s.betas[t] < 1.0, ErrorKind::InvalidRange,
                "beta out of (0,1) at t=" + std::to_string(t));
        s.alphas[t] = 1.0 - s.betas[t];
        const double abar_prev = abar;
        abar *= s.alphas[t];
        s.alpha_bars[t] = abar;
        s.posterior_variances[t] = s.betas[t] * (1.0 - abar_prev) / (1.0 - abar);
    }
    return s;
}

NoiseSchedule make_schedule(ScheduleKind kind, int T, double beta_start, double beta_end) {
    require(T >= 1, ErrorKind::NonPositiveT, "T must be >= 1, got " + std::to_string(T));
    std::vector<double> betas(static_cast<size_t>(T));
    if (kind == ScheduleKind::linear) {
        require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorKind::InvalidRange,
                "need 0 < beta_start <= beta_end < 1");
        for (int t = 0; t < T; ++t)
            betas[static_cast<size_t>(t)] =
                (T == 1 || t == 0) ? beta_start
                : (t == T - 1)     ? beta_end
                                   : beta_start + (beta_end - beta_start) * t / (T - 1);
    } else {
        auto f = [T](double t) {
            const double v = std::cos((t / T + 0.008) / 1.008 * std::numbers::pi / 2.0);
            return v * v;
        };
        const double f0 = f(0.0);
        double abar_prev = 1.0;
        for (int t = 0; t < T; ++t) {
            const double abar = f(t + 1.0) / f0;
            betas[static_cast<size_t>(t)] = std::min(1.0 - abar / abar_prev, 0.999);
            abar_prev = abar;
        }
    }
    return schedule_from_betas(kind, std::move(betas), beta_start, beta_end);
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    sched.check_timestep(t);
    check_same_shape(x0, eps, "q_sample");
    const double abar = sched.alpha_bars[static_cast<size_t>(t)];
    const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
    Tensor out = x0;
    out.flat() = a * x0.flat() + b * eps.flat();
    return out;
}

PosteriorParams posterior_params(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                                 VarianceKind variance) {
    sched.check_timestep(t);
    check_same_shape(x_t, eps_hat, "posterior_params");
    const double beta = sched.betas[static_cast<size_t>(t)];
    const double abar = sched.alpha_bars[static_cast<size_t>(t)];
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alphas[static_cast<size_t>(t)]);
    const double coef = beta / std::sqrt(1.0 - abar);
    PosteriorParams p;
    p.mean = x_t;
    p.mean.flat() = inv_sqrt_alpha * (x_t.flat() - coef * eps_hat.flat());
    if (t == 0)
        p.variance = 0.0;
    else
        p.variance = variance == VarianceKind::posterior ? sched.posterior_variances[static_cast<size_t>(t)] : beta;
    return p;
}

Tensor predict_x0_from_eps(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched,
                           bool clamp) {
    sched.check_timestep(t);
    check_same_shape(x_t, eps_hat, "predict_x0_from_eps");
    const double abar = sched.alpha_bars[static_cast<size_t>(t)];
    const double a = 1.0 / std::sqrt(abar), b = std::sqrt(1.0 - abar);
    Tensor out = x_t;
    out.flat() = a * (x_t.flat() - b * eps_hat.flat());
    if (clamp)
        for (int64_t i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], -1.0, 1.0);
    return out;
}

}  // namespace diffaug
