#include "diffaug/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "diffaug/errors.hpp"
#include "diffaug/image_io.hpp"

namespace diffaug {

SamplerMethod sampler_method_from_string(const std::string& s) {
    if (s == "ddpm") return SamplerMethod::ddpm;
    if (s == "ddim") return SamplerMethod::ddim;
    fail(ErrorKind::ConfigError, "unknown sampler method: " + s);
}

const char* to_string(SamplerMethod m) {
    return m == SamplerMethod::ddpm ? "ddpm" : "ddim";
}

Tensor apply_guidance(const Tensor& mean, double variance, const Tensor& grad, double s) {
    require(grad.same_shape(mean), ErrorKind::ShapeMismatch, "guidance grad shape != mean shape");
    require(variance >= 0.0, ErrorKind::InvalidRange, "negative variance");
    Tensor out = mean;
    const double c = s * variance;
    for (int64_t i = 0; i < out.size(); ++i) out[i] += c * grad[i];
    return out;
}

std::vector<int> sample_timesteps(int T, int steps) {
    require(steps >= 1, ErrorKind::InvalidRange, "steps must be >= 1");
    require(steps <= T, ErrorKind::InvalidRange, "steps exceeds schedule length");
    if (steps == 1) return {T - 1};
    std::vector<int> out(static_cast<size_t>(steps));
    for (int j = 0; j < steps; ++j)
        out[static_cast<size_t>(j)] =
            static_cast<int>(std::llround(static_cast<double>(j) * (T - 1) / (steps - 1)));
    return out;
}

namespace {

std::vector<int> filled(int n, int v) { return std::vector<int>(static_cast<size_t>(n), v); }

void check_batch(const Tensor& x_t, const std::vector<int>& y) {
    require(x_t.rank() == 4 && x_t.dim(1) == 1, ErrorKind::ShapeMismatch, "expected (N,1,S,S) batch");
    require(static_cast<int>(y.size()) == x_t.dim(0), ErrorKind::LengthMismatch,
            "labels length != batch size");
}

}  // namespace

Tensor ddpm_step(const Tensor& x_t, int t, const std::vector<int>& y, const DenoiserUNet& denoiser,
                 const ParameterStore& denoiser_params, const GuidanceClassifier* guidance,
                 const ParameterStore* guidance_params, const NoiseSchedule& sched, double s,
                 const Tensor* noise, int cond_t, int cond_T) {
    check_batch(x_t, y);
    sched.check_timestep(t);
    if (cond_t < 0) cond_t = t;
    if (cond_T < 0) cond_T = sched.T;
    require(t == 0 || noise != nullptr, ErrorKind::ShapeMismatch, "noise required for t > 0");
    if (noise != nullptr)
        require(noise->same_shape(x_t), ErrorKind::ShapeMismatch, "noise shape != x_t shape");

    const int n = x_t.dim(0);
    const Tensor eps_hat =
        denoiser.forward_eval(denoiser_params, x_t, filled(n, cond_t), y, cond_T);
    PosteriorParams post = posterior_params(x_t, eps_hat, t, sched);

    Tensor out;
    if (guidance != nullptr && s != 0.0) {
        const Tensor grad =
            guidance->log_prob_grad(*guidance_params, x_t, filled(n, cond_t), y, cond_T);
        out = apply_guidance(post.mean, post.variance, grad, s);
    } else {
        out = std::move(post.mean);
    }
    if (t > 0) {
        const double sigma = std::sqrt(post.variance);
        for (int64_t i = 0; i < out.size(); ++i) out[i] += sigma * (*noise)[i];
    }
    return out;
}

Tensor ddim_step(const Tensor& x_t, int t_from, int t_to, const std::vector<int>& y,
                 const DenoiserUNet& denoiser, const ParameterStore& denoiser_params,
                 const NoiseSchedule& sched, double eta, const Tensor* noise) {
    check_batch(x_t, y);
    sched.check_timestep(t_from);
    sched.check_timestep(t_to);
    require(t_to < t_from, ErrorKind::TimestepOrderError, "ddim requires t_to < t_from");
    require(eta >= 0.0 && eta <= 1.0, ErrorKind::InvalidRange, "eta must be in [0,1]");
    require(eta == 0.0 || noise != nullptr, ErrorKind::ShapeMismatch, "noise required for eta > 0");
    if (noise != nullptr)
        require(noise->same_shape(x_t), ErrorKind::ShapeMismatch, "noise shape != x_t shape");

    const int n = x_t.dim(0);
    const Tensor eps_hat =
        denoiser.forward_eval(denoiser_params, x_t, filled(n, t_from), y, sched.T);
    const Tensor x0_hat = predict_x0_from_eps(x_t, eps_hat, t_from, sched);

    const double abar_from = sched.alpha_bars[static_cast<size_t>(t_from)];
    const double abar_to = sched.alpha_bars[static_cast<size_t>(t_to)];
    const double sigma_tilde =
        std::sqrt((1.0 - abar_to) / (1.0 - abar_from)) * std::sqrt(1.0 - abar_from / abar_to);
    const double sigma = eta * sigma_tilde;
    const double a = std::sqrt(abar_to);
    const double b = std::sqrt(std::max(0.0, 1.0 - abar_to - sigma * sigma));

    Tensor out(x_t.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a * x0_hat[i] + b * eps_hat[i];
    if (sigma > 0.0)
        for (int64_t i = 0; i < out.size(); ++i) out[i] += sigma * (*noise)[i];
    return out;
}

namespace {

void clamp_unit(Tensor& x) {
    for (int64_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], -1.0, 1.0);
}

// Final DDIM jump to the clean image: abar_goal = 1, so x = x0_hat.
Tensor ddim_final_step(const Tensor& x_t, int t, const std::vector<int>& y, const DenoiserUNet& denoiser,
                       const ParameterStore& denoiser_params, const NoiseSchedule& sched) {
    const int n = x_t.dim(0);
    const Tensor eps_hat = denoiser.forward_eval(denoiser_params, x_t, filled(n, t), y, sched.T);
    return predict_x0_from_eps(x_t, eps_hat, t, sched);
}

Tensor stack_noise(std::vector<Rng>& streams, const std::vector<int>& shape) {
    Tensor out(shape);
    const int64_t per = out.size() / out.dim(0);
    for (size_t i = 0; i < streams.size(); ++i) {
        double* dst = out.data() + static_cast<int64_t>(i) * per;
        for (int64_t j = 0; j < per; ++j) dst[j] = streams[i].gaussian();
    }
    return out;
}

}  // namespace

std::vector<SyntheticSampleRecord> generate(const std::vector<int>& labels, const SamplerConfig& cfg,
                                            const DenoiserUNet& denoiser,
                                            const ParameterStore& denoiser_params,
                                            const GuidanceClassifier* guidance,
                                            const ParameterStore* guidance_params,
                                            const NoiseSchedule& sched, uint64_t seed, int batch_size,
                                            std::vector<int>* step_trace) {
    const int k = denoiser.config().class_count;
    for (int label : labels)
        require(label >= 0 && label < k, ErrorKind::ClassOutOfRange,
                "label " + std::to_string(label) + " outside 0.." + std::to_string(k - 1));
    require(batch_size >= 1, ErrorKind::InvalidRange, "batch_size must be >= 1");
    require(guidance == nullptr || guidance_params != nullptr, ErrorKind::ConfigError,
            "guidance classifier given without parameters");

    const int size = denoiser.config().image_size;
    const std::vector<int> subset = sample_timesteps(sched.T, cfg.steps);
    const int steps = static_cast<int>(subset.size());
    const double scale = guidance != nullptr ? cfg.guidance_scale : 0.0;

    // Respaced schedule for sub-T ancestral stepping; identity when full.
    NoiseSchedule respaced;
    if (cfg.method == SamplerMethod::ddpm) {
        if (steps == sched.T) {
            respaced = sched;
        } else {
            std::vector<double> betas(subset.size());
            for (int j = 0; j < steps; ++j) {
                const double prev = j == 0 ? 1.0 : sched.alpha_bars[static_cast<size_t>(subset[j - 1])];
                betas[static_cast<size_t>(j)] =
                    1.0 - sched.alpha_bars[static_cast<size_t>(subset[j])] / prev;
            }
            respaced = schedule_from_betas(sched.kind, std::move(betas), sched.beta_start, sched.beta_end);
        }
    }

    if (step_trace != nullptr) {
        step_trace->clear();
        for (int j = steps - 1; j >= 0; --j) step_trace->push_back(subset[static_cast<size_t>(j)]);
    }

    std::vector<SyntheticSampleRecord> records(labels.size());
    const int total = static_cast<int>(labels.size());
    for (int begin = 0; begin < total; begin += batch_size) {
        const int n = std::min(batch_size, total - begin);
        const std::vector<int> shape{n, 1, size, size};
        std::vector<Rng> streams;
        std::vector<uint64_t> stream_seeds;
        streams.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            stream_seeds.push_back(Rng::derive(seed, static_cast<uint64_t>(begin + i)));
            streams.emplace_back(stream_seeds.back());
        }
        const std::vector<int> y(labels.begin() + begin, labels.begin() + begin + n);

        Tensor x = stack_noise(streams, shape);
        if (cfg.method == SamplerMethod::ddpm) {
            for (int j = steps - 1; j >= 0; --j) {
                Tensor noise;
                if (j > 0) noise = stack_noise(streams, shape);
                x = ddpm_step(x, j, y, denoiser, denoiser_params, guidance, guidance_params, respaced,
                              scale, j > 0 ? &noise : nullptr, subset[static_cast<size_t>(j)], sched.T);
                if (cfg.clamp_each_step) clamp_unit(x);
            }
        } else {
            for (int j = steps - 1; j >= 1; --j) {
                Tensor noise;
                if (cfg.ddim_eta > 0.0) noise = stack_noise(streams, shape);
                x = ddim_step(x, subset[static_cast<size_t>(j)], subset[static_cast<size_t>(j - 1)], y,
                              denoiser, denoiser_params, sched, cfg.ddim_eta,
                              cfg.ddim_eta > 0.0 ? &noise : nullptr);
                if (cfg.clamp_each_step) clamp_unit(x);
            }
            x = ddim_final_step(x, subset[0], y, denoiser, denoiser_params, sched);
        }
        clamp_unit(x);

        const int64_t per = x.size() / n;
        for (int i = 0; i < n; ++i) {
            SyntheticSampleRecord& rec = records[static_cast<size_t>(begin + i)];
            rec.image = Tensor({1, size, size});
            std::copy_n(x.data() + static_cast<int64_t>(i) * per, per, rec.image.data());
            rec.intended_class = y[static_cast<size_t>(i)];
            rec.guidance_scale = scale;
            rec.steps = cfg.steps;
            rec.seed = stream_seeds[static_cast<size_t>(i)];
        }
    }
    return records;
}

void write_sample_images(std::vector<SyntheticSampleRecord>& records, const std::string& dir,
                         const std::string& prefix) {
    std::filesystem::create_directories(dir);
    for (size_t i = 0; i < records.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s%05zu_c%d.png", prefix.c_str(), i,
                      records[i].intended_class);
        records[i].path = name;
        write_grayscale_png((std::filesystem::path(dir) / name).string(), records[i].image);
    }
}

}  // namespace diffaug
