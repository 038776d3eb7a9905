#include "diffaug/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <utility>

#include "diffaug/errors.hpp"
#include "diffaug/image_io.hpp"
#include "nlohmann/json.hpp"

namespace diffaug {

void TrainConfig::validate() const {
    require(learning_rate > 0.0, ErrorKind::InvalidRange, "learning_rate must be > 0");
    require(batch_size >= 1, ErrorKind::InvalidRange, "batch_size must be >= 1");
    require(max_epochs >= 0, ErrorKind::InvalidRange, "max_epochs must be >= 0");
    require(early_stop_patience >= 1, ErrorKind::InvalidRange, "early_stop_patience must be >= 1");
    require(weight_decay >= 0.0, ErrorKind::InvalidRange, "weight_decay must be >= 0");
    require(ema_decay >= 0.0 && ema_decay < 1.0, ErrorKind::InvalidRange, "ema_decay must be in [0,1)");
    require(eval_every >= 1, ErrorKind::InvalidRange, "eval_every must be >= 1");
}

StopReason stop_reason_from_string(const std::string& s) {
    if (s == "early_stop") return StopReason::early_stop;
    if (s == "max_epochs") return StopReason::max_epochs;
    if (s == "user") return StopReason::user;
    fail(ErrorKind::ConfigError, "unknown stop reason: " + s);
}

const char* to_string(StopReason r) {
    switch (r) {
        case StopReason::early_stop: return "early_stop";
        case StopReason::max_epochs: return "max_epochs";
        case StopReason::user: return "user";
    }
    return "";
}

void save_run_log(const RunLog& log, const std::string& jsonl_path, const std::string& summary_path) {
    const std::filesystem::path jp(jsonl_path);
    if (jp.has_parent_path()) std::filesystem::create_directories(jp.parent_path());
    std::ofstream os(jsonl_path);
    if (!os) fail(ErrorKind::IoError, "cannot open for write: " + jsonl_path);
    for (const auto& rec : log.records) {
        nlohmann::json j;
        j["epoch"] = rec.epoch;
        j["train_loss"] = rec.train_loss;
        if (std::isfinite(rec.val_loss)) {
            j["val_loss"] = rec.val_loss;
            if (!rec.val_metrics.empty()) j["val_metrics"] = rec.val_metrics;
        }
        j["wall_time_s"] = rec.wall_time_s;
        os << j.dump() << "\n";
    }
    if (!os) fail(ErrorKind::IoError, "write failed: " + jsonl_path);

    nlohmann::json summary;
    summary["epochs"] = log.records.size();
    summary["best_epoch"] = log.best_epoch;
    summary["stop_reason"] = to_string(log.stop_reason);
    if (log.best_epoch >= 1)
        summary["best_val_loss"] = log.records[static_cast<size_t>(log.best_epoch) - 1].val_loss;
    std::ofstream ss(summary_path);
    if (!ss) fail(ErrorKind::IoError, "cannot open for write: " + summary_path);
    ss << summary.dump(2) << "\n";
    if (!ss) fail(ErrorKind::IoError, "write failed: " + summary_path);
}

AdamW::AdamW(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(ParameterStore& params, const std::vector<std::pair<std::string, const Tensor*>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& [name, grad] : grads) {
        Tensor& p = params.get_mutable(name);
        require(grad->same_shape(p), ErrorKind::ShapeMismatch, "gradient shape mismatch for " + name);
        Tensor& m = m_.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        Tensor& v = v_.try_emplace(name, Tensor::zeros(p.shape())).first->second;
        for (int64_t i = 0; i < p.size(); ++i) {
            const double gi = (*grad)[i];
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
            p[i] -= lr_ * (update + weight_decay_ * p[i]);
        }
    }
}

LoadedSplit load_split(const DatasetManifest& manifest, Split split) {
    LoadedSplit out;
    for (const ImageRecord* rec : manifest.split_records(split)) {
        out.images.push_back(load_pixel_tensor(manifest.resolve(*rec), manifest.image_size));
        out.labels.push_back(rec->label);
        out.identities.push_back(rec->path);
    }
    return out;
}

namespace {

struct EpochHooks {
    std::function<double(const std::vector<int>&, Rng&)> train_batch;  // mean batch loss
    std::function<std::pair<double, std::map<std::string, double>>()> validate;
    std::function<void()> save_best;
};

RunLog run_epochs(const std::string& tag, int n_train, const TrainConfig& cfg, AdamW& opt,
                  const EpochHooks& hooks, const std::function<bool()>& user_stop) {
    RunLog log;
    EarlyStopTracker stop(cfg.early_stop_patience);
    bool exhausted = false;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        if (cfg.cosine_lr)
            opt.set_learning_rate(cfg.learning_rate * 0.5 *
                                  (1.0 + std::cos(std::numbers::pi * (epoch - 1) / cfg.max_epochs)));
        Rng order_rng(Rng::derive(cfg.seed, tag + "/order/epoch=" + std::to_string(epoch)));
        Rng draw_rng(Rng::derive(cfg.seed, tag + "/draw/epoch=" + std::to_string(epoch)));
        const std::vector<int> perm = order_rng.permutation(n_train);

        double loss_sum = 0.0;
        for (int begin = 0, batch_index = 0; begin < n_train; begin += cfg.batch_size, ++batch_index) {
            const int bs = std::min(cfg.batch_size, n_train - begin);
            const std::vector<int> batch(perm.begin() + begin, perm.begin() + begin + bs);
            const double loss = hooks.train_batch(batch, draw_rng);
            require(std::isfinite(loss), ErrorKind::NonFiniteLoss,
                    tag + ": non-finite train loss at epoch " + std::to_string(epoch) + " batch " +
                        std::to_string(batch_index));
            loss_sum += loss * bs;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / n_train;
        rec.val_loss = std::numeric_limits<double>::quiet_NaN();
        const bool evaluated = epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs;
        if (evaluated) {
            auto [val_loss, metrics] = hooks.validate();
            require(std::isfinite(val_loss), ErrorKind::NonFiniteLoss,
                    tag + ": non-finite validation loss at epoch " + std::to_string(epoch));
            rec.val_loss = val_loss;
            rec.val_metrics = std::move(metrics);
            exhausted = stop.observe(epoch, val_loss);
            if (stop.improved()) {
                log.best_epoch = epoch;
                hooks.save_best();
            }
        }
        rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log.records.push_back(std::move(rec));

        if (user_stop && user_stop()) {
            log.stop_reason = StopReason::user;
            return log;
        }
        if (evaluated && exhausted) {
            log.stop_reason = StopReason::early_stop;
            return log;
        }
    }
    log.stop_reason = StopReason::max_epochs;
    return log;
}

void ema_update(ParameterStore& shadow, const ParameterStore& live, double decay) {
    for (const auto& name : live.names()) {
        Tensor& s = shadow.get_mutable(name);
        const Tensor& p = live.get(name);
        for (int64_t i = 0; i < s.size(); ++i) s[i] = decay * s[i] + (1.0 - decay) * p[i];
    }
}

// Ascending-identity processing order makes validation sums independent of
// manifest record order.
std::vector<int> identity_order(const LoadedSplit& split) {
    std::vector<int> order(split.images.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return split.identities[static_cast<size_t>(a)] < split.identities[static_cast<size_t>(b)]; });
    return order;
}

void copy_into_batch(Tensor& batch, int slot, const Tensor& image) {
    std::copy_n(image.data(), image.size(), batch.data() + static_cast<int64_t>(slot) * image.size());
}

// Per-example cross-entropy and strictly-greater argmax over one logits row.
std::pair<double, int> row_loss_and_argmax(const double* row, int k, int label) {
    double mx = row[0];
    int arg = 0;
    for (int c = 1; c < k; ++c)
        if (row[c] > mx) {
            mx = row[c];
            arg = c;
        }
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    return {-(row[label] - mx - std::log(z)), arg};
}

}  // namespace

TrainResult train_denoiser(const DatasetManifest& manifest, const NoiseSchedule& sched,
                           const BackboneConfig& backbone_cfg, const TrainConfig& cfg,
                           const std::function<bool()>& user_stop) {
    cfg.validate();
    backbone_cfg.validate();
    const LoadedSplit train = load_split(manifest, Split::train);
    require(!train.images.empty(), ErrorKind::EmptySplit, "train split is empty");
    const LoadedSplit val = load_split(manifest, Split::val);
    require(!val.images.empty(), ErrorKind::EmptySplit, "val split is empty");

    const int size = backbone_cfg.image_size;
    const int n_val = static_cast<int>(val.images.size());
    const std::vector<int> val_order = identity_order(val);
    const uint64_t val_seed = Rng::derive(cfg.seed, "val-noise");
    std::vector<int> val_t(static_cast<size_t>(n_val));
    std::vector<Tensor> val_eps(static_cast<size_t>(n_val));
    for (int i = 0; i < n_val; ++i) {
        Rng r(Rng::derive(val_seed, val.identities[static_cast<size_t>(i)]));
        val_t[static_cast<size_t>(i)] = r.uniform_int(sched.T);
        val_eps[static_cast<size_t>(i)] = r.gaussian_tensor({1, size, size});
    }

    const DenoiserUNet model(backbone_cfg);
    ParameterStore params;
    Rng init_rng(Rng::derive(cfg.seed, "init"));
    model.init_params(params, init_rng);
    const bool use_ema = cfg.ema_decay > 0.0;
    ParameterStore ema = params;
    ParameterStore best = params;

    AdamW opt(cfg.learning_rate, cfg.weight_decay);
    EpochHooks hooks;
    hooks.train_batch = [&](const std::vector<int>& batch, Rng& rng) {
        const int bs = static_cast<int>(batch.size());
        Tensor x_t({bs, 1, size, size});
        Tensor eps({bs, 1, size, size});
        std::vector<int> t_vec(batch.size()), y_vec(batch.size());
        for (int i = 0; i < bs; ++i) {
            const size_t idx = static_cast<size_t>(batch[static_cast<size_t>(i)]);
            const int t = rng.uniform_int(sched.T);
            t_vec[static_cast<size_t>(i)] = t;
            y_vec[static_cast<size_t>(i)] = train.labels[idx];
            const Tensor& x0 = train.images[idx];
            const double a = std::sqrt(sched.alpha_bars[static_cast<size_t>(t)]);
            const double b = std::sqrt(1.0 - sched.alpha_bars[static_cast<size_t>(t)]);
            const int64_t off = static_cast<int64_t>(i) * x0.size();
            for (int64_t j = 0; j < x0.size(); ++j) {
                const double e = rng.gaussian();
                eps[off + j] = e;
                x_t[off + j] = a * x0[j] + b * e;
            }
        }
        ad::Graph g(true);
        const ad::Ref out = model.forward(g, params, g.leaf(std::move(x_t)), t_vec, y_vec, sched.T, rng);
        const ad::Ref loss = ad::mse_loss(g, out, eps);
        const double loss_value = g.val(loss)[0];
        g.backward(loss);
        opt.step(params, g.param_grads());
        if (use_ema) ema_update(ema, params, cfg.ema_decay);
        return loss_value;
    };
    hooks.validate = [&]() {
        const ParameterStore& eval_params = use_ema ? ema : params;
        double sse = 0.0;
        int64_t elements = 0;
        for (int begin = 0; begin < n_val; begin += cfg.batch_size) {
            const int bs = std::min(cfg.batch_size, n_val - begin);
            Tensor x_t({bs, 1, size, size});
            std::vector<int> t_vec(static_cast<size_t>(bs)), y_vec(static_cast<size_t>(bs));
            for (int i = 0; i < bs; ++i) {
                const size_t idx = static_cast<size_t>(val_order[static_cast<size_t>(begin + i)]);
                const int t = val_t[idx];
                t_vec[static_cast<size_t>(i)] = t;
                y_vec[static_cast<size_t>(i)] = val.labels[idx];
                const Tensor& x0 = val.images[idx];
                const Tensor& eps = val_eps[idx];
                const double a = std::sqrt(sched.alpha_bars[static_cast<size_t>(t)]);
                const double b = std::sqrt(1.0 - sched.alpha_bars[static_cast<size_t>(t)]);
                const int64_t off = static_cast<int64_t>(i) * x0.size();
                for (int64_t j = 0; j < x0.size(); ++j) x_t[off + j] = a * x0[j] + b * eps[j];
            }
            const Tensor eps_hat = model.forward_eval(eval_params, x_t, t_vec, y_vec, sched.T);
            const int64_t per = eps_hat.size() / bs;
            for (int i = 0; i < bs; ++i) {
                const size_t idx = static_cast<size_t>(val_order[static_cast<size_t>(begin + i)]);
                const Tensor& eps = val_eps[idx];
                const int64_t off = static_cast<int64_t>(i) * per;
                for (int64_t j = 0; j < per; ++j) {
                    const double d = eps_hat[off + j] - eps[j];
                    sse += d * d;
                }
            }
            elements += static_cast<int64_t>(bs) * per;
        }
        return std::make_pair(sse / static_cast<double>(elements), std::map<std::string, double>{});
    };
    hooks.save_best = [&]() { best = use_ema ? ema : params; };

    TrainResult result;
    result.log = run_epochs("denoiser", static_cast<int>(train.images.size()), cfg, opt, hooks, user_stop);
    result.params = std::move(best);
    return result;
}

TrainResult train_guidance_classifier(const DatasetManifest& manifest, const NoiseSchedule& sched,
                                      const GuidanceConfig& guidance_cfg, const TrainConfig& cfg,
                                      const std::function<bool()>& user_stop) {
    cfg.validate();
    guidance_cfg.validate();
    const LoadedSplit train = load_split(manifest, Split::train);
    require(!train.images.empty(), ErrorKind::EmptySplit, "train split is empty");
    const LoadedSplit val = load_split(manifest, Split::val);
    require(!val.images.empty(), ErrorKind::EmptySplit, "val split is empty");

    const int size = guidance_cfg.image_size;
    const int n_val = static_cast<int>(val.images.size());
    const std::vector<int> val_order = identity_order(val);
    const uint64_t val_seed = Rng::derive(cfg.seed, "val-noise");
    std::vector<int> val_t(static_cast<size_t>(n_val));
    std::vector<Tensor> val_eps(static_cast<size_t>(n_val));
    for (int i = 0; i < n_val; ++i) {
        Rng r(Rng::derive(val_seed, val.identities[static_cast<size_t>(i)]));
        val_t[static_cast<size_t>(i)] = r.uniform_int(sched.T);
        val_eps[static_cast<size_t>(i)] = r.gaussian_tensor({1, size, size});
    }

    const GuidanceClassifier model(guidance_cfg);
    ParameterStore params;
    Rng init_rng(Rng::derive(cfg.seed, "init"));
    model.init_params(params, init_rng);
    const bool use_ema = cfg.ema_decay > 0.0;
    ParameterStore ema = params;
    ParameterStore best = params;

    AdamW opt(cfg.learning_rate, cfg.weight_decay);
    EpochHooks hooks;
    hooks.train_batch = [&](const std::vector<int>& batch, Rng& rng) {
        const int bs = static_cast<int>(batch.size());
        Tensor x_t({bs, 1, size, size});
        std::vector<int> t_vec(batch.size()), y_vec(batch.size());
        for (int i = 0; i < bs; ++i) {
            const size_t idx = static_cast<size_t>(batch[static_cast<size_t>(i)]);
            const int t = rng.uniform_int(sched.T);
            t_vec[static_cast<size_t>(i)] = t;
            y_vec[static_cast<size_t>(i)] = train.labels[idx];
            const Tensor& x0 = train.images[idx];
            const double a = std::sqrt(sched.alpha_bars[static_cast<size_t>(t)]);
            const double b = std::sqrt(1.0 - sched.alpha_bars[static_cast<size_t>(t)]);
            const int64_t off = static_cast<int64_t>(i) * x0.size();
            for (int64_t j = 0; j < x0.size(); ++j) x_t[off + j] = a * x0[j] + b * rng.gaussian();
        }
        ad::Graph g(true);
        const ad::Ref logits = model.forward(g, params, g.leaf(std::move(x_t)), t_vec, sched.T, rng);
        const ad::Ref loss = ad::cross_entropy(g, logits, y_vec);
        const double loss_value = g.val(loss)[0];
        g.backward(loss);
        opt.step(params, g.param_grads());
        if (use_ema) ema_update(ema, params, cfg.ema_decay);
        return loss_value;
    };
    hooks.validate = [&]() {
        const ParameterStore& eval_params = use_ema ? ema : params;
        const int k = guidance_cfg.class_count;
        double ce_sum = 0.0;
        int correct = 0;
        for (int begin = 0; begin < n_val; begin += cfg.batch_size) {
            const int bs = std::min(cfg.batch_size, n_val - begin);
            Tensor x_t({bs, 1, size, size});
            std::vector<int> t_vec(static_cast<size_t>(bs));
            for (int i = 0; i < bs; ++i) {
                const size_t idx = static_cast<size_t>(val_order[static_cast<size_t>(begin + i)]);
                const int t = val_t[idx];
                t_vec[static_cast<size_t>(i)] = t;
                const Tensor& x0 = val.images[idx];
                const Tensor& eps = val_eps[idx];
                const double a = std::sqrt(sched.alpha_bars[static_cast<size_t>(t)]);
                const double b = std::sqrt(1.0 - sched.alpha_bars[static_cast<size_t>(t)]);
                const int64_t off = static_cast<int64_t>(i) * x0.size();
                for (int64_t j = 0; j < x0.size(); ++j) x_t[off + j] = a * x0[j] + b * eps[j];
            }
            const Tensor logits = model.logits_eval(eval_params, x_t, t_vec, sched.T);
            for (int i = 0; i < bs; ++i) {
                const size_t idx = static_cast<size_t>(val_order[static_cast<size_t>(begin + i)]);
                const auto [loss_i, arg] =
                    row_loss_and_argmax(logits.data() + static_cast<int64_t>(i) * k, k, val.labels[idx]);
                ce_sum += loss_i;
                if (arg == val.labels[idx]) ++correct;
            }
        }
        std::map<std::string, double> metrics{
            {"accuracy", static_cast<double>(correct) / static_cast<double>(n_val)}};
        return std::make_pair(ce_sum / static_cast<double>(n_val), std::move(metrics));
    };
    hooks.save_best = [&]() { best = use_ema ? ema : params; };

    TrainResult result;
    result.log = run_epochs("guidance", static_cast<int>(train.images.size()), cfg, opt, hooks, user_stop);
    result.params = std::move(best);
    return result;
}

EvalReport evaluate_downstream(const DownstreamModel& model, const ParameterStore& params,
                               const LoadedSplit& split, int class_count) {
    const int n = static_cast<int>(split.images.size());
    require(n > 0, ErrorKind::EmptySplit, "empty evaluation split");
    const int size = model.spec().input_size;
    std::vector<int> preds(static_cast<size_t>(n));
    double ce_sum = 0.0;
    const int chunk = 64;
    for (int begin = 0; begin < n; begin += chunk) {
        const int bs = std::min(chunk, n - begin);
        Tensor batch({bs, 1, size, size});
        for (int i = 0; i < bs; ++i) copy_into_batch(batch, i, split.images[static_cast<size_t>(begin + i)]);
        const Tensor logits = model.logits_eval(params, batch);
        for (int i = 0; i < bs; ++i) {
            const auto [loss_i, arg] = row_loss_and_argmax(
                logits.data() + static_cast<int64_t>(i) * class_count, class_count,
                split.labels[static_cast<size_t>(begin + i)]);
            ce_sum += loss_i;
            preds[static_cast<size_t>(begin + i)] = arg;
        }
    }
    EvalReport report = classification_report(preds, split.labels, class_count);
    report.loss = ce_sum / static_cast<double>(n);
    return report;
}

DownstreamTrainResult train_downstream(const DatasetManifest& manifest, const DownstreamModelSpec& spec,
                                       const TrainConfig& cfg, const std::function<bool()>& user_stop) {
    cfg.validate();
    const LoadedSplit train = load_split(manifest, Split::train);
    require(!train.images.empty(), ErrorKind::EmptySplit, "train split is empty");
    const LoadedSplit val = load_split(manifest, Split::val);
    require(!val.images.empty(), ErrorKind::EmptySplit, "val split is empty");
    const LoadedSplit test = load_split(manifest, Split::test);
    require(!test.images.empty(), ErrorKind::EmptySplit, "test split is empty");

    const int size = spec.input_size;
    const DownstreamModel model(spec);
    ParameterStore params;
    Rng init_rng(Rng::derive(cfg.seed, "init"));
    model.init_params(params, init_rng);
    const bool use_ema = cfg.ema_decay > 0.0;
    ParameterStore ema = params;
    ParameterStore best = params;

    AdamW opt(cfg.learning_rate, cfg.weight_decay);
    EpochHooks hooks;
    hooks.train_batch = [&](const std::vector<int>& batch, Rng& rng) {
        const int bs = static_cast<int>(batch.size());
        Tensor x({bs, 1, size, size});
        std::vector<int> y_vec(batch.size());
        for (int i = 0; i < bs; ++i) {
            const size_t idx = static_cast<size_t>(batch[static_cast<size_t>(i)]);
            copy_into_batch(x, i, train.images[idx]);
            y_vec[static_cast<size_t>(i)] = train.labels[idx];
        }
        ad::Graph g(true);
        const auto out = model.forward(g, params, g.leaf(std::move(x)), rng);
        const ad::Ref loss = ad::cross_entropy(g, out.logits, y_vec);
        const double loss_value = g.val(loss)[0];
        g.backward(loss);
        opt.step(params, g.param_grads());
        if (use_ema) ema_update(ema, params, cfg.ema_decay);
        return loss_value;
    };
    hooks.validate = [&]() {
        const EvalReport rep = evaluate_downstream(model, use_ema ? ema : params, val, spec.class_count);
        std::map<std::string, double> metrics{{"accuracy", rep.accuracy}};
        return std::make_pair(rep.loss, std::move(metrics));
    };
    hooks.save_best = [&]() { best = use_ema ? ema : params; };

    DownstreamTrainResult result;
    result.log = run_epochs(std::string("downstream/") + to_string(spec.family),
                            static_cast<int>(train.images.size()), cfg, opt, hooks, user_stop);
    result.test_report = evaluate_downstream(model, best, test, spec.class_count);
    result.params = std::move(best);
    return result;
}

}  // namespace diffaug
