#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "diffaug/backbone.hpp"
#include "diffaug/classifiers.hpp"
#include "diffaug/dataset.hpp"
#include "diffaug/metrics.hpp"
#include "diffaug/schedule.hpp"

namespace diffaug {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 128;
    int max_epochs = 50;
    int early_stop_patience = 10;
    double weight_decay = 0.01;
    uint64_t seed = 0;
    double ema_decay = 0.0;  // 0 disables the shadow average
    int eval_every = 1;
    bool cosine_lr = false;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;  // NaN when this epoch skipped validation
    std::map<std::string, double> val_metrics;
    double wall_time_s = 0.0;
};

// Strict-improvement early stopping: observe() records one evaluated epoch
// and returns true once patience consecutive evaluations failed to improve.
class EarlyStopTracker {
  public:
    explicit EarlyStopTracker(int patience) : patience_(patience) {}

    bool observe(int epoch, double val_loss) {
        if (val_loss < best_loss_) {
            best_loss_ = val_loss;
            best_epoch_ = epoch;
            evals_since_best_ = 0;
        } else {
            ++evals_since_best_;
        }
        return evals_since_best_ >= patience_;
    }

    bool improved() const { return evals_since_best_ == 0 && best_epoch_ > 0; }
    int best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_loss_; }

  private:
    int patience_ = 0;
    double best_loss_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = 0;
    int evals_since_best_ = 0;
};

enum class StopReason { early_stop, max_epochs, user };

StopReason stop_reason_from_string(const std::string& s);
const char* to_string(StopReason r);

struct RunLog {
    std::vector<EpochRecord> records;
    int best_epoch = 0;  // 0 when no epoch was validated
    StopReason stop_reason = StopReason::max_epochs;
};

// One epoch per line, then best_epoch/stop_reason as a summary JSON.
void save_run_log(const RunLog& log, const std::string& jsonl_path, const std::string& summary_path);

// Decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class AdamW {
  public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step(ParameterStore& params, const std::vector<std::pair<std::string, const Tensor*>>& grads);
    void set_learning_rate(double lr) { lr_ = lr; }

  private:
    double lr_, weight_decay_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// Decoded split held in memory; identities key the fixed validation noise.
struct LoadedSplit {
    std::vector<Tensor> images;  // (1,S,S) each
    std::vector<int> labels;
    std::vector<std::string> identities;  // manifest path strings
};

LoadedSplit load_split(const DatasetManifest& manifest, Split split);

struct TrainResult {
    ParameterStore params;  // best-validation weights (EMA weights when enabled)
    RunLog log;
};

TrainResult train_denoiser(const DatasetManifest& manifest, const NoiseSchedule& sched,
                           const BackboneConfig& backbone_cfg, const TrainConfig& cfg,
                           const std::function<bool()>& user_stop = {});

TrainResult train_guidance_classifier(const DatasetManifest& manifest, const NoiseSchedule& sched,
                                      const GuidanceConfig& guidance_cfg, const TrainConfig& cfg,
                                      const std::function<bool()>& user_stop = {});

struct DownstreamTrainResult {
    ParameterStore params;
    RunLog log;
    EvalReport test_report;
};

DownstreamTrainResult train_downstream(const DatasetManifest& manifest, const DownstreamModelSpec& spec,
                                       const TrainConfig& cfg,
                                       const std::function<bool()>& user_stop = {});

// Mean cross-entropy and classification report of the model on a split.
EvalReport evaluate_downstream(const DownstreamModel& model, const ParameterStore& params,
                               const LoadedSplit& split, int class_count);

}  // namespace diffaug
