#pragma once

// Teacher training and teacher→student distillation.
//
// Schedule: linear warmup from lr0/warmup_epochs to lr0 over the first
// warmup_epochs epochs, then lr0·decay_mult^floor((epoch − warmup)/decay_every).
// Optimizer: Adam (β₁ 0.9, β₂ 0.999, ε 1e-8). The model with the best
// validation F1 is kept (and checkpointed when a path is given).

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mtd/distill_losses.hpp"
#include "mtd/sync_model.hpp"
#include "mtd/synth_data.hpp"

namespace mtd {

struct TrainConfig {
    int epochs = 40;
    int warmup_epochs = 10;
    double lr0 = 5e-5;
    double decay_mult = 0.8;
    int decay_every = 20;
    /// Hold lr0 during warmup instead of ramping.
    bool constant_warmup = false;
    int batch_size = 32;
    int batches_per_epoch = 50;
    /// Validation pairs = val_batches · batch_size, drawn once per run.
    int val_batches = 8;
    bool exclude_near_zero = false;
    std::uint64_t seed = 1;
    DistillConfig distill;
    /// When non-empty, the best-F1 model is written here on every improvement.
    std::string checkpoint_path;

    void validate() const;
    /// The literal 80-epoch schedule.
    static TrainConfig full_schedule();
};

double lr_schedule(int epoch, const TrainConfig& config);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    LossValues train_loss;  ///< mean over batches
    double val_f1 = 0.0;
    double wall_seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    /// Equality ignoring wall-clock time.
    bool same_trajectory(const TrainHistory& other) const;
};

struct TrainResult {
    SyncModel model;  ///< parameters of the best validation epoch
    TrainHistory history;
    double best_val_f1 = 0.0;
    int best_epoch = -1;
    std::string rng_digest;
};

/// Called after each epoch's validation with the current (not best) model.
using EpochCallback = std::function<void(int epoch, const SyncModel& current)>;

struct TrainHooks {
    EpochCallback on_epoch_end;
    /// Called once before the first update (epoch index −1 semantics).
    std::function<void(const SyncModel& initial)> on_start;
    /// Externally owned FitNets regressors; when empty the trainer creates its own.
    FitNetsRegressors* regressors = nullptr;
};

class Adam {
public:
    explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update of every named tensor that carries a gradient.
    void step(const std::vector<std::pair<std::string, Tensor>>& params, double lr);
    long long steps() const { return t_; }

private:
    double beta1_, beta2_, eps_;
    long long t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

/// Logit-producing scorer used by validation.
using PairScorer = std::function<double(const AVPair&)>;

/// Binary F1 with prediction positive iff sigmoid(score) > 0.5 (score > 0).
/// Zero true positives gives F1 = 0.
double f1_score(const std::vector<AVPair>& pairs, const PairScorer& scorer);
double validate_f1(const SyncModel& model, const std::vector<Utterance>& val, int n_batches, int batch_size,
                   std::mt19937_64& rng, const SamplingOptions& sampling = {});
double validate_f1(const SyncModel& model, const std::vector<AVPair>& pairs);

/// No-grad, no-trace logit.
double model_logit(const SyncModel& model, const FeatureMatrix& visual, const FeatureMatrix& audio);

TrainResult train_teacher(const Corpus& corpus, const ModelConfig& model_config, const TrainConfig& config,
                          const TrainHooks& hooks = {});

/// Trains `student_init` (copied) against a frozen teacher using
/// config.distill. Teacher parameters are never modified.
TrainResult distill_student(const SyncModel& teacher, const Corpus& corpus, const SyncModel& student_init,
                            const TrainConfig& config, const TrainHooks& hooks = {});
TrainResult distill_student(const SyncModel& teacher, const Corpus& corpus, const ModelConfig& student_config,
                            const TrainConfig& config, const TrainHooks& hooks = {});

struct CheckpointMeta {
    int epoch = -1;
    double val_f1 = 0.0;
    std::string rng_digest;
    /// Free-form extra entries (method, tau, ...), stored as `meta.<key>`.
    std::map<std::string, std::string> extra;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const SyncModel& model, const CheckpointMeta& meta, const std::string& path);
std::vector<char> encode_checkpoint(const SyncModel& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    SyncModel model;
    CheckpointMeta meta;
};

LoadedCheckpoint load_checkpoint(const std::string& path);
LoadedCheckpoint decode_checkpoint(std::vector<char> bytes);
/// Loads and requires the stored configuration to match `expected`
/// (ShapeError naming the first differing field otherwise).
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected);

std::string model_config_text(const ModelConfig& c, const std::string& prefix = "model.");

}  // namespace mtd
