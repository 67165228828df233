#pragma once

// 31-candidate retrieval evaluation and the ablation harnesses built on it.
//
// A query is a visual position v in a test utterance. Candidates are the audio
// windows at offsets −half_window..+half_window. For frame length N the score
// of a candidate is the mean logit over the N−4 five-frame windows starting at
// v, v+stride, ... The predicted offset is the argmax; ties go to the smaller
// |offset|, then to the negative offset. A query is correct iff
// |predicted offset| ≤ tolerance.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mtd/distill_losses.hpp"
#include "mtd/sync_model.hpp"
#include "mtd/synth_data.hpp"
#include "mtd/trainer.hpp"

namespace mtd {

struct EvalConfig {
    std::vector<int> frame_lengths{5, 7, 9, 11, 13, 15};
    int half_window = kMaxOffset;
    int tolerance = 1;
    int stride = 1;
    /// Spacing of query positions within an utterance.
    int query_stride = 7;
    /// Cap on queries; 0 keeps every enumerated query.
    int n_queries = 300;
    std::uint64_t seed = 11;

    void validate() const;
    int candidate_count() const { return 2 * half_window + 1; }
    int max_length() const;
};

/// Scores the 5-frame visual window starting at `visual_start` against the
/// audio window starting `offset` visual frames later.
struct WindowQuery {
    const Utterance* utterance = nullptr;
    int visual_start = 0;
    int offset = 0;
};
using WindowScorer = std::function<double(const WindowQuery&)>;

WindowScorer model_scorer(const SyncModel& model);
/// score = −|offset|.
WindowScorer oracle_scorer();
/// Uniform score from a hash of (seed, utterance, position, offset).
WindowScorer random_scorer(std::uint64_t seed);

struct Query {
    const Utterance* utterance = nullptr;
    int visual_start = 0;
};

struct QuerySet {
    std::vector<Query> queries;
    int skipped_utterances = 0;
};

/// Positions 15, 15+query_stride, ... that leave room for every length and
/// offset; capped at n_queries by a seeded shuffle that keeps enumeration order.
QuerySet enumerate_queries(const std::vector<Utterance>& split, const EvalConfig& config);

/// Offsets in tie-break preference order: 0, −1, +1, −2, +2, ...
std::vector<int> offsets_by_preference(int half_window);

/// Offset chosen for a query at one frame length.
int predict_offset(const WindowScorer& scorer, const Query& query, int frame_length, const EvalConfig& config);

double retrieval_accuracy(const WindowScorer& scorer, const std::vector<Utterance>& split, int frame_length,
                          const EvalConfig& config);
double retrieval_accuracy(const SyncModel& model, const std::vector<Utterance>& split, int frame_length,
                          const EvalConfig& config);

struct LengthResult {
    int frame_length = 0;
    double accuracy = 0.0;
    int queries = 0;
    int correct = 0;
};

struct EvalReport {
    std::vector<LengthResult> lengths;
    int skipped_utterances = 0;
    std::string checkpoint_id;
    std::string corpus_digest;
    std::string config_echo;

    double accuracy_at(int frame_length) const;
};

/// One shared query set; window scores are computed once and reused across lengths.
EvalReport multi_length_eval(const WindowScorer& scorer, const std::vector<Utterance>& split, const EvalConfig& config);
EvalReport multi_length_eval(const SyncModel& model, const std::vector<Utterance>& split, const EvalConfig& config);

std::string eval_config_text(const EvalConfig& config, const std::string& prefix = "eval.");

// ---------------------------------------------------------------------------
// Ablations

enum class AblationKind { MtdTerms, LayerSweep, LayerSets, Temperature, Methods, LossTracking };

std::string_view ablation_kind_name(AblationKind kind);
/// mtd_terms, layer_sweep, layer_sets, temperature, methods, loss_tracking.
AblationKind parse_ablation_kind(std::string_view text);

struct AxisValue {
    std::string label;
    DistillConfig distill;
};

struct AblationSpec {
    AblationKind kind = AblationKind::Methods;
    std::vector<AxisValue> axis;
    std::vector<std::uint64_t> seeds;

    void validate() const;
};

/// Axis realizations derived from `base`: mtd_terms (bce, w/o vr, w/o cad,
/// full), layer_sweep (12 single layers), layer_sets (S1..S8), temperature
/// {1,5,15,25,35}, methods (all 7).
std::vector<AxisValue> default_axis(AblationKind kind, const DistillConfig& base, int layers_per_block = 4);
AblationSpec make_ablation(AblationKind kind, std::vector<std::uint64_t> seeds, const DistillConfig& base = {});
/// Temperature axis restricted to the given values.
std::vector<AxisValue> temperature_axis(const std::vector<double>& taus, const DistillConfig& base);

struct AblationRow {
    std::string axis_label;
    std::uint64_t seed = 0;
    double val_f1 = 0.0;
    EvalReport report;
};

struct AblationReport {
    AblationKind kind = AblationKind::Methods;
    std::vector<AblationRow> rows;

    /// Mean accuracy per (axis label, frame length), axis labels in first-seen order.
    std::vector<std::pair<std::string, std::map<int, double>>> means() const;
    double mean_accuracy(const std::string& label, int frame_length) const;
};

struct AblationContext {
    const SyncModel* teacher = nullptr;
    const Corpus* corpus = nullptr;
    ModelConfig student;
    TrainConfig train;
    EvalConfig eval;
    /// Progress notification after each (axis value, seed) cell.
    std::function<void(const AblationRow&)> on_row;
};

/// One distill + eval per (axis value, seed). The seed drives both the
/// student initialization and the training batches, so cells sharing a seed
/// are paired.
AblationReport run_ablation(const AblationSpec& spec, const AblationContext& context);

// ---------------------------------------------------------------------------
// Loss tracking

struct LossTrackRecord {
    int epoch = 0;  ///< 0 is the measurement before the first update
    double last_fitnets = 0.0;
    double sel_fitnets = 0.0;
    double mtd = 0.0;  ///< cad + vr over the distilled layer set
};

struct LossTrace {
    Method optimized = Method::MTD;
    std::vector<LossTrackRecord> records;
};

struct MonitoredLosses {
    double last_fitnets = 0.0;
    double sel_fitnets = 0.0;
    double mtd = 0.0;
};

/// Mean of the three distillation losses over `pairs`, without gradients.
MonitoredLosses monitor_losses(const SyncModel& student, const SyncModel& teacher, const std::vector<AVPair>& pairs,
                               const DistillConfig& distill, const FitNetsRegressors& regressors);

/// Trains with one of LAST_FITNETS, SEL_FITNETS or MTD (each plus BCE) and
/// logs all three on `monitor_pairs` validation pairs before training and
/// after every epoch. FitNets regressors are shared so monitored FitNets
/// losses use the current regressors.
LossTrace loss_tracking_run(Method optimize, const SyncModel& teacher, const Corpus& corpus,
                            const ModelConfig& student_config, const TrainConfig& train, int monitor_pairs = 64);

}  // namespace mtd
