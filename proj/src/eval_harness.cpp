#include "mtd/eval_harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mtd/errors.hpp"
#include "mtd/kv_text.hpp"

namespace mtd {

namespace {

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

void EvalConfig::validate() const {
    if (frame_lengths.empty()) throw ConfigError("eval.lengths must not be empty");
    for (int n : frame_lengths) {
        if (n < kWindowFrames) {
            throw ConfigError("eval.lengths entries must be at least " + std::to_string(kWindowFrames) + ", got " +
                              std::to_string(n));
        }
    }
    if (half_window < 1) throw ConfigError("eval.half_window must be positive");
    if (tolerance < 0 || tolerance >= half_window) throw ConfigError("eval.tolerance must lie in [0, half_window)");
    if (stride < 1) throw ConfigError("eval.stride must be positive");
    if (query_stride < 1) throw ConfigError("eval.query_stride must be positive");
    if (n_queries < 0) throw ConfigError("eval.n_queries must be non-negative");
}

int EvalConfig::max_length() const { return *std::max_element(frame_lengths.begin(), frame_lengths.end()); }

WindowScorer model_scorer(const SyncModel& model) {
    const int rate = model.config().audio_rate;
    return [&model, rate](const WindowQuery& q) {
        const Utterance& u = *q.utterance;
        return model_logit(model, u.visual.slice_rows(static_cast<std::size_t>(q.visual_start), kWindowFrames),
                           audio_window(u, q.visual_start + q.offset, kWindowFrames, rate));
    };
}

WindowScorer oracle_scorer() {
    return [](const WindowQuery& q) { return -static_cast<double>(std::abs(q.offset)); };
}

WindowScorer random_scorer(std::uint64_t seed) {
    return [seed](const WindowQuery& q) {
        std::uint64_t h = mix64(seed);
        h = mix64(h ^ q.utterance->id);
        h = mix64(h ^ static_cast<std::uint64_t>(q.visual_start));
        h = mix64(h ^ static_cast<std::uint64_t>(q.offset + 1000));
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    };
}

QuerySet enumerate_queries(const std::vector<Utterance>& split, const EvalConfig& config) {
    config.validate();
    QuerySet set;
    const int maxlen = config.max_length();
    // Windows of the longest length span maxlen visual frames from v; the audio
    // for offset +half_window must also fit.
    for (const Utterance& u : split) {
        const int last = static_cast<int>(u.frames()) - config.half_window - maxlen;
        if (last < config.half_window) {
            ++set.skipped_utterances;
            continue;
        }
        for (int v = config.half_window; v <= last; v += config.query_stride) set.queries.push_back({&u, v});
    }
    if (config.n_queries > 0 && set.queries.size() > static_cast<std::size_t>(config.n_queries)) {
        std::vector<std::size_t> idx(set.queries.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::mt19937_64 rng(config.seed);
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(static_cast<std::size_t>(config.n_queries));
        std::sort(idx.begin(), idx.end());
        std::vector<Query> kept;
        kept.reserve(idx.size());
        for (std::size_t i : idx) kept.push_back(set.queries[i]);
        set.queries = std::move(kept);
    }
    return set;
}

std::vector<int> offsets_by_preference(int half_window) {
    std::vector<int> out{0};
    for (int k = 1; k <= half_window; ++k) {
        out.push_back(-k);
        out.push_back(k);
    }
    return out;
}

namespace {

// scores[window][candidate] for windows v, v+stride, ... and candidates in
// preference order.
using ScoreGrid = std::vector<std::vector<double>>;

ScoreGrid score_grid(const WindowScorer& scorer, const Query& q, int n_windows, const EvalConfig& config,
                     const std::vector<int>& offsets) {
    ScoreGrid grid(static_cast<std::size_t>(n_windows), std::vector<double>(offsets.size()));
    for (int w = 0; w < n_windows; ++w) {
        for (std::size_t c = 0; c < offsets.size(); ++c) {
            grid[static_cast<std::size_t>(w)][c] = scorer({q.utterance, q.visual_start + w * config.stride, offsets[c]});
        }
    }
    return grid;
}

int windows_for(int frame_length, int stride) { return (frame_length - kWindowFrames) / stride + 1; }

int argmax_offset(const ScoreGrid& grid, int n_windows, const std::vector<int>& offsets) {
    int best = offsets[0];
    double best_score = -INFINITY;
    for (std::size_t c = 0; c < offsets.size(); ++c) {
        double s = 0.0;
        for (int w = 0; w < n_windows; ++w) s += grid[static_cast<std::size_t>(w)][c];
        s /= n_windows;
        if (c == 0 || s > best_score) {
            best_score = s;
            best = offsets[c];
        }
    }
    return best;
}

}  // namespace

int predict_offset(const WindowScorer& scorer, const Query& query, int frame_length, const EvalConfig& config) {
    const auto offsets = offsets_by_preference(config.half_window);
    const int n = windows_for(frame_length, config.stride);
    return argmax_offset(score_grid(scorer, query, n, config, offsets), n, offsets);
}

double EvalReport::accuracy_at(int frame_length) const {
    for (const auto& r : lengths) {
        if (r.frame_length == frame_length) return r.accuracy;
    }
    throw UsageError("report has no frame length " + std::to_string(frame_length));
}

EvalReport multi_length_eval(const WindowScorer& scorer, const std::vector<Utterance>& split, const EvalConfig& config) {
    const QuerySet set = enumerate_queries(split, config);
    const auto offsets = offsets_by_preference(config.half_window);
    int max_windows = 0;
    for (int n : config.frame_lengths) max_windows = std::max(max_windows, windows_for(n, config.stride));

    EvalReport report;
    report.skipped_utterances = set.skipped_utterances;
    report.config_echo = eval_config_text(config);
    for (int n : config.frame_lengths) report.lengths.push_back({n, 0.0, 0, 0});
    for (const Query& q : set.queries) {
        const ScoreGrid grid = score_grid(scorer, q, max_windows, config, offsets);
        for (std::size_t i = 0; i < config.frame_lengths.size(); ++i) {
            const int predicted = argmax_offset(grid, windows_for(config.frame_lengths[i], config.stride), offsets);
            LengthResult& r = report.lengths[i];
            ++r.queries;
            if (std::abs(predicted) <= config.tolerance) ++r.correct;
        }
    }
    for (auto& r : report.lengths) {
        r.accuracy = r.queries == 0 ? 0.0 : static_cast<double>(r.correct) / r.queries;
    }
    return report;
}

EvalReport multi_length_eval(const SyncModel& model, const std::vector<Utterance>& split, const EvalConfig& config) {
    return multi_length_eval(model_scorer(model), split, config);
}

double retrieval_accuracy(const WindowScorer& scorer, const std::vector<Utterance>& split, int frame_length,
                          const EvalConfig& config) {
    EvalConfig c = config;
    if (std::find(c.frame_lengths.begin(), c.frame_lengths.end(), frame_length) == c.frame_lengths.end()) {
        c.frame_lengths.push_back(frame_length);
    }
    return multi_length_eval(scorer, split, c).accuracy_at(frame_length);
}

double retrieval_accuracy(const SyncModel& model, const std::vector<Utterance>& split, int frame_length,
                          const EvalConfig& config) {
    return retrieval_accuracy(model_scorer(model), split, frame_length, config);
}

std::string eval_config_text(const EvalConfig& c, const std::string& prefix) {
    std::ostringstream os;
    os << prefix << "lengths = ";
    for (std::size_t i = 0; i < c.frame_lengths.size(); ++i) os << (i ? "," : "") << c.frame_lengths[i];
    os << '\n'
       << prefix << "half_window = " << c.half_window << '\n'
       << prefix << "tolerance = " << c.tolerance << '\n'
       << prefix << "stride = " << c.stride << '\n'
       << prefix << "query_stride = " << c.query_stride << '\n'
       << prefix << "n_queries = " << c.n_queries << '\n'
       << prefix << "seed = " << c.seed << '\n'
       << prefix << "tie_break = smaller |offset|, then negative\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Ablations

std::string_view ablation_kind_name(AblationKind kind) {
    switch (kind) {
        case AblationKind::MtdTerms: return "mtd_terms";
        case AblationKind::LayerSweep: return "layer_sweep";
        case AblationKind::LayerSets: return "layer_sets";
        case AblationKind::Temperature: return "temperature";
        case AblationKind::Methods: return "methods";
        case AblationKind::LossTracking: return "loss_tracking";
    }
    return "?";
}

AblationKind parse_ablation_kind(std::string_view text) {
    for (AblationKind k : {AblationKind::MtdTerms, AblationKind::LayerSweep, AblationKind::LayerSets,
                           AblationKind::Temperature, AblationKind::Methods, AblationKind::LossTracking}) {
        if (ablation_kind_name(k) == text) return k;
    }
    throw ConfigError("unknown ablation kind '" + std::string(text) +
                     "' (expected mtd_terms, layer_sweep, layer_sets, temperature, methods or loss_tracking)");
}

void AblationSpec::validate() const {
    if (axis.empty()) throw UsageError("ablation axis is empty");
    if (seeds.empty()) throw UsageError("ablation needs at least one seed");
    for (const auto& a : axis) a.distill.validate();
}

std::vector<AxisValue> temperature_axis(const std::vector<double>& taus, const DistillConfig& base) {
    std::vector<AxisValue> out;
    for (double t : taus) {
        DistillConfig d = base;
        d.method = Method::MTD;
        d.tau = t;
        out.push_back({"tau=" + format_double(t), d});
    }
    return out;
}

std::vector<AxisValue> default_axis(AblationKind kind, const DistillConfig& base, int layers_per_block) {
    std::vector<AxisValue> out;
    DistillConfig mtd = base;
    mtd.method = Method::MTD;
    switch (kind) {
        case AblationKind::MtdTerms: {
            DistillConfig bce = mtd;
            bce.method = Method::BceOnly;
            DistillConfig no_vr = mtd;
            no_vr.include_cad = true;
            no_vr.include_vr = false;
            DistillConfig no_cad = mtd;
            no_cad.include_cad = false;
            no_cad.include_vr = true;
            DistillConfig full = mtd;
            full.include_cad = full.include_vr = true;
            out = {{"bce", bce}, {"without_vr", no_vr}, {"without_cad", no_cad}, {"full", full}};
            break;
        }
        case AblationKind::LayerSweep:
            for (Block b : {Block::AV, Block::VA, Block::Fusion}) {
                for (int l = 1; l <= layers_per_block; ++l) {
                    DistillConfig d = mtd;
                    d.layer_set = {{b, l}};
                    out.push_back({layer_spec_to_string({b, l}), d});
                }
            }
            break;
        case AblationKind::LayerSets:
            for (int s = 1; s <= 8; ++s) {
                DistillConfig d = mtd;
                d.layer_set = candidate_layer_set(s);
                out.push_back({"S" + std::to_string(s), d});
            }
            break;
        case AblationKind::Temperature: out = temperature_axis({1, 5, 15, 25, 35}, mtd); break;
        case AblationKind::Methods:
            for (Method m : kAllMethods) {
                DistillConfig d = base;
                d.method = m;
                out.push_back({std::string(method_name(m)), d});
            }
            break;
        case AblationKind::LossTracking:
            for (Method m : {Method::LastFitNets, Method::SelFitNets, Method::MTD}) {
                DistillConfig d = base;
                d.method = m;
                out.push_back({std::string(method_name(m)), d});
            }
            break;
    }
    return out;
}

AblationSpec make_ablation(AblationKind kind, std::vector<std::uint64_t> seeds, const DistillConfig& base) {
    AblationSpec spec;
    spec.kind = kind;
    spec.axis = default_axis(kind, base);
    spec.seeds = std::move(seeds);
    return spec;
}

std::vector<std::pair<std::string, std::map<int, double>>> AblationReport::means() const {
    std::vector<std::pair<std::string, std::map<int, double>>> out;
    std::map<std::string, std::map<int, std::pair<double, int>>> acc;
    for (const auto& row : rows) {
        if (!acc.contains(row.axis_label)) out.push_back({row.axis_label, {}});
        for (const auto& l : row.report.lengths) {
            auto& [sum, n] = acc[row.axis_label][l.frame_length];
            sum += l.accuracy;
            ++n;
        }
    }
    for (auto& [label, m] : out) {
        for (const auto& [len, sn] : acc[label]) m[len] = sn.first / sn.second;
    }
    return out;
}

double AblationReport::mean_accuracy(const std::string& label, int frame_length) const {
    for (const auto& [l, m] : means()) {
        if (l == label) {
            auto it = m.find(frame_length);
            if (it != m.end()) return it->second;
        }
    }
    throw UsageError("ablation report has no row '" + label + "' at length " + std::to_string(frame_length));
}

AblationReport run_ablation(const AblationSpec& spec, const AblationContext& ctx) {
    spec.validate();
    if (ctx.teacher == nullptr) throw UsageError("ablation requires a teacher checkpoint");
    if (ctx.corpus == nullptr) throw UsageError("ablation requires a corpus");
    AblationReport report;
    report.kind = spec.kind;
    for (const AxisValue& value : spec.axis) {
        for (std::uint64_t seed : spec.seeds) {
            ModelConfig student = ctx.student;
            student.seed = seed;
            TrainConfig train = ctx.train;
            train.seed = seed;
            train.distill = value.distill;
            train.checkpoint_path.clear();
            const TrainResult result = distill_student(*ctx.teacher, *ctx.corpus, student, train);
            AblationRow row;
            row.axis_label = value.label;
            row.seed = seed;
            row.val_f1 = result.best_val_f1;
            row.report = multi_length_eval(result.model, ctx.corpus->test, ctx.eval);
            if (ctx.on_row) ctx.on_row(row);
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Loss tracking

MonitoredLosses monitor_losses(const SyncModel& student, const SyncModel& teacher, const std::vector<AVPair>& pairs,
                               const DistillConfig& distill, const FitNetsRegressors& regressors) {
    NoGradGuard no_grad;
    const int L = student.config().layers_per_block;
    ForwardOptions fwd;
    fwd.tau_trace = distill.tau;
    fwd.trace_layers = distill.layer_set;
    const auto last = fitnets_layers(FitNetsMode::Last, distill, L);
    const auto sel = fitnets_layers(FitNetsMode::Sel, distill, L);
    MonitoredLosses m;
    for (const AVPair& p : pairs) {
        const Tensor v = p.visual_window.to_tensor();
        const Tensor a = p.audio_window.to_tensor();
        const ForwardOutput s = model_forward(student, v, a, fwd);
        const ForwardOutput t = model_forward(teacher, v, a, fwd);
        m.last_fitnets += fitnets_loss(s, t, last, regressors, p.label).aux.item();
        m.sel_fitnets += fitnets_loss(s, t, sel, regressors, p.label).aux.item();
        m.mtd += cad_loss(s, t, distill.layer_set, distill.tau, distill.reverse_kl).item() +
                 vr_loss(s, t, distill.layer_set, distill.tau, distill.reverse_kl).item();
    }
    const double n = pairs.empty() ? 1.0 : static_cast<double>(pairs.size());
    m.last_fitnets /= n;
    m.sel_fitnets /= n;
    m.mtd /= n;
    return m;
}

LossTrace loss_tracking_run(Method optimize, const SyncModel& teacher, const Corpus& corpus,
                            const ModelConfig& student_config, const TrainConfig& train, int monitor_pairs) {
    if (optimize != Method::LastFitNets && optimize != Method::SelFitNets && optimize != Method::MTD) {
        throw UsageError("loss tracking optimizes last-fitnets, sel-fitnets or mtd, not " +
                         std::string(method_name(optimize)));
    }
    if (monitor_pairs <= 0 || monitor_pairs % 2 != 0) throw UsageError("monitor_pairs must be positive and even");
    TrainConfig cfg = train;
    cfg.distill.method = optimize;
    cfg.checkpoint_path.clear();
    const int L = student_config.layers_per_block;

    std::vector<LayerSpec> union_layers = fitnets_layers(FitNetsMode::Last, cfg.distill, L);
    for (const LayerSpec& s : fitnets_layers(FitNetsMode::Sel, cfg.distill, L)) {
        if (std::find(union_layers.begin(), union_layers.end(), s) == union_layers.end()) union_layers.push_back(s);
    }
    FitNetsRegressors regressors = FitNetsRegressors::create(union_layers, student_config.d_model,
                                                             teacher.config().d_model, cfg.seed ^ 0x5eed0002ULL);

    std::mt19937_64 rng(cfg.seed ^ 0x5eed0003ULL);
    SamplingOptions sampling;
    sampling.exclude_near_zero = cfg.exclude_near_zero;
    const std::vector<AVPair> pairs =
        sample_batch(corpus.val, monitor_pairs, rng, student_config.audio_rate, sampling);

    LossTrace trace;
    trace.optimized = optimize;
    auto record = [&](int epoch, const SyncModel& student) {
        const MonitoredLosses m = monitor_losses(student, teacher, pairs, cfg.distill, regressors);
        trace.records.push_back({epoch, m.last_fitnets, m.sel_fitnets, m.mtd});
    };
    TrainHooks hooks;
    hooks.regressors = &regressors;
    hooks.on_start = [&](const SyncModel& s) { record(0, s); };
    hooks.on_epoch_end = [&](int epoch, const SyncModel& s) { record(epoch + 1, s); };
    distill_student(teacher, corpus, student_config, cfg, hooks);
    return trace;
}

}  // namespace mtd
