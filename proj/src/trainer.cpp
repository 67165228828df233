#include "mtd/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "mtd/binary_io.hpp"
#include "mtd/digest.hpp"
#include "mtd/errors.hpp"
#include "mtd/kv_text.hpp"

namespace mtd {

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("train.epochs must be non-negative");
    if (warmup_epochs < 0 || (epochs > 0 && warmup_epochs >= epochs)) {
        throw ConfigError("train.warmup_epochs must be non-negative and smaller than train.epochs");
    }
    if (!(lr0 > 0.0)) throw ConfigError("train.lr0 must be positive");
    if (!(decay_mult > 0.0 && decay_mult <= 1.0)) throw ConfigError("train.decay_mult must lie in (0, 1]");
    if (decay_every <= 0) throw ConfigError("train.decay_every must be positive");
    if (batch_size <= 0 || batch_size % 2 != 0) throw ConfigError("train.batch_size must be positive and even");
    if (batches_per_epoch <= 0) throw ConfigError("train.batches_per_epoch must be positive");
    if (val_batches <= 0) throw ConfigError("train.val_batches must be positive");
    distill.validate();
}

TrainConfig TrainConfig::full_schedule() {
    TrainConfig c;
    c.epochs = 80;
    return c;
}

double lr_schedule(int epoch, const TrainConfig& c) {
    if (epoch < 0 || epoch >= c.epochs) {
        throw UsageError("lr_schedule: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(c.epochs) + ")");
    }
    if (epoch < c.warmup_epochs) {
        if (c.constant_warmup) return c.lr0;
        return c.lr0 * static_cast<double>(epoch + 1) / static_cast<double>(c.warmup_epochs);
    }
    const int decays = (epoch - c.warmup_epochs) / c.decay_every;
    return c.lr0 * std::pow(c.decay_mult, decays);
}

bool TrainHistory::same_trajectory(const TrainHistory& other) const {
    if (epochs.size() != other.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        const auto& a = epochs[i];
        const auto& b = other.epochs[i];
        if (a.epoch != b.epoch || a.lr != b.lr || !(a.train_loss == b.train_loss) || a.val_f1 != b.val_f1) return false;
    }
    return true;
}

void Adam::step(const std::vector<std::pair<std::string, Tensor>>& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto [name, tensor] : params) {
        if (!tensor.has_grad()) continue;
        auto& [m, v] = moments_[name];
        auto values = tensor.mutable_values();
        auto grad = tensor.grad();
        if (m.size() != values.size()) {
            m.assign(values.size(), 0.0);
            v.assign(values.size(), 0.0);
        }
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad[i] * grad[i];
            values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

// ---------------------------------------------------------------------------
// Validation

double model_logit(const SyncModel& model, const FeatureMatrix& visual, const FeatureMatrix& audio) {
    NoGradGuard no_grad;
    ForwardOptions opt;
    opt.trace_layers = std::vector<LayerSpec>{};
    return model_forward(model, visual.to_tensor(), audio.to_tensor(), opt).logit_value();
}

double f1_score(const std::vector<AVPair>& pairs, const PairScorer& scorer) {
    long tp = 0, fp = 0, fn = 0;
    for (const AVPair& p : pairs) {
        const bool predicted = scorer(p) > 0.0;  // sigmoid(x) > 0.5
        if (predicted && p.label == 1) ++tp;
        else if (predicted) ++fp;
        else if (p.label == 1) ++fn;
    }
    if (tp == 0) return 0.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

double validate_f1(const SyncModel& model, const std::vector<AVPair>& pairs) {
    return f1_score(pairs, [&model](const AVPair& p) { return model_logit(model, p.visual_window, p.audio_window); });
}

double validate_f1(const SyncModel& model, const std::vector<Utterance>& val, int n_batches, int batch_size,
                   std::mt19937_64& rng, const SamplingOptions& sampling) {
    std::vector<AVPair> pairs;
    for (int b = 0; b < n_batches; ++b) {
        auto batch = sample_batch(val, batch_size, rng, model.config().audio_rate, sampling);
        for (auto& p : batch) pairs.push_back(std::move(p));
    }
    return validate_f1(model, pairs);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

constexpr std::uint64_t kValStream = 0x5eed0001ULL;
constexpr std::uint64_t kRegressorStream = 0x5eed0002ULL;

void check_compatible(const Corpus& corpus, const ModelConfig& m, const char* who) {
    if (m.d_visual_in != corpus.config.d_visual_in || m.d_audio_in != corpus.config.d_audio_in ||
        m.audio_rate != corpus.config.audio_rate) {
        throw ConfigError(std::string(who) + " input widths/audio_rate do not match the corpus");
    }
}

std::string rng_state_digest(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    const std::string state = os.str();
    return sha256_hex(std::string_view(state)).substr(0, 16);
}

std::vector<std::pair<std::string, Tensor>> named(const SyncModel& model) {
    return {model.parameters().begin(), model.parameters().end()};
}

struct SampleOutputs {
    ForwardOutput student;
    ForwardOutput teacher;
};

TrainResult run_training(const Corpus& corpus, SyncModel model, const SyncModel* teacher, const TrainConfig& config,
                         const TrainHooks& hooks) {
    config.validate();
    const DistillConfig& dc = config.distill;
    const int L = model.config().layers_per_block;
    const bool needs_teacher = dc.method != Method::BceOnly;
    if (needs_teacher && teacher == nullptr) throw UsageError("distillation method requires a teacher");

    FitNetsRegressors own_regressors;
    FitNetsRegressors* regressors = hooks.regressors;
    std::vector<LayerSpec> fit_layers;
    if (dc.method == Method::LastFitNets || dc.method == Method::SelFitNets) {
        fit_layers = fitnets_layers(dc.method == Method::LastFitNets ? FitNetsMode::Last : FitNetsMode::Sel, dc, L);
        if (regressors == nullptr) {
            own_regressors = FitNetsRegressors::create(fit_layers, model.config().d_model, teacher->config().d_model,
                                                       config.seed ^ kRegressorStream);
            regressors = &own_regressors;
        }
    }

    ForwardOptions fwd;
    fwd.tau_trace = trace_temperature(dc);
    fwd.trace_layers = traced_layers(dc, L);

    SamplingOptions sampling;
    sampling.exclude_near_zero = config.exclude_near_zero;

    std::mt19937_64 rng(config.seed);
    std::mt19937_64 val_rng(config.seed ^ kValStream);
    std::vector<AVPair> val_pairs;
    for (int b = 0; b < config.val_batches; ++b) {
        for (auto& p : sample_batch(corpus.val, config.batch_size, val_rng, model.config().audio_rate, sampling)) {
            val_pairs.push_back(std::move(p));
        }
    }

    TrainResult result;
    result.model = model.clone();
    if (hooks.on_start) hooks.on_start(model);
    Adam adam;
    const int B = config.batch_size;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, config);
        LossValues epoch_loss;
        for (int batch_idx = 0; batch_idx < config.batches_per_epoch; ++batch_idx) {
            const auto batch = sample_batch(corpus.train, B, rng, model.config().audio_rate, sampling);
            model.zero_grad();
            auto params = named(model);
            if (regressors != nullptr) {
                for (auto& [n, t] : regressors->named_parameters()) {
                    t.zero_grad();
                    params.emplace_back(n, t);
                }
            }

            LossValues batch_loss;
            if (dc.method == Method::RKD) {
                std::vector<SampleOutputs> outs(batch.size());
                std::vector<OutputPair> pairs;
                std::vector<int> labels;
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    {
                        NoGradGuard no_grad;
                        outs[i].teacher = model_forward(*teacher, batch[i].visual_window.to_tensor(),
                                                        batch[i].audio_window.to_tensor(), fwd);
                    }
                    outs[i].student = model_forward(model, batch[i].visual_window.to_tensor(),
                                                    batch[i].audio_window.to_tensor(), fwd);
                    if (!std::isfinite(outs[i].student.logit_value())) {
                        throw NumericalError("non-finite logit at epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(batch_idx));
                    }
                }
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    pairs.push_back({&outs[i].student, &outs[i].teacher});
                    labels.push_back(batch[i].label);
                }
                const LossBreakdown loss = rkd_batch_loss(pairs, labels);
                batch_loss = LossValues::of(loss);
                if (!std::isfinite(batch_loss.total)) {
                    throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_idx));
                }
                backward(loss.total);
            } else {
                for (const AVPair& pair : batch) {
                    const Tensor v = pair.visual_window.to_tensor();
                    const Tensor a = pair.audio_window.to_tensor();
                    ForwardOutput t_out;
                    if (needs_teacher) {
                        NoGradGuard no_grad;
                        t_out = model_forward(*teacher, v, a, fwd);
                    }
                    const ForwardOutput s_out = model_forward(model, v, a, fwd);
                    if (!std::isfinite(s_out.logit_value())) {
                        throw NumericalError("non-finite logit at epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(batch_idx));
                    }
                    LossBreakdown loss;
                    switch (dc.method) {
                        case Method::BceOnly:
                            loss = LossBreakdown::from_terms(bce_loss(s_out.logit, pair.label), {}, {}, {});
                            break;
                        case Method::KD: loss = kd_loss(s_out.logit, t_out.logit_value(), pair.label, dc.tau); break;
                        case Method::MTD: loss = mtd_loss(s_out, t_out, pair.label, dc); break;
                        case Method::MiniLMStar: loss = minilm_star_loss(s_out, t_out, pair.label); break;
                        case Method::LastFitNets:
                        case Method::SelFitNets:
                            loss = fitnets_loss(s_out, t_out, fit_layers, *regressors, pair.label);
                            break;
                        case Method::RKD: break;
                    }
                    const LossValues lv = LossValues::of(loss);
                    if (!std::isfinite(lv.total)) {
                        throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(batch_idx));
                    }
                    batch_loss += lv.scaled(1.0 / B);
                    backward(scale(loss.total, 1.0 / B));
                }
            }
            epoch_loss += batch_loss;
            adam.step(params, lr);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr;
        rec.train_loss = epoch_loss.scaled(1.0 / config.batches_per_epoch);
        rec.val_f1 = validate_f1(model, val_pairs);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.epochs.push_back(rec);

        if (result.best_epoch < 0 || rec.val_f1 > result.best_val_f1) {
            result.best_val_f1 = rec.val_f1;
            result.best_epoch = epoch;
            result.model = model.clone();
            result.rng_digest = rng_state_digest(rng);
            if (!config.checkpoint_path.empty()) {
                CheckpointMeta meta;
                meta.epoch = epoch;
                meta.val_f1 = rec.val_f1;
                meta.rng_digest = result.rng_digest;
                meta.extra["method"] = std::string(method_name(dc.method));
                meta.extra["tau"] = format_double(dc.tau);
                save_checkpoint(result.model, meta, config.checkpoint_path);
            }
        }
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model);
    }
    if (result.rng_digest.empty()) result.rng_digest = rng_state_digest(rng);
    result.model.zero_grad();
    return result;
}

}  // namespace

TrainResult train_teacher(const Corpus& corpus, const ModelConfig& model_config, const TrainConfig& config,
                          const TrainHooks& hooks) {
    check_compatible(corpus, model_config, "teacher");
    TrainConfig c = config;
    c.distill.method = Method::BceOnly;
    return run_training(corpus, init_model(model_config), nullptr, c, hooks);
}

TrainResult distill_student(const SyncModel& teacher, const Corpus& corpus, const SyncModel& student_init,
                            const TrainConfig& config, const TrainHooks& hooks) {
    const ModelConfig& s = student_init.config();
    const ModelConfig& t = teacher.config();
    check_compatible(corpus, s, "student");
    if (config.distill.method != Method::BceOnly) {
        check_compatible(corpus, t, "teacher");
        if (s.layers_per_block != t.layers_per_block) {
            throw ConfigError("teacher and student must have the same number of layers per block");
        }
        const bool uses_traces = config.distill.method == Method::MTD || config.distill.method == Method::MiniLMStar;
        if (uses_traces && s.n_heads != t.n_heads) {
            throw ConfigError("attention-trace distillation needs equal head counts (student " +
                              std::to_string(s.n_heads) + ", teacher " + std::to_string(t.n_heads) + ")");
        }
    }
    for (const LayerSpec& spec : config.distill.layer_set) {
        if (spec.layer > s.layers_per_block) {
            throw ConfigError("layer " + layer_spec_to_string(spec) + " exceeds block depth " +
                              std::to_string(s.layers_per_block));
        }
    }
    SyncModel student = student_init.clone();
    student.set_requires_grad(true);
    return run_training(corpus, std::move(student), &teacher, config, hooks);
}

TrainResult distill_student(const SyncModel& teacher, const Corpus& corpus, const ModelConfig& student_config,
                            const TrainConfig& config, const TrainHooks& hooks) {
    return distill_student(teacher, corpus, init_model(student_config), config, hooks);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[] = "MTDCKPT1";

ModelConfig parse_model_config(const std::map<std::string, std::string>& h, std::uint64_t at) {
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = h.find(key);
        if (it == h.end()) throw FormatError("checkpoint metadata lacks '" + key + "'", at);
        return it->second;
    };
    ModelConfig c;
    try {
        c.d_model = static_cast<int>(kv_to_int("model.d_model", get("model.d_model")));
        c.n_heads = static_cast<int>(kv_to_int("model.n_heads", get("model.n_heads")));
        c.layers_per_block = static_cast<int>(kv_to_int("model.layers_per_block", get("model.layers_per_block")));
        c.ffn_mult = static_cast<int>(kv_to_int("model.ffn_mult", get("model.ffn_mult")));
        c.d_visual_in = static_cast<int>(kv_to_int("model.d_visual_in", get("model.d_visual_in")));
        c.d_audio_in = static_cast<int>(kv_to_int("model.d_audio_in", get("model.d_audio_in")));
        c.audio_rate = static_cast<int>(kv_to_int("model.audio_rate", get("model.audio_rate")));
        c.seed = kv_to_u64("model.seed", get("model.seed"));
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("bad checkpoint metadata: ") + e.what(), at);
    }
    return c;
}

}  // namespace

std::string model_config_text(const ModelConfig& c, const std::string& prefix) {
    std::ostringstream os;
    os << prefix << "d_model = " << c.d_model << '\n'
       << prefix << "n_heads = " << c.n_heads << '\n'
       << prefix << "layers_per_block = " << c.layers_per_block << '\n'
       << prefix << "ffn_mult = " << c.ffn_mult << '\n'
       << prefix << "d_visual_in = " << c.d_visual_in << '\n'
       << prefix << "d_audio_in = " << c.d_audio_in << '\n'
       << prefix << "audio_rate = " << c.audio_rate << '\n'
       << prefix << "seed = " << c.seed << '\n';
    return os.str();
}

std::vector<char> encode_checkpoint(const SyncModel& model, const CheckpointMeta& meta) {
    std::ostringstream md;
    md << model_config_text(model.config());
    md << "meta.epoch = " << meta.epoch << '\n'
       << "meta.val_f1 = " << format_double(meta.val_f1) << '\n'
       << "meta.rng_digest = " << (meta.rng_digest.empty() ? "none" : meta.rng_digest) << '\n';
    for (const auto& [k, v] : meta.extra) md << "meta." << k << " = " << v << '\n';
    md << "tensors = " << model.parameters().size() << '\n';

    io::ByteWriter w;
    w.bytes(kCkptMagic);
    w.u32(kCheckpointVersion);
    w.text(md.str());
    for (const auto& [name, t] : model.parameters()) {  // std::map: sorted by name
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name);
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        for (double v : t.values()) w.f32(static_cast<float>(v));
    }
    return w.buffer();
}

void save_checkpoint(const SyncModel& model, const CheckpointMeta& meta, const std::string& path) {
    io::write_file(path, encode_checkpoint(model, meta));
}

LoadedCheckpoint decode_checkpoint(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes));
    const std::string magic = r.bytes(8, "magic");
    if (magic.compare(0, 7, kCkptMagic, 7) != 0) throw FormatError("not a checkpoint file (bad magic)", 0);
    if (magic[7] != kCkptMagic[7]) throw FormatError("unsupported checkpoint magic '" + magic + "'", 7);
    const std::uint32_t version = r.u32("format version");
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")", 8);
    }
    const std::uint64_t meta_at = r.offset();
    std::map<std::string, std::string> h;
    try {
        h = kv_map(parse_kv_text(r.text("metadata")));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed checkpoint metadata: ") + e.what(), meta_at);
    }
    LoadedCheckpoint out;
    const ModelConfig config = parse_model_config(h, meta_at);
    for (const auto& [k, v] : h) {
        if (!k.starts_with("meta.")) continue;
        const std::string key = k.substr(5);
        if (key == "epoch") out.meta.epoch = static_cast<int>(kv_to_int(k, v));
        else if (key == "val_f1") out.meta.val_f1 = kv_to_double(k, v);
        else if (key == "rng_digest") out.meta.rng_digest = v == "none" ? "" : v;
        else out.meta.extra[key] = v;
    }
    const auto expected = parameter_shapes(config);
    auto count_it = h.find("tensors");
    const long long count = count_it == h.end() ? -1 : kv_to_int("tensors", count_it->second);
    if (count != static_cast<long long>(expected.size())) {
        throw FormatError("checkpoint declares " + std::to_string(count) + " tensors, configuration needs " +
                          std::to_string(expected.size()), meta_at);
    }
    ParameterMap params;
    for (long long i = 0; i < count; ++i) {
        const std::uint64_t at = r.offset();
        const std::uint32_t name_len = r.u32("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint32_t rank = r.u32("tensor rank");
        if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), at);
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("tensor dims"));
        auto exp = expected.find(name);
        if (exp == expected.end()) throw FormatError("unexpected tensor '" + name + "'", at);
        if (exp->second != shape) {
            throw FormatError("tensor '" + name + "' has shape " + shape_to_string(shape) + ", configuration needs " +
                              shape_to_string(exp->second), at);
        }
        const std::size_t n = shape_numel(shape);
        r.need(n * sizeof(float), "tensor values");
        std::vector<double> values(n);
        for (double& v : values) v = r.f32("tensor values");
        params.emplace(name, Tensor::from(shape, std::move(values), true));
    }
    if (!r.at_end()) throw FormatError("trailing bytes after last tensor", r.offset());
    out.model = SyncModel(config, std::move(params));
    return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    LoadedCheckpoint ck = load_checkpoint(path);
    const ModelConfig& got = ck.model.config();
    auto check = [](const char* field, long long want, long long have) {
        if (want != have) {
            throw ShapeError(std::string("checkpoint ") + field + " = " + std::to_string(have) + " but " +
                             std::to_string(want) + " was expected");
        }
    };
    check("d_model", expected.d_model, got.d_model);
    check("n_heads", expected.n_heads, got.n_heads);
    check("layers_per_block", expected.layers_per_block, got.layers_per_block);
    check("ffn_mult", expected.ffn_mult, got.ffn_mult);
    check("d_visual_in", expected.d_visual_in, got.d_visual_in);
    check("d_audio_in", expected.d_audio_in, got.d_audio_in);
    check("audio_rate", expected.audio_rate, got.audio_rate);
    return ck;
}

}  // namespace mtd
