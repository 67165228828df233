#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mtd/digest.hpp"
#include "mtd/errors.hpp"
#include "mtd/trainer.hpp"
#include "test_support.hpp"

using namespace mtd;
using mtd::test::small_corpus_config;

namespace {

const Corpus& corpus() {
    static const Corpus c = generate_corpus(small_corpus_config(7));
    return c;
}

ModelConfig model_for(const Corpus& c, int d, int heads, std::uint64_t seed) {
    ModelConfig m;
    m.d_model = d;
    m.n_heads = heads;
    m.layers_per_block = 2;
    m.ffn_mult = 2;
    m.d_visual_in = c.config.d_visual_in;
    m.d_audio_in = c.config.d_audio_in;
    m.audio_rate = c.config.audio_rate;
    m.seed = seed;
    return m;
}

TrainConfig quick_config(int epochs = 2) {
    TrainConfig t;
    t.epochs = epochs;
    t.warmup_epochs = epochs > 1 ? 1 : 0;
    t.lr0 = 1e-3;
    t.decay_every = 2;
    t.batch_size = 8;
    t.batches_per_epoch = 3;
    t.val_batches = 2;
    t.seed = 5;
    t.distill.layer_set = {{Block::Fusion, 2}, {Block::AV, 1}};
    t.distill.tau = 5.0;
    return t;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("mtd_trainer_" + name);
}

double max_abs_diff(const SyncModel& a, const SyncModel& b) {
    double worst = 0.0;
    for (const auto& [name, t] : a.parameters()) {
        const auto u = b.param(name).values();
        const auto v = t.values();
        for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(v[i] - u[i]));
    }
    return worst;
}

AVPair pair_with_label(int label) {
    AVPair p;
    p.label = label;
    return p;
}

}  // namespace

TEST(Schedule, WarmupAndDecayValues) {
    const TrainConfig t;
    EXPECT_NEAR(lr_schedule(0, t), 5e-6, 1e-18);
    EXPECT_NEAR(lr_schedule(9, t), 5e-5, 1e-18);
    EXPECT_NEAR(lr_schedule(10, t), 5e-5, 1e-18);
    EXPECT_NEAR(lr_schedule(30, t), 4e-5, 1e-18);
    TrainConfig flat = t;
    flat.constant_warmup = true;
    EXPECT_EQ(lr_schedule(0, flat), 5e-5);
}

TEST(Schedule, MonotoneWithinPhases) {
    const TrainConfig t = TrainConfig::full_schedule();
    EXPECT_EQ(t.epochs, 80);
    for (int e = 1; e < t.warmup_epochs; ++e) EXPECT_GT(lr_schedule(e, t), lr_schedule(e - 1, t));
    for (int e = t.warmup_epochs + 1; e < t.epochs; ++e) EXPECT_LE(lr_schedule(e, t), lr_schedule(e - 1, t));
    for (int e = 0; e < t.epochs; ++e) EXPECT_LE(lr_schedule(e, t), t.lr0);
}

TEST(Schedule, OutOfRangeEpoch) {
    const TrainConfig t;
    EXPECT_THROW(lr_schedule(-1, t), UsageError);
    EXPECT_THROW(lr_schedule(t.epochs, t), UsageError);
}

TEST(F1, ReferenceCases) {
    std::vector<AVPair> pairs;
    for (int i = 0; i < 6; ++i) pairs.push_back(pair_with_label(i % 2));
    EXPECT_DOUBLE_EQ(f1_score(pairs, [](const AVPair& p) { return p.label ? 3.0 : -3.0; }), 1.0);
    // Everything positive: precision 1/2, recall 1.
    EXPECT_NEAR(f1_score(pairs, [](const AVPair&) { return 1.0; }), 2.0 / 3.0, 1e-12);
    EXPECT_EQ(f1_score(pairs, [](const AVPair& p) { return p.label ? -3.0 : 3.0; }), 0.0);
    EXPECT_EQ(f1_score(pairs, [](const AVPair&) { return 0.0; }), 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    Tensor w = Tensor::matrix(1, 2, {1.0, -1.0}, true);
    backward(sum(mul(w, w)));
    Adam adam;
    adam.step({{"w", w}}, 0.1);
    // Bias-corrected first step is lr·sign(g).
    EXPECT_NEAR(w.values()[0], 0.9, 1e-6);
    EXPECT_NEAR(w.values()[1], -0.9, 1e-6);
    EXPECT_EQ(adam.steps(), 1);
}

TEST(Training, ZeroEpochsReturnsInitialModel) {
    const ModelConfig mc = model_for(corpus(), 8, 2, 3);
    TrainConfig t = quick_config(0);
    const auto r = train_teacher(corpus(), mc, t);
    EXPECT_TRUE(r.history.epochs.empty());
    EXPECT_EQ(parameter_digest(r.model), parameter_digest(init_model(mc)));
}

TEST(Training, DeterministicUnderSeed) {
    const ModelConfig mc = model_for(corpus(), 8, 2, 3);
    const auto a = train_teacher(corpus(), mc, quick_config());
    const auto b = train_teacher(corpus(), mc, quick_config());
    EXPECT_TRUE(a.history.same_trajectory(b.history));
    EXPECT_EQ(parameter_digest(a.model), parameter_digest(b.model));
    EXPECT_EQ(a.rng_digest, b.rng_digest);
    TrainConfig other = quick_config();
    other.seed = 6;
    const auto c = train_teacher(corpus(), mc, other);
    EXPECT_NE(parameter_digest(a.model), parameter_digest(c.model));
}

TEST(Training, HistoryRecordsScheduleAndFiniteLosses) {
    const ModelConfig mc = model_for(corpus(), 8, 2, 3);
    const TrainConfig t = quick_config(3);
    const auto r = train_teacher(corpus(), mc, t);
    ASSERT_EQ(r.history.epochs.size(), 3u);
    for (const auto& e : r.history.epochs) {
        EXPECT_EQ(e.lr, lr_schedule(e.epoch, t));
        EXPECT_TRUE(std::isfinite(e.train_loss.total));
        EXPECT_GT(e.train_loss.bce, 0.0);
        EXPECT_EQ(e.train_loss.cad, 0.0);
        EXPECT_GE(e.val_f1, 0.0);
        EXPECT_LE(e.val_f1, 1.0);
    }
}

TEST(Training, BestModelIsTheBestEpoch) {
    const ModelConfig mc = model_for(corpus(), 8, 2, 3);
    TrainConfig t = quick_config(4);
    const auto path = temp_path("best.ckpt");
    t.checkpoint_path = path.string();
    std::vector<SyncModel> snapshots;
    TrainHooks hooks;
    hooks.on_epoch_end = [&](int, const SyncModel& m) { snapshots.push_back(m.clone()); };
    const auto r = train_teacher(corpus(), mc, t, hooks);
    double best = 0.0;
    for (const auto& e : r.history.epochs) best = std::max(best, e.val_f1);
    EXPECT_EQ(r.best_val_f1, best);
    ASSERT_GE(r.best_epoch, 0);
    EXPECT_EQ(r.history.epochs[static_cast<std::size_t>(r.best_epoch)].val_f1, best);
    EXPECT_EQ(parameter_digest(r.model), parameter_digest(snapshots[static_cast<std::size_t>(r.best_epoch)]));
    const auto loaded = load_checkpoint(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(loaded.meta.val_f1, best);
    EXPECT_EQ(loaded.meta.epoch, r.best_epoch);
    EXPECT_LT(max_abs_diff(loaded.model, r.model), 1e-6);
}

TEST(Training, BceOnlyDistillationEqualsTeacherTraining) {
    const ModelConfig mc = model_for(corpus(), 8, 2, 3);
    TrainConfig t = quick_config();
    const auto a = train_teacher(corpus(), mc, t);
    t.distill.method = Method::BceOnly;
    const SyncModel unused_teacher = init_model(model_for(corpus(), 12, 3, 4));
    const auto b = distill_student(unused_teacher, corpus(), mc, t);
    EXPECT_TRUE(a.history.same_trajectory(b.history));
    EXPECT_EQ(parameter_digest(a.model), parameter_digest(b.model));
}

TEST(Distillation, TeacherIsNeverModified) {
    const SyncModel teacher = init_model(model_for(corpus(), 12, 2, 4));
    const std::string before = parameter_digest(teacher);
    for (Method m : kAllMethods) {
        TrainConfig t = quick_config(1);
        t.distill.method = m;
        distill_student(teacher, corpus(), model_for(corpus(), 8, 2, 3), t);
        EXPECT_EQ(parameter_digest(teacher), before) << method_name(m);
        for (const auto& [name, p] : teacher.parameters()) {
            if (p.has_grad()) {
                for (double g : p.grad()) ASSERT_EQ(g, 0.0) << name;
            }
        }
    }
}

TEST(Distillation, SelfDistillationStartsWithZeroBehaviorLoss) {
    const SyncModel teacher = init_model(model_for(corpus(), 8, 2, 4));
    TrainConfig t = quick_config(1);
    t.batches_per_epoch = 1;
    const auto r = distill_student(teacher, corpus(), teacher, t);
    const auto& first = r.history.epochs.front().train_loss;
    EXPECT_NEAR(first.cad, 0.0, 1e-12);
    EXPECT_NEAR(first.vr, 0.0, 1e-12);
    EXPECT_NEAR(first.total, first.bce, 1e-12);
}

TEST(Distillation, NonFiniteLossAborts) {
    const SyncModel teacher = init_model(model_for(corpus(), 12, 2, 4));
    SyncModel student = init_model(model_for(corpus(), 8, 2, 3));
    student.parameters().begin()->second.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig t = quick_config(1);
    try {
        distill_student(teacher, corpus(), student, t);
        FAIL();
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
    }
}

TEST(Distillation, IncompatibleConfigurationsRejected) {
    const SyncModel teacher = init_model(model_for(corpus(), 12, 2, 4));
    TrainConfig t = quick_config(1);
    ModelConfig wrong_width = model_for(corpus(), 8, 2, 3);
    wrong_width.d_visual_in += 1;
    EXPECT_THROW(distill_student(teacher, corpus(), wrong_width, t), ConfigError);
    EXPECT_THROW(distill_student(teacher, corpus(), model_for(corpus(), 8, 4, 3), t), ConfigError);
    ModelConfig deeper = model_for(corpus(), 8, 2, 3);
    deeper.layers_per_block = 3;
    EXPECT_THROW(distill_student(teacher, corpus(), deeper, t), ConfigError);
    t.distill.layer_set = {{Block::Fusion, 3}};
    EXPECT_THROW(distill_student(teacher, corpus(), model_for(corpus(), 8, 2, 3), t), ConfigError);
}

TEST(Distillation, DefaultLayerSetNeedsFourLayers) {
    const SyncModel teacher = init_model(model_for(corpus(), 12, 2, 4));
    TrainConfig t = quick_config(1);
    t.distill = DistillConfig{};
    EXPECT_THROW(distill_student(teacher, corpus(), model_for(corpus(), 8, 2, 3), t), ConfigError);
}

TEST(Checkpoint, RoundTripPreservesModelAndMeta) {
    const SyncModel m = init_model(model_for(corpus(), 8, 2, 3));
    CheckpointMeta meta;
    meta.epoch = 3;
    meta.val_f1 = 0.75;
    meta.rng_digest = "abc";
    meta.extra["method"] = "mtd";
    const auto path = temp_path("roundtrip.ckpt");
    save_checkpoint(m, meta, path.string());
    const auto back = load_checkpoint(path.string(), m.config());
    std::filesystem::remove(path);
    EXPECT_EQ(back.model.config(), m.config());
    EXPECT_LT(max_abs_diff(back.model, m), 1e-6);
    EXPECT_EQ(back.meta.epoch, 3);
    EXPECT_EQ(back.meta.val_f1, 0.75);
    EXPECT_EQ(back.meta.rng_digest, "abc");
    EXPECT_EQ(back.meta.extra.at("method"), "mtd");
}

TEST(Checkpoint, LoadedModelScoresLikeTheOriginal) {
    const SyncModel m = init_model(model_for(corpus(), 8, 2, 3));
    const auto back = decode_checkpoint(encode_checkpoint(m, {}));
    std::mt19937_64 rng(1);
    for (const auto& p : sample_batch(corpus().val, 8, rng, corpus().config.audio_rate)) {
        EXPECT_NEAR(model_logit(back.model, p.visual_window, p.audio_window),
                    model_logit(m, p.visual_window, p.audio_window), 1e-4);
    }
}

TEST(Checkpoint, CorruptFilesRejected) {
    const SyncModel m = init_model(model_for(corpus(), 8, 2, 3));
    const auto bytes = encode_checkpoint(m, {});
    auto bad = bytes;
    bad[0] = 'Z';
    try {
        decode_checkpoint(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    bad = bytes;
    bad[8] = 9;
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    std::vector<char> cut(bytes.begin(), bytes.end() - 3);
    EXPECT_THROW(decode_checkpoint(cut), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(decode_checkpoint(extra), FormatError);
}

TEST(Checkpoint, ConfigMismatchIsShapeError) {
    const SyncModel m = init_model(model_for(corpus(), 8, 2, 3));
    const auto path = temp_path("mismatch.ckpt");
    save_checkpoint(m, {}, path.string());
    try {
        load_checkpoint(path.string(), model_for(corpus(), 16, 2, 3));
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("d_model"), std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST(Model, TemporalOrderMatters) {
    const ModelConfig mc = model_for(corpus(), 8, 2, 3);
    const auto r = train_teacher(corpus(), mc, quick_config(2));
    std::mt19937_64 rng(9);
    int changed = 0;
    for (const auto& p : sample_batch(corpus().val, 8, rng, corpus().config.audio_rate)) {
        FeatureMatrix reversed = p.audio_window;
        const std::size_t n = reversed.rows, w = reversed.cols;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) reversed.values[i * w + j] = p.audio_window.at(n - 1 - i, j);
        const double a = model_logit(r.model, p.visual_window, p.audio_window);
        const double b = model_logit(r.model, p.visual_window, reversed);
        if (std::abs(a - b) > 1e-6) ++changed;
    }
    EXPECT_EQ(changed, 8);
}
