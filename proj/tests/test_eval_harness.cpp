#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "mtd/errors.hpp"
#include "mtd/eval_harness.hpp"
#include "test_support.hpp"

using namespace mtd;
using mtd::test::small_corpus_config;

namespace {

const Corpus& corpus64() {
    static const Corpus c = [] {
        CorpusConfig cfg = small_corpus_config(7);
        cfg.frames_per_utterance = 64;
        return generate_corpus(cfg);
    }();
    return c;
}

ModelConfig toy_model(const Corpus& c, int d, std::uint64_t seed) {
    ModelConfig m;
    m.d_model = d;
    m.n_heads = 2;
    m.layers_per_block = 2;
    m.ffn_mult = 2;
    m.d_visual_in = c.config.d_visual_in;
    m.d_audio_in = c.config.d_audio_in;
    m.audio_rate = c.config.audio_rate;
    m.seed = seed;
    return m;
}

bool is_query_start(int v) { return v >= kMaxOffset && (v - kMaxOffset) % 7 == 0; }

}  // namespace

TEST(EvalConfig, CandidatesAndValidation) {
    EvalConfig c;
    EXPECT_EQ(c.candidate_count(), 31);
    EXPECT_EQ(c.max_length(), 15);
    EXPECT_NO_THROW(c.validate());
    c.frame_lengths = {4};
    EXPECT_ANY_THROW(c.validate());
    c.frame_lengths = {5};
    c.tolerance = -1;
    EXPECT_ANY_THROW(c.validate());
}

TEST(Queries, PreferenceOrder) {
    EXPECT_EQ(offsets_by_preference(2), (std::vector<int>{0, -1, 1, -2, 2}));
    EXPECT_EQ(offsets_by_preference(15).size(), 31u);
}

TEST(Queries, EnumerationLeavesRoomForEveryCandidate) {
    EvalConfig c;
    c.n_queries = 0;
    const auto qs = enumerate_queries(corpus64().test, c);
    // v = 15, 22, 29 fit a 64-frame utterance with length 15 and offset +15.
    EXPECT_EQ(qs.queries.size(), 3u * corpus64().test.size());
    EXPECT_EQ(qs.skipped_utterances, 0);
    for (const auto& q : qs.queries) {
        EXPECT_GE(q.visual_start - c.half_window, 0);
        EXPECT_LE(q.visual_start + c.half_window + c.max_length(), static_cast<int>(q.utterance->frames()));
    }
}

TEST(Queries, ShortUtterancesAreSkipped) {
    const Corpus c = generate_corpus(small_corpus_config(7));
    const auto qs = enumerate_queries(c.test, EvalConfig{});
    EXPECT_TRUE(qs.queries.empty());
    EXPECT_EQ(qs.skipped_utterances, static_cast<int>(c.test.size()));
}

TEST(Queries, CapKeepsEnumerationOrder) {
    EvalConfig all;
    all.n_queries = 0;
    EvalConfig capped;
    capped.n_queries = 7;
    const auto full = enumerate_queries(corpus64().test, all).queries;
    const auto some = enumerate_queries(corpus64().test, capped).queries;
    ASSERT_EQ(some.size(), 7u);
    std::size_t j = 0;
    for (const auto& q : some) {
        while (j < full.size() && (full[j].utterance != q.utterance || full[j].visual_start != q.visual_start)) ++j;
        ASSERT_LT(j, full.size());
        ++j;
    }
    const auto again = enumerate_queries(corpus64().test, capped).queries;
    for (std::size_t i = 0; i < some.size(); ++i) EXPECT_EQ(again[i].visual_start, some[i].visual_start);
}

TEST(Retrieval, OracleScorerIsPerfectAtEveryLength) {
    const auto r = multi_length_eval(oracle_scorer(), corpus64().test, EvalConfig{});
    ASSERT_EQ(r.lengths.size(), 6u);
    for (const auto& l : r.lengths) {
        EXPECT_EQ(l.accuracy, 1.0) << l.frame_length;
        EXPECT_EQ(l.correct, l.queries);
        EXPECT_GT(l.queries, 0);
    }
}

TEST(Retrieval, RandomScorerMatchesCombinatorialBaseline) {
    CorpusConfig cfg = small_corpus_config(8);
    cfg.n_train = 0;
    cfg.n_val = 0;
    cfg.n_test = 200;
    cfg.frames_per_utterance = 400;
    cfg.d_visual_in = 2;
    cfg.d_audio_in = 2;
    const Corpus c = generate_corpus(cfg);
    EvalConfig e;
    e.frame_lengths = {5};
    e.n_queries = 0;
    const auto r = multi_length_eval(random_scorer(3), c.test, e);
    ASSERT_GE(r.lengths[0].queries, 10000);
    EXPECT_NEAR(r.lengths[0].accuracy, 3.0 / 31.0, 0.01);
}

TEST(Retrieval, TiesPreferSmallerThenNegativeOffsets) {
    EvalConfig e;
    e.frame_lengths = {5};
    const Query q{&corpus64().test[0], 15};
    EXPECT_EQ(predict_offset([](const WindowQuery&) { return 0.0; }, q, 5, e), 0);
    EXPECT_EQ(predict_offset([](const WindowQuery& w) { return std::abs(w.offset) == 4 ? 1.0 : 0.0; }, q, 5, e), -4);
    EXPECT_EQ(predict_offset([](const WindowQuery& w) { return w.offset == 9 ? 2.0 : 0.0; }, q, 5, e), 9);
}

TEST(Retrieval, LengthFiveUsesOneWindowAndLongerLengthsAverage) {
    // At the query start offset +3 scores 10; every later window prefers 0 with 4.
    const WindowScorer scorer = [](const WindowQuery& w) {
        if (is_query_start(w.visual_start)) return w.offset == 3 ? 10.0 : 0.0;
        return w.offset == 0 ? 4.0 : 0.0;
    };
    EvalConfig e;
    e.frame_lengths = {5, 7, 9};
    const Query q{&corpus64().test[0], 15};
    EXPECT_EQ(predict_offset(scorer, q, 5, e), 3);
    EXPECT_EQ(predict_offset(scorer, q, 7, e), 3);   // 10/3 > 8/3
    EXPECT_EQ(predict_offset(scorer, q, 9, e), 0);   // 16/5 > 10/5
    const auto r = multi_length_eval(scorer, corpus64().test, e);
    EXPECT_EQ(r.accuracy_at(5), 0.0);
    EXPECT_EQ(r.accuracy_at(7), 0.0);
    EXPECT_EQ(r.accuracy_at(9), 1.0);
}

TEST(Retrieval, WindowsFollowStride) {
    std::set<int> starts;
    const WindowScorer scorer = [&](const WindowQuery& w) {
        starts.insert(w.visual_start);
        return 0.0;
    };
    EvalConfig e;
    e.frame_lengths = {9};
    e.stride = 2;
    predict_offset(scorer, Query{&corpus64().test[0], 15}, 9, e);
    EXPECT_EQ(starts, (std::set<int>{15, 17, 19}));
}

TEST(Retrieval, AccuracyIsMonotoneInTolerance) {
    const SyncModel m = init_model(toy_model(corpus64(), 8, 3));
    double previous = -1.0;
    for (int tol : {0, 1, 2, 5, 14}) {
        EvalConfig e;
        e.frame_lengths = {5, 9};
        e.tolerance = tol;
        e.n_queries = 12;
        const auto r = multi_length_eval(model_scorer(m), corpus64().test, e);
        EXPECT_GE(r.accuracy_at(5), previous);
        previous = r.accuracy_at(5);
    }
}

TEST(Retrieval, ModelEvaluationIsDeterministic) {
    const SyncModel m = init_model(toy_model(corpus64(), 8, 3));
    EvalConfig e;
    e.frame_lengths = {5, 7};
    e.n_queries = 9;
    const auto a = multi_length_eval(m, corpus64().test, e);
    const auto b = multi_length_eval(m, corpus64().test, e);
    ASSERT_EQ(a.lengths.size(), b.lengths.size());
    for (std::size_t i = 0; i < a.lengths.size(); ++i) {
        EXPECT_EQ(a.lengths[i].correct, b.lengths[i].correct);
        EXPECT_EQ(a.lengths[i].queries, 9);
    }
    EXPECT_EQ(retrieval_accuracy(m, corpus64().test, 7, e), a.accuracy_at(7));
}

TEST(Ablation, AxisSizes) {
    EXPECT_EQ(default_axis(AblationKind::MtdTerms, {}).size(), 4u);
    EXPECT_EQ(default_axis(AblationKind::LayerSweep, {}).size(), 12u);
    EXPECT_EQ(default_axis(AblationKind::LayerSets, {}).size(), 8u);
    EXPECT_EQ(default_axis(AblationKind::Temperature, {}).size(), 5u);
    EXPECT_EQ(default_axis(AblationKind::Methods, {}).size(), 7u);
    const auto terms = default_axis(AblationKind::MtdTerms, {});
    EXPECT_EQ(terms[0].distill.method, Method::BceOnly);
    EXPECT_FALSE(terms[1].distill.include_vr);
    EXPECT_FALSE(terms[2].distill.include_cad);
    EXPECT_TRUE(terms[3].distill.include_cad && terms[3].distill.include_vr);
    const auto taus = temperature_axis({1, 5, 25}, {});
    ASSERT_EQ(taus.size(), 3u);
    EXPECT_EQ(taus[2].distill.tau, 25.0);
}

TEST(Ablation, KindNamesRoundTrip) {
    for (auto k : {AblationKind::MtdTerms, AblationKind::LayerSweep, AblationKind::LayerSets,
                   AblationKind::Temperature, AblationKind::Methods, AblationKind::LossTracking}) {
        EXPECT_EQ(parse_ablation_kind(ablation_kind_name(k)), k);
    }
    EXPECT_THROW(parse_ablation_kind("nope"), ConfigError);
}

TEST(Ablation, MissingTeacherIsUsageError) {
    AblationContext ctx;
    ctx.corpus = &corpus64();
    ctx.student = toy_model(corpus64(), 8, 3);
    EXPECT_THROW(run_ablation(make_ablation(AblationKind::Methods, {1}), ctx), UsageError);
}

TEST(Ablation, RowsArePairedBySeed) {
    const SyncModel teacher = init_model(toy_model(corpus64(), 12, 4));
    AblationContext ctx;
    ctx.teacher = &teacher;
    ctx.corpus = &corpus64();
    ctx.student = toy_model(corpus64(), 8, 3);
    ctx.train.epochs = 1;
    ctx.train.warmup_epochs = 0;
    ctx.train.batch_size = 4;
    ctx.train.batches_per_epoch = 1;
    ctx.train.val_batches = 1;
    ctx.eval.frame_lengths = {5};
    ctx.eval.n_queries = 6;
    DistillConfig base;
    base.layer_set = {{Block::Fusion, 2}};
    AblationSpec spec = make_ablation(AblationKind::Temperature, {1, 2}, base);
    spec.axis = temperature_axis({1, 5}, base);
    int seen = 0;
    ctx.on_row = [&](const AblationRow&) { ++seen; };
    const auto report = run_ablation(spec, ctx);
    ASSERT_EQ(report.rows.size(), 4u);
    EXPECT_EQ(seen, 4);
    const auto means = report.means();
    ASSERT_EQ(means.size(), 2u);
    EXPECT_EQ(means[0].first, "tau=1");
    double sum = 0.0;
    for (const auto& row : report.rows)
        if (row.axis_label == "tau=1") sum += row.report.accuracy_at(5);
    EXPECT_DOUBLE_EQ(report.mean_accuracy("tau=1", 5), sum / 2.0);
}

TEST(LossTracking, RecordsEveryEpochWithFiniteValues) {
    const SyncModel teacher = init_model(toy_model(corpus64(), 12, 4));
    TrainConfig t;
    t.epochs = 2;
    t.warmup_epochs = 1;
    t.decay_every = 1;
    t.lr0 = 1e-3;
    t.batch_size = 4;
    t.batches_per_epoch = 2;
    t.val_batches = 1;
    t.distill.layer_set = {{Block::Fusion, 2}, {Block::AV, 1}};
    t.distill.tau = 5.0;
    for (Method m : {Method::MTD, Method::LastFitNets, Method::SelFitNets}) {
        const auto trace = loss_tracking_run(m, teacher, corpus64(), toy_model(corpus64(), 8, 3), t, 8);
        EXPECT_EQ(trace.optimized, m);
        ASSERT_EQ(trace.records.size(), 3u);
        for (std::size_t i = 0; i < trace.records.size(); ++i) {
            const auto& r = trace.records[i];
            EXPECT_EQ(r.epoch, static_cast<int>(i));
            EXPECT_TRUE(std::isfinite(r.mtd) && std::isfinite(r.last_fitnets) && std::isfinite(r.sel_fitnets));
            EXPECT_GT(r.mtd, 0.0);
        }
    }
    EXPECT_THROW(loss_tracking_run(Method::KD, teacher, corpus64(), toy_model(corpus64(), 8, 3), t, 8), UsageError);
}

TEST(LossTracking, SelfTeacherMonitorsZeroBehaviorLoss) {
    const SyncModel m = init_model(toy_model(corpus64(), 8, 3));
    std::mt19937_64 rng(1);
    const auto pairs = sample_batch(corpus64().val, 4, rng, corpus64().config.audio_rate);
    DistillConfig d;
    d.layer_set = {{Block::Fusion, 2}};
    d.tau = 5.0;
    std::vector<LayerSpec> layers = d.layer_set;
    for (const auto& l : last_layers(2)) layers.push_back(l);
    const auto reg = FitNetsRegressors::identity(layers, 8);
    const auto v = monitor_losses(m, m, pairs, d, reg);
    EXPECT_NEAR(v.mtd, 0.0, 1e-12);
    EXPECT_NEAR(v.last_fitnets, 0.0, 1e-12);
    EXPECT_NEAR(v.sel_fitnets, 0.0, 1e-12);
}
