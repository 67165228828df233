#include "mtd/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mtd/binary_io.hpp"
#include "mtd/config.hpp"
#include "mtd/digest.hpp"
#include "mtd/errors.hpp"
#include "mtd/eval_harness.hpp"
#include "mtd/report.hpp"
#include "mtd/synth_data.hpp"
#include "mtd/trainer.hpp"

namespace fs = std::filesystem;

namespace mtd {

namespace {

struct Options {
    std::string config_path;
    std::string run_dir;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> flag_overrides;

    std::string out;
    std::string corpus;
    std::string teacher;
    std::string ckpt;
    std::string history;
    std::string summary;
    std::string expect = "any";
    std::string optimize = "mtd";
    std::vector<std::string> ckpts;
};

class Runner {
public:
    Runner(const Options& o, std::string command, std::ostream& err) : o_(o), err_(err) {
        manifest_.command = std::move(command);
        const char* env = std::getenv(kRunDirEnv);
        run_dir_ = !o.run_dir.empty() ? o.run_dir : (env != nullptr && *env != '\0' ? env : ".");
        fs::create_directories(run_dir_);

        if (!o.config_path.empty()) {
            config_ = parse_config(o.config_path);
            manifest_.config_digest = sha256_file(o.config_path);
            inputs_.push_back(o.config_path);
        } else {
            manifest_.config_digest = sha256_hex(std::string_view{});
        }
        for (const std::string& s : o.sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
            auto trim = [](std::string x) {
                const auto b = x.find_first_not_of(" \t");
                const auto e = x.find_last_not_of(" \t");
                return b == std::string::npos ? std::string{} : x.substr(b, e - b + 1);
            };
            overrides_.emplace_back(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
        }
        for (const auto& kv : o.flag_overrides) overrides_.push_back(kv);
        apply_overrides(config_, overrides_);
        manifest_.overrides = overrides_;
        config_.finalize();
        t0_ = std::chrono::steady_clock::now();
    }

    RunConfig& config() { return config_; }
    RunManifest& manifest() { return manifest_; }
    std::ostream& log() { return err_; }

    std::string input(const std::string& path, const char* what) {
        if (path.empty()) throw UsageError(std::string("missing required --") + what);
        inputs_.push_back(path);
        return path;
    }

    std::string output(const std::string& path, const char* what) {
        if (path.empty()) throw UsageError(std::string("missing required --") + what);
        const fs::path p = fs::path(path).is_absolute() ? fs::path(path) : fs::path(run_dir_) / path;
        for (const std::string& in : inputs_) {
            std::error_code ec;
            if (fs::exists(in) && fs::exists(p) && fs::equivalent(in, p, ec)) {
                throw UsageError("output '" + p.string() + "' would overwrite input '" + in + "'");
            }
        }
        if (p.has_parent_path()) fs::create_directories(p.parent_path());
        return p.string();
    }

    Corpus load_input_corpus() {
        const std::string path = input(o_.corpus, "corpus");
        Corpus c = load_corpus(path);
        manifest_.corpus_digest = sha256_file(path);
        for (ModelConfig* m : {&config_.teacher, &config_.student}) {
            m->d_visual_in = c.config.d_visual_in;
            m->d_audio_in = c.config.d_audio_in;
            m->audio_rate = c.config.audio_rate;
        }
        return c;
    }

    LoadedCheckpoint load_ckpt(const std::string& path, const std::string& role) {
        input(path, role == "teacher" ? "teacher" : "ckpt");
        LoadedCheckpoint ck = load_checkpoint(path);
        manifest_.checkpoint_digests[role] = sha256_file(path);
        return ck;
    }

    void finish(const std::string& primary) {
        manifest_.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        io::write_text_file(primary + ".manifest", manifest_.text());
    }

    std::string summary_path(const std::string& primary) {
        return o_.summary.empty() ? primary + ".summary.txt" : output(o_.summary, "summary");
    }

    std::string history_path(const std::string& primary) {
        return o_.history.empty() ? primary + ".history.csv" : output(o_.history, "history");
    }

private:
    const Options& o_;
    std::ostream& err_;
    std::string run_dir_;
    RunConfig config_;
    RunManifest manifest_;
    std::vector<std::pair<std::string, std::string>> overrides_;
    std::vector<std::string> inputs_;
    std::chrono::steady_clock::time_point t0_;
};

void write_artifact(Runner& r, const std::string& path, const std::string& text) {
    io::write_text_file(path, text);
    r.manifest().add_artifact(path);
}

EpochCallback progress(Runner& r, const char* what) {
    return [&r, what](int epoch, const SyncModel&) { r.log() << what << ": epoch " << epoch + 1 << " done\n"; };
}

void cmd_gen_data(Runner& r, const Options& o) {
    const std::string out = r.output(o.out, "out");
    r.manifest().seed = r.config().corpus.seed;
    save_corpus(generate_corpus(r.config().corpus), out);
    r.manifest().add_artifact(out);
    r.manifest().corpus_digest = sha256_file(out);
    r.finish(out);
}

void write_training_outputs(Runner& r, const TrainResult& result, const std::string& out, const char* role) {
    CheckpointMeta meta;
    meta.epoch = result.best_epoch;
    meta.val_f1 = result.best_val_f1;
    meta.rng_digest = result.rng_digest;
    meta.extra["role"] = role;
    meta.extra["method"] = std::string(method_name(r.config().train.distill.method));
    save_checkpoint(result.model, meta, out);
    r.manifest().add_artifact(out);
    r.manifest().checkpoint_digests[role] = sha256_file(out);
    write_artifact(r, r.history_path(out), history_csv(result.history));
    r.log() << role << ": best val F1 " << fixed4(result.best_val_f1) << " at epoch " << result.best_epoch << '\n';
}

void cmd_train_teacher(Runner& r, const Options& o) {
    const Corpus corpus = r.load_input_corpus();
    const std::string out = r.output(o.out, "out");
    TrainConfig train = r.config().train;
    train.distill.method = Method::BceOnly;
    train.checkpoint_path = out;
    r.manifest().seed = train.seed;
    TrainHooks hooks;
    hooks.on_epoch_end = progress(r, "train-teacher");
    const TrainResult result = train_teacher(corpus, r.config().teacher, train, hooks);
    write_training_outputs(r, result, out, "teacher");
    r.finish(out);
}

void cmd_distill(Runner& r, const Options& o) {
    const Corpus corpus = r.load_input_corpus();
    const LoadedCheckpoint teacher = r.load_ckpt(o.teacher, "teacher");
    const std::string out = r.output(o.out, "out");
    r.manifest().seed = r.config().train.seed;
    TrainHooks hooks;
    hooks.on_epoch_end = progress(r, "distill");
    TrainConfig train = r.config().train;
    train.checkpoint_path = out;
    const TrainResult result = distill_student(teacher.model, corpus, r.config().student, train, hooks);
    write_training_outputs(r, result, out, "student");
    r.finish(out);
}

void cmd_evaluate(Runner& r, const Options& o) {
    const Corpus corpus = r.load_input_corpus();
    r.input(o.ckpt, "ckpt");
    LoadedCheckpoint ck;
    if (o.expect == "teacher") {
        ck = load_checkpoint(o.ckpt, r.config().teacher);
    } else if (o.expect == "student") {
        ck = load_checkpoint(o.ckpt, r.config().student);
    } else {
        ck = load_checkpoint(o.ckpt);
    }
    const std::string ck_digest = sha256_file(o.ckpt);
    r.manifest().checkpoint_digests["evaluated"] = ck_digest;
    const std::string out = r.output(o.out, "out");
    r.manifest().seed = r.config().eval.seed;
    EvalReport report = multi_length_eval(ck.model, corpus.test, r.config().eval);
    report.checkpoint_id = ck_digest;
    report.corpus_digest = r.manifest().corpus_digest;
    write_artifact(r, out, eval_csv(report));
    const SizeSummary sizes = size_summary(r.config().teacher, r.config().student);
    write_artifact(r, r.summary_path(out),
                   summary_text(r.manifest(), sizes, config_text(r.config()), eval_summary_body(report)));
    r.finish(out);
}

void cmd_ablate(Runner& r, const Options& o) {
    const Corpus corpus = r.load_input_corpus();
    const LoadedCheckpoint teacher = r.load_ckpt(o.teacher, "teacher");
    const std::string out = r.output(o.out, "out");
    const RunConfig& c = r.config();
    r.manifest().seed = c.ablate.seeds.front();
    std::string body;
    if (c.ablate.kind == AblationKind::LossTracking) {
        std::string csv = "epoch,optimized,last_fitnets,sel_fitnets,mtd\n";
        for (Method m : {Method::LastFitNets, Method::SelFitNets, Method::MTD}) {
            for (std::uint64_t seed : c.ablate.seeds) {
                ModelConfig student = c.student;
                student.seed = seed;
                TrainConfig train = c.train;
                train.seed = seed;
                const LossTrace trace = loss_tracking_run(m, teacher.model, corpus, student, train, c.ablate.monitor_pairs);
                const std::string part = loss_trace_csv(trace);
                csv += part.substr(part.find('\n') + 1);
                r.log() << "ablate: loss tracking " << method_name(m) << " seed " << seed << " done\n";
            }
        }
        write_artifact(r, out, csv);
    } else {
        AblationSpec spec = make_ablation(c.ablate.kind, c.ablate.seeds, c.train.distill);
        if (c.ablate.kind == AblationKind::Temperature && !c.ablate.taus.empty()) {
            spec.axis = temperature_axis(c.ablate.taus, c.train.distill);
        }
        if (c.ablate.kind == AblationKind::LayerSweep) {
            spec.axis = default_axis(AblationKind::LayerSweep, c.train.distill, c.student.layers_per_block);
        }
        AblationContext ctx;
        ctx.teacher = &teacher.model;
        ctx.corpus = &corpus;
        ctx.student = c.student;
        ctx.train = c.train;
        ctx.eval = c.eval;
        ctx.on_row = [&r](const AblationRow& row) {
            r.log() << "ablate: " << row.axis_label << " seed " << row.seed << " val F1 " << fixed4(row.val_f1) << '\n';
        };
        const AblationReport report = run_ablation(spec, ctx);
        write_artifact(r, out, ablation_csv(report));
        body = ablation_summary_body(report);
    }
    const SizeSummary sizes = size_summary(teacher.model.config(), c.student);
    write_artifact(r, r.summary_path(out), summary_text(r.manifest(), sizes, config_text(c), body));
    r.finish(out);
}

void cmd_loss_track(Runner& r, const Options& o) {
    const Corpus corpus = r.load_input_corpus();
    const LoadedCheckpoint teacher = r.load_ckpt(o.teacher, "teacher");
    const std::string out = r.output(o.out, "out");
    Method m;
    try {
        m = parse_method(o.optimize);
    } catch (const Error& e) {
        throw UsageError(std::string("--optimize: ") + e.what());
    }
    r.manifest().seed = r.config().train.seed;
    const LossTrace trace =
        loss_tracking_run(m, teacher.model, corpus, r.config().student, r.config().train, r.config().ablate.monitor_pairs);
    write_artifact(r, out, loss_trace_csv(trace));
    r.finish(out);
}

void cmd_report(Runner& r, const Options& o) {
    const std::string out = r.output(o.out, "out");
    const RunConfig& c = r.config();
    std::string body = "# literal-width profiles\n" +
                       size_summary_text(size_summary(ModelConfig::teacher_full_width(), ModelConfig::student_full_width()),
                                         "full_width.");
    for (std::size_t i = 0; i < o.ckpts.size(); ++i) {
        const LoadedCheckpoint ck = r.load_ckpt(o.ckpts[i], "input" + std::to_string(i));
        const ModelConfig& m = ck.model.config();
        body += "checkpoint." + std::to_string(i) + ".path = " + o.ckpts[i] + '\n';
        body += "checkpoint." + std::to_string(i) + ".d_model = " + std::to_string(m.d_model) + '\n';
        body += "checkpoint." + std::to_string(i) + ".params = " +
                std::to_string(param_count(ck.model, ParamScope::All)) + '\n';
        body += "checkpoint." + std::to_string(i) + ".val_f1 = " + fixed4(ck.meta.val_f1) + '\n';
    }
    write_artifact(r, out, summary_text(r.manifest(), size_summary(c.teacher, c.student), config_text(c), body));
    r.finish(out);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Multimodal transformer distillation for audio-visual synchronization", "mtd"};
    app.require_subcommand(0, 1);
    bool print_defaults = false;
    app.add_flag("--print-defaults", print_defaults, "Print every configuration key with its default and exit");

    Options o;
    auto common = [&](CLI::App* s) {
        s->add_option("--config", o.config_path, "Configuration file of `section.key = value` lines")
            ->check(CLI::ExistingFile);
        s->add_option("--run-dir", o.run_dir, std::string("Directory for relative outputs (default $") + kRunDirEnv + ")");
        s->add_option("--set", o.sets, "Override a configuration key: key=value (repeatable)")->allow_extra_args(false);
    };
    auto flag = [&](CLI::App* s, const std::string& name, const std::string& key, const std::string& help) {
        s->add_option_function<std::string>(
            name, [&o, key](const std::string& v) { o.flag_overrides.emplace_back(key, v); }, help + " (" + key + ")");
    };
    auto train_flags = [&](CLI::App* s) {
        flag(s, "--epochs", "train.epochs", "Training epochs");
        flag(s, "--batches", "train.batches_per_epoch", "Batches per epoch");
        flag(s, "--lr0", "train.lr0", "Peak learning rate");
        flag(s, "--seed", "train.seed", "Training seed");
    };

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
    common(gen);
    gen->add_option("--out", o.out, "Corpus file")->required();
    flag(gen, "--seed", "corpus.seed", "Corpus seed");

    auto* teach = app.add_subcommand("train-teacher", "Train the teacher with BCE");
    common(teach);
    teach->add_option("--corpus", o.corpus, "Corpus file")->required();
    teach->add_option("--out", o.out, "Teacher checkpoint")->required();
    teach->add_option("--history", o.history, "History CSV (default <out>.history.csv)");
    train_flags(teach);

    auto* dist = app.add_subcommand("distill", "Distill a student from a teacher checkpoint");
    common(dist);
    dist->add_option("--corpus", o.corpus, "Corpus file")->required();
    dist->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
    dist->add_option("--out", o.out, "Student checkpoint")->required();
    dist->add_option("--history", o.history, "History CSV (default <out>.history.csv)");
    flag(dist, "--method", "distill.method", "Distillation method");
    flag(dist, "--layers", "distill.layers", "Distilled layers");
    flag(dist, "--tau", "distill.tau", "Trace temperature");
    train_flags(dist);

    auto* ev = app.add_subcommand("evaluate", "31-candidate retrieval evaluation");
    common(ev);
    ev->add_option("--corpus", o.corpus, "Corpus file")->required();
    ev->add_option("--ckpt", o.ckpt, "Checkpoint to evaluate")->required();
    ev->add_option("--out", o.out, "Report CSV")->required();
    ev->add_option("--summary", o.summary, "Summary text (default <out>.summary.txt)");
    ev->add_option("--expect", o.expect, "Require the checkpoint to match the configured teacher or student")
        ->check(CLI::IsMember({"any", "teacher", "student"}));
    flag(ev, "--lengths", "eval.lengths", "Input frame lengths");
    flag(ev, "--n-queries", "eval.n_queries", "Query cap");

    auto* abl = app.add_subcommand("ablate", "Run an ablation over an axis and seeds");
    common(abl);
    abl->add_option("--corpus", o.corpus, "Corpus file")->required();
    abl->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
    abl->add_option("--out", o.out, "Ablation CSV")->required();
    abl->add_option("--summary", o.summary, "Summary text (default <out>.summary.txt)");
    flag(abl, "--kind", "ablate.kind", "Ablation kind");
    flag(abl, "--seeds", "ablate.seeds", "Paired seeds");
    flag(abl, "--taus", "ablate.taus", "Temperature axis");
    flag(abl, "--lengths", "eval.lengths", "Input frame lengths");
    train_flags(abl);

    auto* lt = app.add_subcommand("loss-track", "Train with one loss and monitor all three distillation losses");
    common(lt);
    lt->add_option("--corpus", o.corpus, "Corpus file")->required();
    lt->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
    lt->add_option("--out", o.out, "Loss trace CSV")->required();
    lt->add_option("--optimize", o.optimize, "last-fitnets, sel-fitnets or mtd");
    train_flags(lt);

    auto* rep = app.add_subcommand("report", "Parameter counts and configuration summary");
    common(rep);
    rep->add_option("--out", o.out, "Summary text")->required();
    rep->add_option("--ckpt", o.ckpts, "Checkpoints to describe (repeatable)")->allow_extra_args(false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        app.exit(e, err, err);
        return kExitOk;
    } catch (const CLI::CallForAllHelp& e) {
        app.exit(e, err, err);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        app.exit(e, err, err);
        return kExitUsage;
    }

    try {
        if (print_defaults) {
            RunConfig defaults;
            out << config_text(defaults, true);
            return kExitOk;
        }
        const auto subs = app.get_subcommands();
        if (subs.empty()) {
            err << app.help();
            return kExitUsage;
        }
        const std::string name = subs.front()->get_name();
        Runner r(o, name, err);
        if (name == "gen-data") cmd_gen_data(r, o);
        else if (name == "train-teacher") cmd_train_teacher(r, o);
        else if (name == "distill") cmd_distill(r, o);
        else if (name == "evaluate") cmd_evaluate(r, o);
        else if (name == "ablate") cmd_ablate(r, o);
        else if (name == "loss-track") cmd_loss_track(r, o);
        else cmd_report(r, o);
        return kExitOk;
    } catch (const UsageError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const DomainError& e) {
        err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitData;
    }
}

}  // namespace mtd
