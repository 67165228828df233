#include "mtd/report.hpp"

#include <cstdio>
#include <sstream>

#include "mtd/digest.hpp"

namespace mtd {

std::string fixed4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

std::string history_csv(const TrainHistory& history) {
    std::ostringstream os;
    os << "epoch,lr,bce,cad,vr,aux,total,val_f1\n";
    for (const EpochRecord& e : history.epochs) {
        char lr[32];
        std::snprintf(lr, sizeof lr, "%.4e", e.lr);
        os << e.epoch << ',' << lr << ',' << fixed4(e.train_loss.bce) << ',' << fixed4(e.train_loss.cad) << ','
           << fixed4(e.train_loss.vr) << ',' << fixed4(e.train_loss.aux) << ',' << fixed4(e.train_loss.total) << ','
           << fixed4(e.val_f1) << '\n';
    }
    return os.str();
}

std::string eval_csv(const EvalReport& report) {
    std::ostringstream os;
    os << "frame_length,accuracy,queries,correct\n";
    for (const LengthResult& r : report.lengths) {
        os << r.frame_length << ',' << fixed4(r.accuracy) << ',' << r.queries << ',' << r.correct << '\n';
    }
    return os.str();
}

std::string ablation_csv(const AblationReport& report) {
    std::ostringstream os;
    os << "kind,axis,seed,frame_length,accuracy,val_f1\n";
    for (const AblationRow& row : report.rows) {
        for (const LengthResult& r : row.report.lengths) {
            os << ablation_kind_name(report.kind) << ',' << row.axis_label << ',' << row.seed << ',' << r.frame_length
               << ',' << fixed4(r.accuracy) << ',' << fixed4(row.val_f1) << '\n';
        }
    }
    return os.str();
}

std::string loss_trace_csv(const LossTrace& trace) {
    std::ostringstream os;
    os << "epoch,optimized,last_fitnets,sel_fitnets,mtd\n";
    for (const LossTrackRecord& r : trace.records) {
        os << r.epoch << ',' << method_name(trace.optimized) << ',' << fixed4(r.last_fitnets) << ','
           << fixed4(r.sel_fitnets) << ',' << fixed4(r.mtd) << '\n';
    }
    return os.str();
}

double SizeSummary::backend_ratio() const {
    return static_cast<double>(student_backend) / static_cast<double>(teacher_backend);
}

double SizeSummary::reduction_percent() const {
    return 100.0 * (1.0 - static_cast<double>(student_all) / static_cast<double>(teacher_all));
}

SizeSummary size_summary(const ModelConfig& teacher, const ModelConfig& student) {
    return {param_count(teacher, ParamScope::All), param_count(teacher, ParamScope::BackendOnly),
            param_count(student, ParamScope::All), param_count(student, ParamScope::BackendOnly)};
}

std::string size_summary_text(const SizeSummary& s, const std::string& prefix) {
    std::ostringstream os;
    os << prefix << "teacher_params = " << s.teacher_all << '\n'
       << prefix << "teacher_backend_params = " << s.teacher_backend << '\n'
       << prefix << "student_params = " << s.student_all << '\n'
       << prefix << "student_backend_params = " << s.student_backend << '\n'
       << prefix << "backend_ratio = " << fixed4(s.backend_ratio()) << '\n'
       << prefix << "reduction_percent = " << fixed4(s.reduction_percent()) << '\n';
    return os.str();
}

void RunManifest::add_artifact(const std::string& path) { artifacts.emplace_back(path, sha256_file(path)); }

std::string RunManifest::text(bool with_wall_time) const {
    std::ostringstream os;
    os << "manifest.command = " << command << '\n'
       << "manifest.config_digest = " << config_digest << '\n'
       << "manifest.corpus_digest = " << (corpus_digest.empty() ? "none" : corpus_digest) << '\n'
       << "manifest.seed = " << seed << '\n';
    for (const auto& [role, d] : checkpoint_digests) os << "manifest.checkpoint." << role << " = " << d << '\n';
    for (const auto& [k, v] : overrides) os << "manifest.override." << k << " = " << v << '\n';
    for (std::size_t i = 0; i < artifacts.size(); ++i) {
        os << "manifest.artifact." << i << ".path = " << artifacts[i].first << '\n'
           << "manifest.artifact." << i << ".sha256 = " << artifacts[i].second << '\n';
    }
    if (with_wall_time) os << "manifest.wall_seconds = " << fixed4(wall_seconds) << '\n';
    return os.str();
}

std::string summary_text(const RunManifest& manifest, const SizeSummary& sizes, const std::string& config_echo,
                         const std::string& body) {
    std::ostringstream os;
    os << "# run manifest\n" << manifest.text(false) << "\n# model sizes\n" << size_summary_text(sizes, "size.");
    if (!body.empty()) os << '\n' << body;
    os << "\n# configuration\n" << config_echo;
    return os.str();
}

std::string eval_summary_body(const EvalReport& report) {
    std::ostringstream os;
    os << "# retrieval accuracy\n";
    if (!report.checkpoint_id.empty()) os << "eval.checkpoint = " << report.checkpoint_id << '\n';
    if (!report.corpus_digest.empty()) os << "eval.corpus_digest = " << report.corpus_digest << '\n';
    os << "eval.skipped_utterances = " << report.skipped_utterances << '\n';
    for (const LengthResult& r : report.lengths) {
        os << "eval.accuracy." << r.frame_length << " = " << fixed4(r.accuracy) << '\n';
    }
    if (!report.lengths.empty()) os << "eval.queries = " << report.lengths.front().queries << '\n';
    return os.str();
}

std::string ablation_summary_body(const AblationReport& report) {
    std::ostringstream os;
    os << "# ablation means (" << ablation_kind_name(report.kind) << ")\n";
    for (const auto& [label, by_length] : report.means()) {
        for (const auto& [len, acc] : by_length) {
            os << "mean." << label << '.' << len << " = " << fixed4(acc) << '\n';
        }
    }
    return os.str();
}

}  // namespace mtd
