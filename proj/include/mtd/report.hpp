#pragma once

// CSV and structured-text emitters. Every number is printed with four
// decimal places. Column sets are fixed:
//
//   history  : epoch,lr,bce,cad,vr,aux,total,val_f1
//   eval     : frame_length,accuracy,queries,correct
//   ablation : kind,axis,seed,frame_length,accuracy,val_f1
//   loss     : epoch,optimized,last_fitnets,sel_fitnets,mtd

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mtd/eval_harness.hpp"
#include "mtd/sync_model.hpp"
#include "mtd/trainer.hpp"

namespace mtd {

std::string fixed4(double v);

std::string history_csv(const TrainHistory& history);
std::string eval_csv(const EvalReport& report);
std::string ablation_csv(const AblationReport& report);
std::string loss_trace_csv(const LossTrace& trace);

struct SizeSummary {
    std::size_t teacher_all = 0;
    std::size_t teacher_backend = 0;
    std::size_t student_all = 0;
    std::size_t student_backend = 0;

    double backend_ratio() const;
    /// 100 · (1 − student/teacher) over all parameters.
    double reduction_percent() const;
};

SizeSummary size_summary(const ModelConfig& teacher, const ModelConfig& student);
std::string size_summary_text(const SizeSummary& s, const std::string& prefix);

struct RunManifest {
    std::string command;
    std::string config_digest;
    std::string corpus_digest;
    std::map<std::string, std::string> checkpoint_digests;  ///< role → digest
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> artifacts;  ///< path → digest
    std::vector<std::pair<std::string, std::string>> overrides;
    double wall_seconds = 0.0;

    /// Records a file already written, with its SHA-256.
    void add_artifact(const std::string& path);
    std::string text(bool with_wall_time = true) const;
};

/// Summary text: manifest, size summary, config echo and an optional body.
std::string summary_text(const RunManifest& manifest, const SizeSummary& sizes, const std::string& config_echo,
                         const std::string& body = "");

std::string eval_summary_body(const EvalReport& report);
std::string ablation_summary_body(const AblationReport& report);

}  // namespace mtd
