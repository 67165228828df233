#pragma once

// One configuration grammar for every subcommand: UTF-8 lines of
// `section.key = value` with `#` comments. Sections: corpus, teacher,
// student, train, distill, eval, ablate.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mtd/distill_losses.hpp"
#include "mtd/eval_harness.hpp"
#include "mtd/sync_model.hpp"
#include "mtd/synth_data.hpp"
#include "mtd/trainer.hpp"

namespace mtd {

struct AblateSettings {
    AblationKind kind = AblationKind::Methods;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    /// Temperature axis values; empty keeps {1,5,15,25,35}.
    std::vector<double> taus;
    int monitor_pairs = 64;
};

struct RunConfig {
    CorpusConfig corpus;
    ModelConfig teacher = ModelConfig::teacher_desk();
    ModelConfig student = ModelConfig::student_desk();
    TrainConfig train;
    EvalConfig eval;
    AblateSettings ablate;

    /// Copies corpus input widths and audio rate into both model configs, then
    /// validates every section.
    void finalize();
};

/// Sets one key; ConfigError names the key (and line when > 0).
void apply_setting(RunConfig& config, const std::string& key, const std::string& value, int line = 0);

/// Parses config text over the defaults. Unknown keys and bad values raise
/// ConfigError naming key and line.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

/// Applies `key = value` overrides in order, after the file.
void apply_overrides(RunConfig& config, const std::vector<std::pair<std::string, std::string>>& overrides);

/// Every key with its current value and a short description.
std::string config_text(const RunConfig& config, bool with_docs = false);
std::vector<std::string> config_keys();

std::vector<double> parse_double_list(const std::string& key, const std::string& value);
std::vector<std::uint64_t> parse_u64_list(const std::string& key, const std::string& value);

}  // namespace mtd
