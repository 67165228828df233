#pragma once

// Deterministic synthetic audio-visual corpus.
//
// Each utterance is driven by a latent sequence z_t (a tanh-squashed AR(1)
// walk). Visual frame t is A·z_t + noise; audio frame u is B·z(u/audio_rate)
// + noise with z linearly interpolated between visual frames. A and B are
// fixed per corpus. All stored values are rounded to 32-bit precision so the
// on-disk format round-trips exactly.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtd/tensor.hpp"

namespace mtd {

inline constexpr int kWindowFrames = 5;
inline constexpr int kMaxOffset = 15;

struct CorpusConfig {
    int n_train = 400;
    int n_val = 100;
    int n_test = 100;
    int frames_per_utterance = 64;
    int latent_dim = 8;
    int d_visual_in = 16;
    int d_audio_in = 12;
    int audio_rate = 4;
    double noise_sigma = 0.1;
    /// AR(1) coefficient of the latent walk per visual frame.
    double latent_smoothness = 0.7;
    std::uint64_t seed = 7;

    void validate() const;
    bool operator==(const CorpusConfig&) const = default;
};

/// Row-major feature matrix (frames × features).
struct FeatureMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    FeatureMatrix slice_rows(std::size_t start, std::size_t count) const;
    Tensor to_tensor() const;
    bool operator==(const FeatureMatrix&) const = default;
};

struct Utterance {
    std::uint32_t id = 0;
    FeatureMatrix visual;  ///< [T×d_visual_in]
    FeatureMatrix audio;   ///< [(audio_rate·T)×d_audio_in]

    std::size_t frames() const { return visual.rows; }
    bool operator==(const Utterance&) const = default;
};

enum class Split { Train, Val, Test };
const char* split_name(Split s);

struct Corpus {
    CorpusConfig config;
    std::vector<Utterance> train;
    std::vector<Utterance> val;
    std::vector<Utterance> test;

    const std::vector<Utterance>& split(Split s) const;
    bool operator==(const Corpus&) const = default;
};

/// Visual [d_visual_in×latent_dim] and audio [d_audio_in×latent_dim] mixing.
struct MixingMatrices {
    FeatureMatrix visual;
    FeatureMatrix audio;
};

MixingMatrices mixing_matrices(const CorpusConfig& config);

Corpus generate_corpus(const CorpusConfig& config);

struct AVPair {
    FeatureMatrix visual_window;  ///< [5×d_visual_in]
    FeatureMatrix audio_window;   ///< [(5·audio_rate)×d_audio_in]
    int offset = 0;               ///< audio start − visual start, in visual frames
    int label = 0;                ///< 1 iff offset == 0
    std::uint32_t utterance_id = 0;
    int visual_start = 0;
};

struct SamplingOptions {
    int max_offset = kMaxOffset;
    /// Also exclude |offset| == 1 from negatives.
    bool exclude_near_zero = false;
};

/// Audio window of `frames` visual frames starting at visual frame `start`.
FeatureMatrix audio_window(const Utterance& u, int start, int frames, int audio_rate);

/// Balanced batch: batch_size/2 positives then batch_size/2 negatives with
/// offsets uniform over [−max_offset, max_offset] \ {0}. Utterances too short
/// for the drawn offset are skipped and another utterance is drawn.
std::vector<AVPair> sample_batch(const std::vector<Utterance>& split, int batch_size, std::mt19937_64& rng,
                                 int audio_rate, const SamplingOptions& options = {});

void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);
std::vector<char> encode_corpus(const Corpus& corpus);
Corpus decode_corpus(std::vector<char> bytes);

/// Brute-force learnability check: recovers latents from both modalities by
/// least squares on the known mixing matrices and picks, among the 31
/// candidate offsets around a 5-frame visual window, the one with the
/// smallest latent mismatch. Returns the fraction of queries where that is
/// exactly offset 0.
double latent_oracle_accuracy(const Corpus& corpus, Split split, int max_queries, std::uint64_t seed);

}  // namespace mtd
