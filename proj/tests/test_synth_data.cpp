#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

#include "mtd/errors.hpp"
#include "mtd/synth_data.hpp"
#include "test_support.hpp"

using namespace mtd;
using mtd::test::small_corpus_config;

namespace {

// Solves the normal equations AᵀA z = Aᵀy by Gaussian elimination.
std::vector<double> least_squares(const FeatureMatrix& a, const std::vector<double>& y) {
    const std::size_t n = a.cols;
    std::vector<double> m(n * (n + 1), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t r = 0; r < a.rows; ++r) m[i * (n + 1) + j] += a.at(r, i) * a.at(r, j);
        }
        for (std::size_t r = 0; r < a.rows; ++r) m[i * (n + 1) + n] += a.at(r, i) * y[r];
    }
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(m[r * (n + 1) + c]) > std::abs(m[piv * (n + 1) + c])) piv = r;
        for (std::size_t k = 0; k <= n; ++k) std::swap(m[c * (n + 1) + k], m[piv * (n + 1) + k]);
        for (std::size_t r = 0; r < n; ++r) {
            if (r == c) continue;
            const double f = m[r * (n + 1) + c] / m[c * (n + 1) + c];
            for (std::size_t k = c; k <= n; ++k) m[r * (n + 1) + k] -= f * m[c * (n + 1) + k];
        }
    }
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = m[i * (n + 1) + n] / m[i * (n + 1) + i];
    return z;
}

std::vector<double> row(const FeatureMatrix& m, std::size_t r) {
    return {m.values.begin() + static_cast<std::ptrdiff_t>(r * m.cols),
            m.values.begin() + static_cast<std::ptrdiff_t>((r + 1) * m.cols)};
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("mtd_synth_" + name);
}

}  // namespace

TEST(Corpus, DeterministicUnderSeed) {
    const auto a = generate_corpus(small_corpus_config(3));
    const auto b = generate_corpus(small_corpus_config(3));
    EXPECT_EQ(a, b);
    const auto c = generate_corpus(small_corpus_config(4));
    EXPECT_NE(a.train.front().visual, c.train.front().visual);
}

TEST(Corpus, ShapesFollowConfig) {
    const CorpusConfig cfg = small_corpus_config();
    const auto c = generate_corpus(cfg);
    EXPECT_EQ(c.train.size(), 12u);
    EXPECT_EQ(c.val.size(), 6u);
    EXPECT_EQ(c.test.size(), 6u);
    for (const auto& u : c.test) {
        EXPECT_EQ(u.visual.rows, 40u);
        EXPECT_EQ(u.visual.cols, static_cast<std::size_t>(cfg.d_visual_in));
        EXPECT_EQ(u.audio.rows, 40u * static_cast<std::size_t>(cfg.audio_rate));
        EXPECT_EQ(u.audio.cols, static_cast<std::size_t>(cfg.d_audio_in));
    }
}

TEST(Corpus, NoiselessFeaturesAreLinearInOneLatent) {
    CorpusConfig cfg = small_corpus_config();
    cfg.noise_sigma = 0.0;
    const auto c = generate_corpus(cfg);
    const auto mix = mixing_matrices(cfg);
    const auto rate = static_cast<std::size_t>(cfg.audio_rate);
    for (const auto& u : c.train) {
        for (std::size_t t = 0; t + 1 < u.frames(); t += 7) {
            const auto z = least_squares(mix.visual, row(u.visual, t));
            for (std::size_t r = 0; r < mix.audio.rows; ++r) {
                double pred = 0.0;
                for (std::size_t j = 0; j < z.size(); ++j) pred += mix.audio.at(r, j) * z[j];
                EXPECT_NEAR(pred, u.audio.at(t * rate, r), 1e-5);
            }
            // Audio between visual frames is the linear interpolation of its neighbours.
            for (std::size_t k = 1; k < rate; ++k) {
                const double w = static_cast<double>(k) / static_cast<double>(rate);
                for (std::size_t r = 0; r < u.audio.cols; ++r) {
                    const double lerp = (1 - w) * u.audio.at(t * rate, r) + w * u.audio.at((t + 1) * rate, r);
                    EXPECT_NEAR(u.audio.at(t * rate + k, r), lerp, 1e-5);
                }
            }
        }
    }
}

TEST(Corpus, LatentOracleFindsTheAlignment) {
    CorpusConfig cfg = small_corpus_config();
    cfg.frames_per_utterance = 64;
    const auto c = generate_corpus(cfg);
    EXPECT_GT(latent_oracle_accuracy(c, Split::Test, 300, 1), 0.95);
}

TEST(Corpus, SplitsAreDisjoint) {
    const auto c = generate_corpus(small_corpus_config());
    std::set<std::uint32_t> ids;
    std::set<std::vector<double>> firsts;
    for (const auto* s : {&c.train, &c.val, &c.test}) {
        for (const auto& u : *s) {
            EXPECT_TRUE(ids.insert(u.id).second);
            EXPECT_TRUE(firsts.insert(u.visual.values).second);
        }
    }
}

TEST(Corpus, RejectsInvalidConfig) {
    CorpusConfig cfg = small_corpus_config();
    cfg.frames_per_utterance = 20;
    EXPECT_THROW(generate_corpus(cfg), ConfigError);
    cfg = small_corpus_config();
    cfg.latent_smoothness = 1.0;
    EXPECT_THROW(generate_corpus(cfg), ConfigError);
}

TEST(Sampling, BalancedBatch) {
    const auto c = generate_corpus(small_corpus_config());
    std::mt19937_64 rng(1);
    const auto batch = sample_batch(c.train, 8, rng, c.config.audio_rate);
    ASSERT_EQ(batch.size(), 8u);
    int pos = 0;
    for (const auto& p : batch) pos += p.label;
    EXPECT_EQ(pos, 4);
    EXPECT_THROW(sample_batch(c.train, 7, rng, c.config.audio_rate), UsageError);
    EXPECT_THROW(sample_batch(c.train, 0, rng, c.config.audio_rate), UsageError);
}

TEST(Sampling, LabelsAndWindowsAreConsistent) {
    const auto c = generate_corpus(small_corpus_config());
    std::map<std::uint32_t, const Utterance*> by_id;
    for (const auto& u : c.train) by_id[u.id] = &u;
    std::mt19937_64 rng(2);
    const int rate = c.config.audio_rate;
    for (int b = 0; b < 50; ++b) {
        for (const auto& p : sample_batch(c.train, 16, rng, rate)) {
            EXPECT_EQ(p.label, p.offset == 0 ? 1 : 0);
            EXPECT_LE(std::abs(p.offset), kMaxOffset);
            const Utterance& u = *by_id.at(p.utterance_id);
            EXPECT_EQ(p.visual_window, u.visual.slice_rows(static_cast<std::size_t>(p.visual_start), 5));
            EXPECT_EQ(p.audio_window, audio_window(u, p.visual_start + p.offset, 5, rate));
            EXPECT_EQ(p.audio_window.rows, static_cast<std::size_t>(5 * rate));
        }
    }
}

TEST(Sampling, NegativeOffsetsAreUniform) {
    const auto c = generate_corpus(small_corpus_config());
    std::mt19937_64 rng(3);
    std::map<int, int> counts;
    int total = 0;
    while (total < 100000) {
        for (const auto& p : sample_batch(c.train, 64, rng, c.config.audio_rate)) {
            if (p.label == 1) continue;
            ++counts[p.offset];
            ++total;
        }
    }
    ASSERT_EQ(counts.size(), 30u);
    EXPECT_EQ(counts.count(0), 0u);
    const double expected = total / 30.0;
    double chi2 = 0.0;
    for (const auto& [offset, n] : counts) {
        EXPECT_NEAR(n / static_cast<double>(total), 1.0 / 30.0, 0.005) << offset;
        chi2 += (n - expected) * (n - expected) / expected;
    }
    // 29 degrees of freedom; 58.3 is the 0.999 quantile.
    EXPECT_LT(chi2, 58.3);
}

TEST(Sampling, ExcludeNearZero) {
    const auto c = generate_corpus(small_corpus_config());
    std::mt19937_64 rng(4);
    SamplingOptions opt;
    opt.exclude_near_zero = true;
    for (int b = 0; b < 100; ++b) {
        for (const auto& p : sample_batch(c.train, 16, rng, c.config.audio_rate, opt)) {
            if (p.label == 0) EXPECT_GE(std::abs(p.offset), 2);
        }
    }
}

TEST(Serialization, RoundTripIsExact) {
    const auto c = generate_corpus(small_corpus_config());
    const auto path = temp_path("roundtrip.bin");
    save_corpus(c, path.string());
    const auto back = load_corpus(path.string());
    std::filesystem::remove(path);
    EXPECT_EQ(back, c);
    EXPECT_EQ(decode_corpus(encode_corpus(c)), c);
}

TEST(Serialization, BadMagicAndVersion) {
    auto bytes = encode_corpus(generate_corpus(small_corpus_config()));
    auto bad = bytes;
    bad[0] = 'X';
    try {
        decode_corpus(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    bad = bytes;
    bad[7] = '9';
    try {
        decode_corpus(bad);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST(Serialization, TruncationReportsOffset) {
    const auto bytes = encode_corpus(generate_corpus(small_corpus_config()));
    for (std::size_t keep : {std::size_t{4}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
        std::vector<char> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
        try {
            decode_corpus(cut);
            FAIL() << keep;
        } catch (const FormatError& e) {
            EXPECT_LE(e.offset(), keep);
        }
    }
    auto extra = bytes;
    extra.push_back('\0');
    EXPECT_THROW(decode_corpus(extra), FormatError);
}

TEST(Serialization, MissingFileIsDataError) {
    EXPECT_THROW(load_corpus(temp_path("does_not_exist.bin").string()), DataError);
}
