#include "mtd/synth_data.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Dense>

#include "mtd/binary_io.hpp"
#include "mtd/errors.hpp"
#include "mtd/kv_text.hpp"

namespace mtd {

namespace {

constexpr char kCorpusMagicPrefix[] = "AVSYNC";
constexpr char kCorpusVersion[] = "01";

double round32(double v) { return static_cast<double>(static_cast<float>(v)); }

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

FeatureMatrix random_mixing(std::size_t rows, std::size_t latent, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(latent));
    std::uniform_real_distribution<double> dist(-bound, bound);
    FeatureMatrix m{rows, latent, std::vector<double>(rows * latent)};
    for (double& v : m.values) v = dist(rng);
    return m;
}

Utterance make_utterance(std::uint32_t id, const CorpusConfig& c, const MixingMatrices& mix, std::mt19937_64& rng) {
    const auto T = static_cast<std::size_t>(c.frames_per_utterance);
    const auto k = static_cast<std::size_t>(c.latent_dim);
    const auto rate = static_cast<std::size_t>(c.audio_rate);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Latent walk: h_t = ρ h_{t-1} + sqrt(1-ρ²) ε_t, z_t = tanh(h_t).
    const double rho = c.latent_smoothness;
    const double innov = std::sqrt(1.0 - rho * rho);
    std::vector<double> h(k), z(T * k);
    for (std::size_t j = 0; j < k; ++j) h[j] = gauss(rng);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < k; ++j) {
            if (t > 0) h[j] = rho * h[j] + innov * gauss(rng);
            z[t * k + j] = std::tanh(h[j]);
        }
    }

    auto project = [&](const FeatureMatrix& m, const double* latent, double* out) {
        for (std::size_t r = 0; r < m.rows; ++r) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += m.values[r * k + j] * latent[j];
            out[r] = acc;
        }
    };

    Utterance u;
    u.id = id;
    u.visual = {T, mix.visual.rows, std::vector<double>(T * mix.visual.rows)};
    u.audio = {T * rate, mix.audio.rows, std::vector<double>(T * rate * mix.audio.rows)};
    for (std::size_t t = 0; t < T; ++t) project(mix.visual, &z[t * k], &u.visual.values[t * mix.visual.rows]);
    std::vector<double> zi(k);
    for (std::size_t a = 0; a < T * rate; ++a) {
        const std::size_t t0 = a / rate;
        const std::size_t t1 = std::min(t0 + 1, T - 1);
        const double w = static_cast<double>(a % rate) / static_cast<double>(rate);
        for (std::size_t j = 0; j < k; ++j) zi[j] = (1.0 - w) * z[t0 * k + j] + w * z[t1 * k + j];
        project(mix.audio, zi.data(), &u.audio.values[a * mix.audio.rows]);
    }
    if (c.noise_sigma > 0.0) {
        std::normal_distribution<double> noise(0.0, c.noise_sigma);
        for (double& v : u.visual.values) v += noise(rng);
        for (double& v : u.audio.values) v += noise(rng);
    }
    for (double& v : u.visual.values) v = round32(v);
    for (double& v : u.audio.values) v = round32(v);
    return u;
}

}  // namespace

void CorpusConfig::validate() const {
    if (n_train < 0 || n_val < 0 || n_test < 0) throw ConfigError("corpus: split sizes must be non-negative");
    if (frames_per_utterance < 2 * kMaxOffset + kWindowFrames + 1) {
        throw ConfigError("corpus: frames_per_utterance must be at least " +
                          std::to_string(2 * kMaxOffset + kWindowFrames + 1));
    }
    if (latent_dim <= 0 || d_visual_in <= 0 || d_audio_in <= 0 || audio_rate <= 0) {
        throw ConfigError("corpus: dimensions and audio_rate must be positive");
    }
    if (!(noise_sigma >= 0.0)) throw ConfigError("corpus: noise_sigma must be non-negative");
    if (!(latent_smoothness >= 0.0 && latent_smoothness < 1.0)) {
        throw ConfigError("corpus: latent_smoothness must lie in [0, 1)");
    }
}

FeatureMatrix FeatureMatrix::slice_rows(std::size_t start, std::size_t count) const {
    if (start + count > rows) throw ShapeError("feature window outside source matrix");
    FeatureMatrix out{count, cols, {}};
    out.values.assign(values.begin() + static_cast<std::ptrdiff_t>(start * cols),
                      values.begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
    return out;
}

Tensor FeatureMatrix::to_tensor() const { return Tensor::matrix(rows, cols, values); }

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

const std::vector<Utterance>& Corpus::split(Split s) const {
    switch (s) {
        case Split::Train: return train;
        case Split::Val: return val;
        case Split::Test: return test;
    }
    return test;
}

MixingMatrices mixing_matrices(const CorpusConfig& config) {
    std::mt19937_64 rng(mix_seed(config.seed, 0));
    MixingMatrices m;
    m.visual = random_mixing(static_cast<std::size_t>(config.d_visual_in), static_cast<std::size_t>(config.latent_dim), rng);
    m.audio = random_mixing(static_cast<std::size_t>(config.d_audio_in), static_cast<std::size_t>(config.latent_dim), rng);
    return m;
}

Corpus generate_corpus(const CorpusConfig& config) {
    config.validate();
    const MixingMatrices mix = mixing_matrices(config);
    Corpus corpus;
    corpus.config = config;
    std::uint32_t next_id = 0;
    auto fill = [&](std::vector<Utterance>& out, int n, std::uint64_t stream) {
        std::mt19937_64 rng(mix_seed(config.seed, stream));
        out.reserve(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) out.push_back(make_utterance(next_id++, config, mix, rng));
    };
    fill(corpus.train, config.n_train, 1);
    fill(corpus.val, config.n_val, 2);
    fill(corpus.test, config.n_test, 3);
    return corpus;
}

FeatureMatrix audio_window(const Utterance& u, int start, int frames, int audio_rate) {
    if (start < 0) throw ShapeError("audio window starts before the utterance");
    return u.audio.slice_rows(static_cast<std::size_t>(start * audio_rate), static_cast<std::size_t>(frames * audio_rate));
}

std::vector<AVPair> sample_batch(const std::vector<Utterance>& split, int batch_size, std::mt19937_64& rng,
                                 int audio_rate, const SamplingOptions& options) {
    if (batch_size <= 0 || batch_size % 2 != 0) {
        throw UsageError("sample_batch: batch_size must be positive and even, got " + std::to_string(batch_size));
    }
    if (split.empty()) throw UsageError("sample_batch: empty split");
    const int lo_abs = options.exclude_near_zero ? 2 : 1;
    if (options.max_offset < lo_abs) throw UsageError("sample_batch: max_offset too small for negatives");

    std::uniform_int_distribution<std::size_t> pick_utt(0, split.size() - 1);
    std::uniform_int_distribution<int> pick_mag(lo_abs, options.max_offset);
    std::bernoulli_distribution pick_sign(0.5);

    std::vector<AVPair> batch;
    batch.reserve(static_cast<std::size_t>(batch_size));
    for (int i = 0; i < batch_size; ++i) {
        const bool positive = i < batch_size / 2;
        const int offset = positive ? 0 : (pick_sign(rng) ? 1 : -1) * pick_mag(rng);
        // Resample utterances that cannot host this offset (bounded attempts).
        for (int attempt = 0;; ++attempt) {
            const Utterance& u = split[pick_utt(rng)];
            const int T = static_cast<int>(u.frames());
            const int lo = std::max(0, -offset);
            const int hi = T - kWindowFrames - std::max(0, offset);
            if (hi < lo) {
                if (attempt > 1000) throw UsageError("sample_batch: no utterance long enough for offset " + std::to_string(offset));
                continue;
            }
            std::uniform_int_distribution<int> pick_start(lo, hi);
            const int v = pick_start(rng);
            AVPair p;
            p.visual_window = u.visual.slice_rows(static_cast<std::size_t>(v), kWindowFrames);
            p.audio_window = audio_window(u, v + offset, kWindowFrames, audio_rate);
            p.offset = offset;
            p.label = offset == 0 ? 1 : 0;
            p.utterance_id = u.id;
            p.visual_start = v;
            batch.push_back(std::move(p));
            break;
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

std::string corpus_header(const Corpus& c) {
    const CorpusConfig& k = c.config;
    std::ostringstream os;
    os << "corpus.n_train = " << k.n_train << '\n'
       << "corpus.n_val = " << k.n_val << '\n'
       << "corpus.n_test = " << k.n_test << '\n'
       << "corpus.frames_per_utterance = " << k.frames_per_utterance << '\n'
       << "corpus.latent_dim = " << k.latent_dim << '\n'
       << "corpus.d_visual_in = " << k.d_visual_in << '\n'
       << "corpus.d_audio_in = " << k.d_audio_in << '\n'
       << "corpus.audio_rate = " << k.audio_rate << '\n'
       << "corpus.noise_sigma = " << format_double(k.noise_sigma) << '\n'
       << "corpus.latent_smoothness = " << format_double(k.latent_smoothness) << '\n'
       << "corpus.seed = " << k.seed << '\n'
       << "split.train = " << c.train.size() << '\n'
       << "split.val = " << c.val.size() << '\n'
       << "split.test = " << c.test.size() << '\n';
    return os.str();
}

void put_matrix(io::ByteWriter& w, const FeatureMatrix& m) {
    w.u32(static_cast<std::uint32_t>(m.rows));
    w.u32(static_cast<std::uint32_t>(m.cols));
    for (double v : m.values) w.f32(static_cast<float>(v));
}

FeatureMatrix get_matrix(io::ByteReader& r, std::size_t expect_cols) {
    const std::uint64_t at = r.offset();
    FeatureMatrix m;
    m.rows = r.u32("matrix rows");
    m.cols = r.u32("matrix cols");
    if (m.cols != expect_cols) {
        throw FormatError("matrix width " + std::to_string(m.cols) + " does not match header width " +
                          std::to_string(expect_cols), at);
    }
    r.need(m.rows * m.cols * sizeof(float), "matrix values");
    m.values.resize(m.rows * m.cols);
    for (double& v : m.values) v = r.f32("matrix values");
    return m;
}

}  // namespace

std::vector<char> encode_corpus(const Corpus& corpus) {
    io::ByteWriter w;
    w.bytes(kCorpusMagicPrefix);
    w.bytes(kCorpusVersion);
    w.text(corpus_header(corpus));
    for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
        for (const Utterance& u : *split) {
            w.u32(u.id);
            put_matrix(w, u.visual);
            put_matrix(w, u.audio);
        }
    }
    return w.buffer();
}

Corpus decode_corpus(std::vector<char> bytes) {
    io::ByteReader r(std::move(bytes));
    const std::string magic = r.bytes(8, "magic");
    if (magic.compare(0, 6, kCorpusMagicPrefix) != 0) throw FormatError("not a corpus file (bad magic)", 0);
    if (magic.substr(6) != kCorpusVersion) {
        throw FormatError("unsupported corpus format version '" + magic.substr(6) + "' (expected '" + kCorpusVersion + "')", 6);
    }
    const std::uint64_t header_at = r.offset();
    std::map<std::string, std::string> h;
    try {
        h = kv_map(parse_kv_text(r.text("header")));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed corpus header: ") + e.what(), header_at);
    }
    auto get = [&](const char* key) -> const std::string& {
        auto it = h.find(key);
        if (it == h.end()) throw FormatError(std::string("corpus header lacks '") + key + "'", header_at);
        return it->second;
    };
    Corpus c;
    CorpusConfig& k = c.config;
    try {
        k.n_train = static_cast<int>(kv_to_int("corpus.n_train", get("corpus.n_train")));
        k.n_val = static_cast<int>(kv_to_int("corpus.n_val", get("corpus.n_val")));
        k.n_test = static_cast<int>(kv_to_int("corpus.n_test", get("corpus.n_test")));
        k.frames_per_utterance = static_cast<int>(kv_to_int("", get("corpus.frames_per_utterance")));
        k.latent_dim = static_cast<int>(kv_to_int("", get("corpus.latent_dim")));
        k.d_visual_in = static_cast<int>(kv_to_int("", get("corpus.d_visual_in")));
        k.d_audio_in = static_cast<int>(kv_to_int("", get("corpus.d_audio_in")));
        k.audio_rate = static_cast<int>(kv_to_int("", get("corpus.audio_rate")));
        k.noise_sigma = kv_to_double("", get("corpus.noise_sigma"));
        k.latent_smoothness = kv_to_double("", get("corpus.latent_smoothness"));
        k.seed = kv_to_u64("", get("corpus.seed"));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("malformed corpus header: ") + e.what(), header_at);
    }
    const long long sizes[3] = {kv_to_int("split.train", get("split.train")), kv_to_int("split.val", get("split.val")),
                                kv_to_int("split.test", get("split.test"))};
    std::vector<Utterance>* splits[3] = {&c.train, &c.val, &c.test};
    for (int s = 0; s < 3; ++s) {
        for (long long i = 0; i < sizes[s]; ++i) {
            Utterance u;
            u.id = r.u32("utterance id");
            u.visual = get_matrix(r, static_cast<std::size_t>(k.d_visual_in));
            const std::uint64_t audio_at = r.offset();
            u.audio = get_matrix(r, static_cast<std::size_t>(k.d_audio_in));
            if (u.audio.rows != u.visual.rows * static_cast<std::size_t>(k.audio_rate)) {
                throw FormatError("audio length is not audio_rate times visual length", audio_at);
            }
            splits[s]->push_back(std::move(u));
        }
    }
    if (!r.at_end()) throw FormatError("trailing bytes after last utterance", r.offset());
    return c;
}

void save_corpus(const Corpus& corpus, const std::string& path) { io::write_file(path, encode_corpus(corpus)); }

Corpus load_corpus(const std::string& path) { return decode_corpus(io::read_file(path)); }

// ---------------------------------------------------------------------------

double latent_oracle_accuracy(const Corpus& corpus, Split split, int max_queries, std::uint64_t seed) {
    const auto& utts = corpus.split(split);
    const CorpusConfig& c = corpus.config;
    const MixingMatrices mix = mixing_matrices(c);
    using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Mat A = Eigen::Map<const Mat>(mix.visual.values.data(), mix.visual.rows, mix.visual.cols);
    const Mat B = Eigen::Map<const Mat>(mix.audio.values.data(), mix.audio.rows, mix.audio.cols);
    const Mat pinv_a = A.completeOrthogonalDecomposition().pseudoInverse();
    const Mat pinv_b = B.completeOrthogonalDecomposition().pseudoInverse();

    std::mt19937_64 rng(seed);
    int correct = 0, total = 0;
    for (int q = 0; q < max_queries && !utts.empty(); ++q) {
        const Utterance& u = utts[std::uniform_int_distribution<std::size_t>(0, utts.size() - 1)(rng)];
        const int T = static_cast<int>(u.frames());
        const int lo = kMaxOffset, hi = T - kWindowFrames - kMaxOffset;
        if (hi < lo) continue;
        const int v = std::uniform_int_distribution<int>(lo, hi)(rng);
        auto latent_visual = [&](int t) {
            return Eigen::VectorXd(pinv_a * Eigen::Map<const Eigen::VectorXd>(&u.visual.values[t * u.visual.cols], u.visual.cols));
        };
        auto latent_audio = [&](int t) {
            const std::size_t a = static_cast<std::size_t>(t * c.audio_rate);
            return Eigen::VectorXd(pinv_b * Eigen::Map<const Eigen::VectorXd>(&u.audio.values[a * u.audio.cols], u.audio.cols));
        };
        int best = 0;
        double best_err = std::numeric_limits<double>::infinity();
        for (int o = -kMaxOffset; o <= kMaxOffset; ++o) {
            double err = 0.0;
            for (int f = 0; f < kWindowFrames; ++f) err += (latent_visual(v + f) - latent_audio(v + o + f)).squaredNorm();
            if (err < best_err) {
                best_err = err;
                best = o;
            }
        }
        ++total;
        if (best == 0) ++correct;
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

}  // namespace mtd
