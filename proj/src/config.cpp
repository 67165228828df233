#include "mtd/config.hpp"

#include <functional>
#include <sstream>

#include "mtd/binary_io.hpp"
#include "mtd/errors.hpp"
#include "mtd/kv_text.hpp"

namespace mtd {

namespace {

struct Field {
    std::string key;
    std::string doc;
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
    std::function<std::string(const RunConfig&)> get;
};

int to_int(const std::string& k, const std::string& v) {
    const long long x = kv_to_int(k, v);
    if (x < INT32_MIN || x > INT32_MAX) throw ConfigError("key '" + k + "': value out of range");
    return static_cast<int>(x);
}

template <class T>
std::string str(const T& v) {
    if constexpr (std::is_same_v<T, double>) {
        return format_double(v);
    } else if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else {
        return std::to_string(v);
    }
}

template <class T, class List>
std::string join(const List& items) {
    std::string out;
    for (const auto& x : items) {
        if (!out.empty()) out += ",";
        out += str<T>(x);
    }
    return out;
}

std::string layers_text(const std::vector<LayerSpec>& layers) {
    std::string out;
    for (const auto& l : layers) {
        if (!out.empty()) out += ",";
        out += layer_spec_to_string(l);
    }
    return out;
}

#define MTD_INT(KEY, DOC, EXPR) \
    Field{KEY, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { EXPR = to_int(k, v); }, \
          [](const RunConfig& c) { return str<int>(EXPR); }}
#define MTD_U64(KEY, DOC, EXPR) \
    Field{KEY, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { EXPR = kv_to_u64(k, v); }, \
          [](const RunConfig& c) { return str<std::uint64_t>(EXPR); }}
#define MTD_REAL(KEY, DOC, EXPR) \
    Field{KEY, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { EXPR = kv_to_double(k, v); }, \
          [](const RunConfig& c) { return str<double>(EXPR); }}
#define MTD_BOOL(KEY, DOC, EXPR) \
    Field{KEY, DOC, [](RunConfig& c, const std::string& k, const std::string& v) { EXPR = kv_to_bool(k, v); }, \
          [](const RunConfig& c) { return str<bool>(EXPR); }}

void model_fields(std::vector<Field>& f, const std::string& who, ModelConfig RunConfig::* m) {
    auto add_int = [&](const std::string& name, const std::string& doc, int ModelConfig::* field) {
        f.push_back({who + "." + name, doc,
                     [m, field](RunConfig& c, const std::string& k, const std::string& v) { (c.*m).*field = to_int(k, v); },
                     [m, field](const RunConfig& c) { return str<int>((c.*m).*field); }});
    };
    add_int("d_model", "hidden width", &ModelConfig::d_model);
    add_int("n_heads", "attention heads (teacher and student must agree for trace methods)", &ModelConfig::n_heads);
    add_int("layers_per_block", "attention layers in each of AV, VA, Fusion", &ModelConfig::layers_per_block);
    add_int("ffn_mult", "feed-forward width multiplier", &ModelConfig::ffn_mult);
    f.push_back({who + ".seed", "parameter initialization seed",
                 [m](RunConfig& c, const std::string& k, const std::string& v) { (c.*m).seed = kv_to_u64(k, v); },
                 [m](const RunConfig& c) { return str<std::uint64_t>((c.*m).seed); }});
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f{
            MTD_INT("corpus.n_train", "training utterances", c.corpus.n_train),
            MTD_INT("corpus.n_val", "validation utterances", c.corpus.n_val),
            MTD_INT("corpus.n_test", "test utterances", c.corpus.n_test),
            MTD_INT("corpus.frames", "visual frames per utterance", c.corpus.frames_per_utterance),
            MTD_INT("corpus.latent_dim", "shared latent dimension", c.corpus.latent_dim),
            MTD_INT("corpus.d_visual_in", "visual feature width", c.corpus.d_visual_in),
            MTD_INT("corpus.d_audio_in", "audio feature width", c.corpus.d_audio_in),
            MTD_INT("corpus.audio_rate", "audio frames per visual frame", c.corpus.audio_rate),
            MTD_REAL("corpus.noise", "observation noise standard deviation", c.corpus.noise_sigma),
            MTD_REAL("corpus.smoothness", "AR(1) coefficient of the latent walk", c.corpus.latent_smoothness),
            MTD_U64("corpus.seed", "corpus generation seed", c.corpus.seed),
        };
        model_fields(f, "teacher", &RunConfig::teacher);
        model_fields(f, "student", &RunConfig::student);
        std::vector<Field> rest{
            MTD_INT("train.epochs", "training epochs", c.train.epochs),
            MTD_INT("train.warmup_epochs", "linear warmup epochs", c.train.warmup_epochs),
            MTD_REAL("train.lr0", "peak learning rate", c.train.lr0),
            MTD_REAL("train.decay_mult", "step decay multiplier", c.train.decay_mult),
            MTD_INT("train.decay_every", "epochs between decays after warmup", c.train.decay_every),
            MTD_BOOL("train.constant_warmup", "hold lr0 during warmup", c.train.constant_warmup),
            MTD_INT("train.batch_size", "pairs per batch (even; half positive)", c.train.batch_size),
            MTD_INT("train.batches_per_epoch", "batches per epoch", c.train.batches_per_epoch),
            MTD_INT("train.val_batches", "validation batches (drawn once per run)", c.train.val_batches),
            MTD_BOOL("train.exclude_near_zero", "draw negatives with |offset| >= 2 only", c.train.exclude_near_zero),
            MTD_U64("train.seed", "batch sampling seed", c.train.seed),
            Field{"distill.method", "bce, kd, rkd, minilm, last-fitnets, sel-fitnets or mtd",
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                      try {
                          c.train.distill.method = parse_method(v);
                      } catch (const Error& e) {
                          throw ConfigError("key '" + k + "': " + e.what());
                      }
                  },
                  [](const RunConfig& c) { return std::string(method_name(c.train.distill.method)); }},
            Field{"distill.layers", "distilled layer set, e.g. fusion3,av4,va1",
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                      try {
                          c.train.distill.layer_set = parse_layer_list(v);
                      } catch (const Error& e) {
                          throw ConfigError("key '" + k + "': " + e.what());
                      }
                  },
                  [](const RunConfig& c) { return layers_text(c.train.distill.layer_set); }},
            MTD_REAL("distill.tau", "trace temperature", c.train.distill.tau),
            MTD_BOOL("distill.include_cad", "include the CAD term", c.train.distill.include_cad),
            MTD_BOOL("distill.include_vr", "include the VR term", c.train.distill.include_vr),
            MTD_BOOL("distill.reverse_kl", "use KL(teacher || student)", c.train.distill.reverse_kl),
            Field{"eval.lengths", "input frame lengths",
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.eval.frame_lengths = kv_to_int_list(k, v); },
                  [](const RunConfig& c) { return join<int>(c.eval.frame_lengths); }},
            MTD_INT("eval.half_window", "candidate offsets on each side", c.eval.half_window),
            MTD_INT("eval.tolerance", "accepted |offset| error in frames", c.eval.tolerance),
            MTD_INT("eval.stride", "stride between averaged windows", c.eval.stride),
            MTD_INT("eval.query_stride", "spacing of query positions", c.eval.query_stride),
            MTD_INT("eval.n_queries", "query cap (0 = all)", c.eval.n_queries),
            MTD_U64("eval.seed", "query subsampling seed", c.eval.seed),
            Field{"ablate.kind", "mtd_terms, layer_sweep, layer_sets, temperature, methods or loss_tracking",
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                      try {
                          c.ablate.kind = parse_ablation_kind(v);
                      } catch (const Error& e) {
                          throw ConfigError("key '" + k + "': " + e.what());
                      }
                  },
                  [](const RunConfig& c) { return std::string(ablation_kind_name(c.ablate.kind)); }},
            Field{"ablate.seeds", "paired seeds",
                  [](RunConfig& c, const std::string& k, const std::string& v) { c.ablate.seeds = parse_u64_list(k, v); },
                  [](const RunConfig& c) { return join<std::uint64_t>(c.ablate.seeds); }},
            Field{"ablate.taus", "temperature axis (empty = 1,5,15,25,35)",
                  [](RunConfig& c, const std::string& k, const std::string& v) {
                      c.ablate.taus = v.empty() ? std::vector<double>{} : parse_double_list(k, v);
                  },
                  [](const RunConfig& c) { return join<double>(c.ablate.taus); }},
            MTD_INT("ablate.monitor_pairs", "validation pairs for loss tracking", c.ablate.monitor_pairs),
        };
        f.insert(f.end(), std::make_move_iterator(rest.begin()), std::make_move_iterator(rest.end()));
        return f;
    }();
    return table;
}

#undef MTD_INT
#undef MTD_U64
#undef MTD_REAL
#undef MTD_BOOL

template <class T, class Conv>
std::vector<T> parse_list(const std::string& key, const std::string& value, Conv conv) {
    std::vector<T> out;
    std::stringstream ss(value);
    std::string piece;
    while (std::getline(ss, piece, ',')) {
        const auto b = piece.find_first_not_of(" \t");
        const auto e = piece.find_last_not_of(" \t");
        if (b == std::string::npos) throw ConfigError("key '" + key + "': empty list element in '" + value + "'");
        out.push_back(conv(key, piece.substr(b, e - b + 1)));
    }
    if (out.empty()) throw ConfigError("key '" + key + "': empty list");
    return out;
}

}  // namespace

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    return parse_list<double>(key, value, kv_to_double);
}

std::vector<std::uint64_t> parse_u64_list(const std::string& key, const std::string& value) {
    return parse_list<std::uint64_t>(key, value, kv_to_u64);
}

void RunConfig::finalize() {
    corpus.validate();
    for (ModelConfig* m : {&teacher, &student}) {
        m->d_visual_in = corpus.d_visual_in;
        m->d_audio_in = corpus.d_audio_in;
        m->audio_rate = corpus.audio_rate;
    }
    try {
        teacher.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("teacher: ") + e.what());
    }
    try {
        student.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("student: ") + e.what());
    }
    train.validate();
    eval.validate();
    if (ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
    for (double t : ablate.taus) {
        if (!(t > 0.0)) throw ConfigError("ablate.taus entries must be positive");
    }
    if (ablate.monitor_pairs <= 0 || ablate.monitor_pairs % 2 != 0) {
        throw ConfigError("ablate.monitor_pairs must be positive and even");
    }
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value, int line) {
    const std::string where = line > 0 ? " (line " + std::to_string(line) + ")" : "";
    for (const Field& f : fields()) {
        if (f.key != key) continue;
        try {
            f.set(config, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(e.what() + where);
        }
        return;
    }
    throw ConfigError("unknown key '" + key + "'" + where);
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig config;
    for (const KvEntry& e : parse_kv_text(text)) apply_setting(config, e.key, e.value, e.line);
    return config;
}

RunConfig parse_config(const std::string& path) {
    const auto bytes = io::read_file(path);
    return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

void apply_overrides(RunConfig& config, const std::vector<std::pair<std::string, std::string>>& overrides) {
    for (const auto& [k, v] : overrides) apply_setting(config, k, v);
}

std::string config_text(const RunConfig& config, bool with_docs) {
    std::ostringstream os;
    std::string section;
    for (const Field& f : fields()) {
        const std::string s = f.key.substr(0, f.key.find('.'));
        if (with_docs && s != section) {
            if (!section.empty()) os << '\n';
            section = s;
        }
        if (with_docs) os << "# " << f.doc << '\n';
        os << f.key << " = " << f.get(config) << '\n';
    }
    return os.str();
}

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.push_back(f.key);
    return out;
}

}  // namespace mtd
