#include "mtd/sync_model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "mtd/errors.hpp"

namespace mtd {

namespace {

std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string layer_prefix(Block block, int layer) {
    return std::string(block_name(block)) + ".layer" + std::to_string(layer) + ".";
}

constexpr Block kBlocks[] = {Block::AV, Block::VA, Block::Fusion};

}  // namespace

std::string_view block_name(Block b) {
    switch (b) {
        case Block::AV: return "av";
        case Block::VA: return "va";
        case Block::Fusion: return "fusion";
    }
    return "?";
}

Block parse_block(std::string_view text) {
    const std::string t = lower(trim(text));
    if (t == "av") return Block::AV;
    if (t == "va") return Block::VA;
    if (t == "fusion") return Block::Fusion;
    throw ConfigError("unknown transformer block '" + std::string(text) + "'");
}

std::string layer_spec_to_string(const LayerSpec& spec) {
    return std::string(block_name(spec.block)) + std::to_string(spec.layer);
}

LayerSpec parse_layer_spec(std::string_view text) {
    const std::string t = lower(trim(text));
    std::size_t split = t.size();
    while (split > 0 && std::isdigit(static_cast<unsigned char>(t[split - 1]))) --split;
    if (split == t.size() || split == 0) throw ConfigError("malformed layer '" + std::string(text) + "'");
    LayerSpec spec;
    spec.block = parse_block(t.substr(0, split));
    spec.layer = std::stoi(t.substr(split));
    if (spec.layer < 1) throw ConfigError("layer index must be >= 1 in '" + std::string(text) + "'");
    return spec;
}

std::vector<LayerSpec> parse_layer_list(std::string_view text) {
    std::vector<LayerSpec> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        const auto piece = text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        if (!trim(piece).empty()) out.push_back(parse_layer_spec(piece));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
    if (d_model <= 0 || n_heads <= 0 || layers_per_block <= 0 || ffn_mult <= 0 || d_visual_in <= 0 ||
        d_audio_in <= 0 || audio_rate <= 0) {
        throw ConfigError("model config: all sizes must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("model config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                          std::to_string(n_heads));
    }
}

ModelConfig ModelConfig::teacher_desk() { return ModelConfig{}; }

ModelConfig ModelConfig::student_desk() {
    ModelConfig c;
    c.d_model = 24;
    c.seed = 2;
    return c;
}

ModelConfig ModelConfig::teacher_full_width() {
    ModelConfig c;
    c.d_model = 512;
    return c;
}

ModelConfig ModelConfig::student_full_width() {
    ModelConfig c;
    c.d_model = 200;
    return c;
}

std::vector<const AttentionTrace*> ForwardOutput::layer_traces(const LayerSpec& spec) const {
    std::vector<const AttentionTrace*> out;
    for (const auto& t : traces) {
        if (t.block == spec.block && t.layer == spec.layer) out.push_back(&t);
    }
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->head < b->head; });
    return out;
}

// ---------------------------------------------------------------------------

SyncModel::SyncModel(ModelConfig config, ParameterMap params) : config_(config), params_(std::move(params)) {}

const Tensor& SyncModel::param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("model has no parameter '" + name + "'");
    return it->second;
}

SyncModel SyncModel::clone() const {
    ParameterMap copy;
    for (const auto& [name, t] : params_) copy.emplace(name, t.clone());
    return SyncModel(config_, std::move(copy));
}

void SyncModel::set_requires_grad(bool on) {
    for (auto& [_, t] : params_) t.set_requires_grad(on);
}

void SyncModel::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
    c.validate();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.ffn_mult * c.d_model);
    std::map<std::string, Shape> s;
    auto linear = [&s](const std::string& base, std::size_t in, std::size_t out) {
        s[base + ".weight"] = {in, out};
        s[base + ".bias"] = {out};
    };
    auto norm = [&s, d](const std::string& base) {
        s[base + ".gain"] = {d};
        s[base + ".bias"] = {d};
    };
    linear("frontend.visual.fc1", static_cast<std::size_t>(c.d_visual_in), d);
    linear("frontend.visual.fc2", d, d);
    linear("frontend.audio.fc1", static_cast<std::size_t>(c.d_audio_in), d);
    linear("frontend.audio.fc2", d, d);
    for (Block b : kBlocks) {
        for (int l = 1; l <= c.layers_per_block; ++l) {
            const std::string p = layer_prefix(b, l);
            norm(p + "ln_q");
            norm(p + "ln_kv");
            norm(p + "ln_ffn");
            linear(p + "attn.wq", d, d);
            linear(p + "attn.wk", d, d);
            linear(p + "attn.wv", d, d);
            linear(p + "attn.wo", d, d);
            linear(p + "ffn.fc1", d, f);
            linear(p + "ffn.fc2", f, d);
        }
        norm(std::string(block_name(b)) + ".ln_out");
    }
    linear("head", d, 1);
    return s;
}

SyncModel init_model(const ModelConfig& config) {
    const auto shapes = parameter_shapes(config);
    std::mt19937_64 rng(config.seed);
    ParameterMap params;
    for (const auto& [name, shape] : shapes) {
        std::vector<double> values(shape_numel(shape), 0.0);
        if (name.ends_with(".weight")) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : values) v = dist(rng);
        } else if (name.ends_with(".gain")) {
            std::fill(values.begin(), values.end(), 1.0);
        }
        params.emplace(name, Tensor::from(shape, std::move(values), true));
    }
    return SyncModel(config, std::move(params));
}

AttentionParams attention_params(const SyncModel& model, Block block, int layer) {
    const std::string p = layer_prefix(block, layer) + "attn.";
    return AttentionParams{model.param(p + "wq.weight"), model.param(p + "wq.bias"), model.param(p + "wk.weight"),
                           model.param(p + "wk.bias"),   model.param(p + "wv.weight"), model.param(p + "wv.bias"),
                           model.param(p + "wo.weight"), model.param(p + "wo.bias")};
}

CrossAttentionResult cross_attention(const Tensor& query_seq, const Tensor& kv_seq, const AttentionParams& p,
                                     int n_heads, double tau_trace, bool trace, LayerSpec where) {
    if (query_seq.cols() != kv_seq.cols()) {
        throw ShapeError("cross_attention: query width " + std::to_string(query_seq.cols()) +
                         " differs from key/value width " + std::to_string(kv_seq.cols()));
    }
    if (query_seq.cols() != p.wq.rows()) {
        throw ShapeError("cross_attention: input width " + std::to_string(query_seq.cols()) +
                         " does not match projection " + shape_to_string(p.wq.shape()));
    }
    const std::size_t d = query_seq.cols();
    const std::size_t dh = d / static_cast<std::size_t>(n_heads);
    const double root = std::sqrt(static_cast<double>(dh));

    const Tensor q = affine(query_seq, p.wq, p.bq);
    const Tensor k = affine(kv_seq, p.wk, p.bk);
    const Tensor v = affine(kv_seq, p.wv, p.bv);

    CrossAttentionResult result;
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * dh;
        const Tensor qh = slice_cols(q, off, dh);
        const Tensor kh = slice_cols(k, off, dh);
        const Tensor vh = slice_cols(v, off, dh);
        const Tensor logits = matmul(qh, transpose(kh));
        const Tensor attn = softmax_rows(logits, 1.0, root);
        heads.push_back(matmul(attn, vh));
        if (trace) {
            AttentionTrace t;
            t.block = where.block;
            t.layer = where.layer;
            t.head = h + 1;
            t.cad = tau_trace == 1.0 ? attn : softmax_rows(logits, tau_trace, root);
            t.vr = softmax_rows(matmul(vh, transpose(vh)), tau_trace, root);
            t.values = vh;
            t.tau_used = tau_trace;
            result.traces.push_back(std::move(t));
        }
    }
    result.output = affine(heads.size() == 1 ? heads.front() : concat_cols(heads), p.wo, p.bo);
    return result;
}

Tensor positional_encoding(std::size_t length, int d_model, double step) {
    std::vector<double> pe(length * static_cast<std::size_t>(d_model));
    for (std::size_t t = 0; t < length; ++t) {
        const double pos = static_cast<double>(t) * step;
        for (int i = 0; i < d_model; i += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(i) / d_model);
            pe[t * d_model + i] = std::sin(pos * freq);
            if (i + 1 < d_model) pe[t * d_model + i + 1] = std::cos(pos * freq);
        }
    }
    return Tensor::matrix(length, static_cast<std::size_t>(d_model), std::move(pe));
}

namespace {

Tensor front_end(const SyncModel& m, const std::string& which, const Tensor& x, double step) {
    const std::string p = "frontend." + which + ".";
    const Tensor h = relu(affine(x, m.param(p + "fc1.weight"), m.param(p + "fc1.bias")));
    const Tensor e = affine(h, m.param(p + "fc2.weight"), m.param(p + "fc2.bias"));
    return add(e, positional_encoding(e.rows(), m.config().d_model, step));
}

Tensor norm(const SyncModel& m, const std::string& base, const Tensor& x) {
    return layer_norm_rows(x, m.param(base + ".gain"), m.param(base + ".bias"));
}

bool traced(const ForwardOptions& opt, const LayerSpec& spec) {
    if (!opt.trace_layers) return true;
    return std::find(opt.trace_layers->begin(), opt.trace_layers->end(), spec) != opt.trace_layers->end();
}

Tensor run_block(const SyncModel& m, Block block, const Tensor& query, const Tensor& kv, const ForwardOptions& opt,
                 ForwardOutput& out) {
    Tensor x = query;
    const int L = m.config().layers_per_block;
    for (int l = 1; l <= L; ++l) {
        const std::string p = layer_prefix(block, l);
        const LayerSpec where{block, l};
        const Tensor q_in = norm(m, p + "ln_q", x);
        const Tensor kv_in = norm(m, p + "ln_kv", kv);
        auto att = cross_attention(q_in, kv_in, attention_params(m, block, l), m.config().n_heads, opt.tau_trace,
                                   traced(opt, where), where);
        x = add(x, att.output);
        const Tensor h = relu(affine(norm(m, p + "ln_ffn", x), m.param(p + "ffn.fc1.weight"),
                                     m.param(p + "ffn.fc1.bias")));
        x = add(x, affine(h, m.param(p + "ffn.fc2.weight"), m.param(p + "ffn.fc2.bias")));
        out.block_outputs[where] = x;
        for (auto& t : att.traces) out.traces.push_back(std::move(t));
    }
    return norm(m, std::string(block_name(block)) + ".ln_out", x);
}

}  // namespace

ForwardOutput model_forward(const SyncModel& model, const Tensor& visual, const Tensor& audio, double tau_trace) {
    ForwardOptions opt;
    opt.tau_trace = tau_trace;
    return model_forward(model, visual, audio, opt);
}

ForwardOutput model_forward(const SyncModel& model, const Tensor& visual, const Tensor& audio,
                            const ForwardOptions& options) {
    const ModelConfig& c = model.config();
    if (!(options.tau_trace > 0.0)) throw DomainError("model_forward: tau_trace must be positive");
    if (visual.rank() != 2 || visual.cols() != static_cast<std::size_t>(c.d_visual_in)) {
        throw ShapeError("model_forward: visual input " + shape_to_string(visual.shape()) + " expected width " +
                         std::to_string(c.d_visual_in));
    }
    const std::size_t expected_ta = visual.rows() * static_cast<std::size_t>(c.audio_rate);
    if (audio.rank() != 2 || audio.rows() != expected_ta || audio.cols() != static_cast<std::size_t>(c.d_audio_in)) {
        throw ShapeError("model_forward: audio input expected [" + std::to_string(expected_ta) + "x" +
                         std::to_string(c.d_audio_in) + "], got " + shape_to_string(audio.shape()));
    }

    ForwardOutput out;
    const Tensor v = front_end(model, "visual", visual, 1.0);
    const Tensor a = front_end(model, "audio", audio, 1.0 / c.audio_rate);
    const Tensor av = run_block(model, Block::AV, a, v, options, out);
    const Tensor va = run_block(model, Block::VA, v, a, options, out);
    const Tensor fused = run_block(model, Block::Fusion, av, va, options, out);
    out.pooled = tanh(max_pool_rows(fused));
    out.logit = affine(out.pooled, model.param("head.weight"), model.param("head.bias"));
    return out;
}

std::size_t param_count(const SyncModel& model, ParamScope scope) {
    std::size_t n = 0;
    for (const auto& [name, t] : model.parameters()) {
        if (scope == ParamScope::BackendOnly && name.starts_with("frontend.")) continue;
        n += t.numel();
    }
    return n;
}

std::size_t param_count(const ModelConfig& config, ParamScope scope) {
    std::size_t n = 0;
    for (const auto& [name, shape] : parameter_shapes(config)) {
        if (scope == ParamScope::BackendOnly && name.starts_with("frontend.")) continue;
        n += shape_numel(shape);
    }
    return n;
}

std::size_t param_count_prefix(const SyncModel& model, std::string_view prefix) {
    std::size_t n = 0;
    for (const auto& [name, t] : model.parameters()) {
        if (name.starts_with(prefix)) n += t.numel();
    }
    return n;
}

}  // namespace mtd
