#pragma once

// Cross-modal Transformer synchronizer: per-frame front-ends, three stacks of
// cross-attention layers (AV, VA, Fusion) and a max-pool/tanh/affine head.
//
// Routing:
//   AV     : audio queries  -> visual keys/values
//   VA     : visual queries -> audio keys/values
//   Fusion : AV output      -> VA output
// Every attention layer can emit its cross-attention distribution (CAD) and
// value-relation (VR) per head, recomputed at a tracing temperature.

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtd/tensor.hpp"

namespace mtd {

enum class Block { AV, VA, Fusion };

std::string_view block_name(Block b);
/// Parses "av", "va", "fusion" (case-insensitive).
Block parse_block(std::string_view text);

/// One attention layer, 1-based within its block.
struct LayerSpec {
    Block block = Block::AV;
    int layer = 1;

    auto operator<=>(const LayerSpec&) const = default;
};

/// "fusion3", "av4", ... as accepted on command lines.
std::string layer_spec_to_string(const LayerSpec& spec);
LayerSpec parse_layer_spec(std::string_view text);
std::vector<LayerSpec> parse_layer_list(std::string_view text);

struct ModelConfig {
    int d_model = 64;
    int n_heads = 4;
    int layers_per_block = 4;
    int ffn_mult = 2;
    int d_visual_in = 16;
    int d_audio_in = 12;
    int audio_rate = 4;
    std::uint64_t seed = 1;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }

    static ModelConfig teacher_desk();
    static ModelConfig student_desk();
    /// Literal widths (512 / 200); used for parameter counting only.
    static ModelConfig teacher_full_width();
    static ModelConfig student_full_width();

    bool operator==(const ModelConfig&) const = default;
};

struct AttentionTrace {
    Block block = Block::AV;
    int layer = 1;
    int head = 1;
    Tensor cad;  ///< [Tq×Tk] softmax(QKᵀ/(τ√d_head))
    Tensor vr;   ///< [Tk×Tk] softmax(VVᵀ/(τ√d_head))
    Tensor values;  ///< per-head V [Tk×d_head], kept for recomputation checks
    double tau_used = 1.0;
};

struct ForwardOutput {
    Tensor logit;   ///< [1×1] pre-sigmoid sync score
    Tensor pooled;  ///< [1×d_model], after max-pool and tanh
    std::vector<AttentionTrace> traces;
    std::map<LayerSpec, Tensor> block_outputs;

    double logit_value() const { return logit.item(); }
    /// Traces of one layer ordered by head; empty if the layer was not traced.
    std::vector<const AttentionTrace*> layer_traces(const LayerSpec& spec) const;
};

struct ForwardOptions {
    double tau_trace = 1.0;
    /// Layers whose traces are recorded; nullopt records every layer.
    std::optional<std::vector<LayerSpec>> trace_layers;
};

using ParameterMap = std::map<std::string, Tensor>;

class SyncModel {
public:
    SyncModel() = default;
    SyncModel(ModelConfig config, ParameterMap params);

    const ModelConfig& config() const { return config_; }
    const ParameterMap& parameters() const { return params_; }
    ParameterMap& parameters() { return params_; }
    const Tensor& param(const std::string& name) const;

    /// Deep copy with independent storage.
    SyncModel clone() const;
    void set_requires_grad(bool on);
    void zero_grad();

private:
    ModelConfig config_;
    ParameterMap params_;
};

/// Name → shape table for a configuration, in name order.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);

SyncModel init_model(const ModelConfig& config);

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

AttentionParams attention_params(const SyncModel& model, Block block, int layer);

struct CrossAttentionResult {
    Tensor output;  ///< [Tq×d]
    std::vector<AttentionTrace> traces;
};

/// Multi-head cross-attention (forward softmax at τ=1). Residuals and layer
/// norms are the caller's job. Traces are produced only when trace is true.
CrossAttentionResult cross_attention(const Tensor& query_seq, const Tensor& kv_seq, const AttentionParams& params,
                                     int n_heads, double tau_trace, bool trace = true,
                                     LayerSpec where = {});

/// visual [Tv×d_visual_in], audio [(audio_rate·Tv)×d_audio_in].
ForwardOutput model_forward(const SyncModel& model, const Tensor& visual, const Tensor& audio, double tau_trace);
ForwardOutput model_forward(const SyncModel& model, const Tensor& visual, const Tensor& audio,
                            const ForwardOptions& options);

/// Sinusoidal encoding evaluated at fractional positions index·step.
Tensor positional_encoding(std::size_t length, int d_model, double step);

enum class ParamScope { All, BackendOnly };

std::size_t param_count(const SyncModel& model, ParamScope scope);
std::size_t param_count(const ModelConfig& config, ParamScope scope);
/// Element count of parameters whose name starts with prefix.
std::size_t param_count_prefix(const SyncModel& model, std::string_view prefix);

}  // namespace mtd
