#pragma once

// Distillation objectives over teacher/student ForwardOutput pairs.
//
// MTD:   L = BCE + Σ_l τ²·KL(CAD_s,l ‖ CAD_t,l) + Σ_l τ²·KL(VR_s,l ‖ VR_t,l)
//        with the per-layer KL averaged over heads and query rows.
// Baselines: KD (Bernoulli soft targets), RKD (distance + angle relations of
// pooled embeddings), MiniLM* (CAD+VR at the last Fusion layer, τ = 1),
// LAST/SEL-FitNets (regressed hidden-state MSE).
//
// Teacher-side tensors are always detached, so no gradient reaches the teacher.

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtd/sync_model.hpp"
#include "mtd/tensor.hpp"

namespace mtd {

enum class Method { BceOnly, KD, RKD, MiniLMStar, LastFitNets, SelFitNets, MTD };

inline constexpr Method kAllMethods[] = {Method::BceOnly,     Method::KD,         Method::RKD, Method::MiniLMStar,
                                         Method::LastFitNets, Method::SelFitNets, Method::MTD};

std::string_view method_name(Method m);
/// Accepts bce, kd, rkd, minilm, last-fitnets, sel-fitnets, mtd (case-insensitive).
Method parse_method(std::string_view text);

/// Candidate layer sets S1..S8; S8 = {Fusion 3, AV 4, VA 1}.
std::vector<LayerSpec> candidate_layer_set(int index);
inline std::vector<LayerSpec> default_layer_set() { return candidate_layer_set(8); }
/// Last layer of each block.
std::vector<LayerSpec> last_layers(int layers_per_block);

struct DistillConfig {
    Method method = Method::MTD;
    std::vector<LayerSpec> layer_set = default_layer_set();
    double tau = 25.0;
    bool include_cad = true;
    bool include_vr = true;
    /// KL(teacher ‖ student) instead of KL(student ‖ teacher).
    bool reverse_kl = false;

    void validate() const;
};

/// Scalar tensors; terms unused by a method are exactly zero.
struct LossBreakdown {
    Tensor bce;
    Tensor cad;
    Tensor vr;
    Tensor aux;
    Tensor total;

    static LossBreakdown from_terms(Tensor bce, Tensor cad, Tensor vr, Tensor aux);
};

struct LossValues {
    double bce = 0.0;
    double cad = 0.0;
    double vr = 0.0;
    double aux = 0.0;
    double total = 0.0;

    static LossValues of(const LossBreakdown& b);
    LossValues& operator+=(const LossValues& o);
    LossValues scaled(double f) const;
    bool operator==(const LossValues&) const = default;
};

/// softplus-form binary cross-entropy on sigmoid(logit).
Tensor bce_loss(const Tensor& logit, int label);

Tensor cad_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
                double tau, bool reverse_kl = false);
Tensor vr_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
               double tau, bool reverse_kl = false);

LossBreakdown mtd_loss(const ForwardOutput& student, const ForwardOutput& teacher, int label,
                       const DistillConfig& config);

/// aux = τ²·KL(Bern(σ(t/τ)) ‖ Bern(σ(s/τ))).
LossBreakdown kd_loss(const Tensor& student_logit, double teacher_logit, int label, double tau);

inline constexpr double kRkdDistanceWeight = 1.0;
inline constexpr double kRkdAngleWeight = 2.0;

/// Distance (mean-normalized) + angle Huber losses between the relation
/// structures of two embedding batches [B×d_s] and [B×d_t], B ≥ 3.
Tensor rkd_relational_loss(const Tensor& student_embeddings, const Tensor& teacher_embeddings);

struct OutputPair {
    const ForwardOutput* student = nullptr;
    const ForwardOutput* teacher = nullptr;
};

/// BCE on the first sample, relations over it plus its batch mates.
LossBreakdown rkd_loss(const ForwardOutput& student, const ForwardOutput& teacher,
                       std::span<const OutputPair> batch_mates, int label);
/// Batch form: mean BCE over samples + one relational term over the batch.
LossBreakdown rkd_batch_loss(std::span<const OutputPair> batch, std::span<const int> labels);

enum class FitNetsMode { Last, Sel };

/// Student-to-teacher width regressors, one affine map per distilled layer.
struct FitNetsRegressors {
    std::map<LayerSpec, std::pair<Tensor, Tensor>> maps;  ///< weight [d_s×d_t], bias [d_t]

    static FitNetsRegressors create(std::span<const LayerSpec> layers, int d_student, int d_teacher,
                                    std::uint64_t seed);
    static FitNetsRegressors identity(std::span<const LayerSpec> layers, int width);
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
};

std::vector<LayerSpec> fitnets_layers(FitNetsMode mode, const DistillConfig& config, int layers_per_block);

/// aux = Σ over distilled layers of the MSE between regressed student and
/// teacher block outputs.
LossBreakdown fitnets_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
                           const FitNetsRegressors& regressors, int label);

/// aux = cad + vr on the last Fusion layer at τ = 1.
LossBreakdown minilm_star_loss(const ForwardOutput& student, const ForwardOutput& teacher, int label);

/// Trace temperature the student/teacher forwards must use for a method.
double trace_temperature(const DistillConfig& config);
/// Layers that must be traced for a method (empty when no traces are used).
std::vector<LayerSpec> traced_layers(const DistillConfig& config, int layers_per_block);

}  // namespace mtd
