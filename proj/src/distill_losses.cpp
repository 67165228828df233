#include "mtd/distill_losses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "mtd/errors.hpp"

namespace mtd {

namespace {

Tensor zero() { return Tensor::scalar(0.0); }

Tensor as_scalar(const Tensor& t) { return t.rank() == 0 ? t : reshape(t, {}); }

using TraceField = Tensor AttentionTrace::*;

Tensor behavior_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
                     double tau, bool reverse_kl, TraceField field, const char* what) {
    if (!(tau > 0.0)) throw DomainError(std::string(what) + ": tau must be positive");
    Tensor total;
    for (const LayerSpec& spec : layers) {
        const auto s = student.layer_traces(spec);
        const auto t = teacher.layer_traces(spec);
        if (s.empty() || t.empty()) {
            throw ConfigError(std::string(what) + ": no trace for layer " + layer_spec_to_string(spec) +
                              (s.empty() ? " in student" : " in teacher"));
        }
        if (s.size() != t.size()) {
            throw ConfigError(std::string(what) + ": head count differs at layer " + layer_spec_to_string(spec) +
                              " (student " + std::to_string(s.size()) + ", teacher " + std::to_string(t.size()) + ")");
        }
        Tensor layer_sum;
        for (std::size_t h = 0; h < s.size(); ++h) {
            if (std::abs(s[h]->tau_used - tau) > 1e-12 || std::abs(t[h]->tau_used - tau) > 1e-12) {
                throw ConfigError(std::string(what) + ": traces at layer " + layer_spec_to_string(spec) +
                                  " were recorded at a different temperature");
            }
            const Tensor& sp = s[h]->*field;
            const Tensor tp = (t[h]->*field).detach();
            const Tensor kl = reverse_kl ? kl_div_rows(tp, sp) : kl_div_rows(sp, tp);
            layer_sum = layer_sum.defined() ? add(layer_sum, kl) : kl;
        }
        const Tensor layer_term = scale(layer_sum, tau * tau / static_cast<double>(s.size()));
        total = total.defined() ? add(total, layer_term) : layer_term;
    }
    return total.defined() ? total : zero();
}

double bernoulli_entropy_term(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

double sigmoid_value(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

std::string_view method_name(Method m) {
    switch (m) {
        case Method::BceOnly: return "bce";
        case Method::KD: return "kd";
        case Method::RKD: return "rkd";
        case Method::MiniLMStar: return "minilm";
        case Method::LastFitNets: return "last-fitnets";
        case Method::SelFitNets: return "sel-fitnets";
        case Method::MTD: return "mtd";
    }
    return "?";
}

Method parse_method(std::string_view text) {
    std::string t(text);
    for (char& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::replace(t.begin(), t.end(), '_', '-');
    if (t == "bce-only") t = "bce";
    if (t == "minilm*" || t == "minilm-star") t = "minilm";
    for (Method m : kAllMethods) {
        if (method_name(m) == t) return m;
    }
    throw ConfigError("unknown distillation method '" + std::string(text) + "'");
}

std::vector<LayerSpec> candidate_layer_set(int index) {
    const LayerSpec f3{Block::Fusion, 3}, f4{Block::Fusion, 4}, av4{Block::AV, 4}, va1{Block::VA, 1};
    switch (index) {
        case 1: return {f3};
        case 2: return {av4};
        case 3: return {va1};
        case 4: return {f3, av4};
        case 5: return {f3, va1};
        case 6: return {av4, va1};
        case 7: return {f3, f4, av4};
        case 8: return {f3, av4, va1};
        default: throw ConfigError("candidate layer set index must be 1..8, got " + std::to_string(index));
    }
}

std::vector<LayerSpec> last_layers(int layers_per_block) {
    return {{Block::AV, layers_per_block}, {Block::VA, layers_per_block}, {Block::Fusion, layers_per_block}};
}

void DistillConfig::validate() const {
    if (!(tau > 0.0)) throw ConfigError("distill.tau must be positive");
    if ((method == Method::MTD || method == Method::SelFitNets) && layer_set.empty()) {
        throw ConfigError("distill.layers must be non-empty for method " + std::string(method_name(method)));
    }
}

LossBreakdown LossBreakdown::from_terms(Tensor bce, Tensor cad, Tensor vr, Tensor aux) {
    LossBreakdown b;
    b.bce = as_scalar(bce);
    b.cad = cad.defined() ? as_scalar(cad) : zero();
    b.vr = vr.defined() ? as_scalar(vr) : zero();
    b.aux = aux.defined() ? as_scalar(aux) : zero();
    b.total = add(add(add(b.bce, b.cad), b.vr), b.aux);
    return b;
}

LossValues LossValues::of(const LossBreakdown& b) {
    return {b.bce.item(), b.cad.item(), b.vr.item(), b.aux.item(), b.total.item()};
}

LossValues& LossValues::operator+=(const LossValues& o) {
    bce += o.bce;
    cad += o.cad;
    vr += o.vr;
    aux += o.aux;
    total += o.total;
    return *this;
}

LossValues LossValues::scaled(double f) const { return {bce * f, cad * f, vr * f, aux * f, total * f}; }

Tensor bce_loss(const Tensor& logit, int label) {
    if (label != 0 && label != 1) throw UsageError("bce_loss: label must be 0 or 1");
    const Tensor x = as_scalar(logit);
    // -log σ(x) = softplus(-x); -log(1-σ(x)) = softplus(x)
    return label == 1 ? softplus(scale(x, -1.0)) : softplus(x);
}

Tensor cad_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
                double tau, bool reverse_kl) {
    return behavior_loss(student, teacher, layers, tau, reverse_kl, &AttentionTrace::cad, "cad_loss");
}

Tensor vr_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
               double tau, bool reverse_kl) {
    return behavior_loss(student, teacher, layers, tau, reverse_kl, &AttentionTrace::vr, "vr_loss");
}

LossBreakdown mtd_loss(const ForwardOutput& student, const ForwardOutput& teacher, int label,
                       const DistillConfig& config) {
    if (config.method != Method::MTD) throw UsageError("mtd_loss: config.method must be mtd");
    config.validate();
    Tensor cad = config.include_cad ? cad_loss(student, teacher, config.layer_set, config.tau, config.reverse_kl) : zero();
    Tensor vr = config.include_vr ? vr_loss(student, teacher, config.layer_set, config.tau, config.reverse_kl) : zero();
    return LossBreakdown::from_terms(bce_loss(student.logit, label), cad, vr, {});
}

LossBreakdown kd_loss(const Tensor& student_logit, double teacher_logit, int label, double tau) {
    if (!(tau > 0.0)) throw DomainError("kd_loss: tau must be positive");
    const double p = sigmoid_value(teacher_logit / tau);
    const Tensor z = scale(as_scalar(student_logit), 1.0 / tau);
    // KL(Bern(p) ‖ Bern(q)) with log q = -softplus(-z), log(1-q) = -softplus(z)
    const double teacher_part = bernoulli_entropy_term(p) + bernoulli_entropy_term(1.0 - p);
    const Tensor cross = add(scale(softplus(scale(z, -1.0)), p), scale(softplus(z), 1.0 - p));
    const Tensor aux = scale(add_scalar(cross, teacher_part), tau * tau);
    return LossBreakdown::from_terms(bce_loss(student_logit, label), {}, {}, aux);
}

namespace {

// Pairwise Euclidean distances [B×B]; the diagonal is (numerically) zero.
Tensor pairwise_distances(const Tensor& e) {
    const std::size_t B = e.rows();
    const Tensor sq = rows_sum(mul(e, e));
    const Tensor sq_b = broadcast_cols(sq, B);
    const Tensor d2 = sub(add(sq_b, transpose(sq_b)), scale(matmul(e, transpose(e)), 2.0));
    std::vector<double> eye(B * B, 0.0);
    for (std::size_t i = 0; i < B; ++i) eye[i * B + i] = 1.0;
    const Tensor id = Tensor::matrix(B, B, eye);
    // identity shift keeps sqrt away from 0 on the diagonal; 1e-12 guards duplicates
    return sub(sqrt(add_scalar(add(relu(d2), id), 1e-12)), id);
}

Tensor distance_potential(const Tensor& e) {
    const std::size_t B = e.rows();
    const Tensor d = pairwise_distances(e);
    const Tensor mu = scale(sum(d), 1.0 / static_cast<double>(B * (B - 1)));
    const Tensor mu_b = broadcast_rows(broadcast_cols(reshape(mu, {1, 1}), B), B);
    return div(d, mu_b);
}

// Cosines between (e_i − e_j) and (e_k − e_j) for a fixed anchor j, [B×B].
Tensor angle_potential(const Tensor& e, std::size_t anchor) {
    const std::size_t B = e.rows(), d = e.cols();
    const Tensor diff = sub(e, broadcast_rows(slice_rows(e, anchor, 1), B));
    std::vector<double> mask(B, 0.0);
    mask[anchor] = 1.0;
    const Tensor norms = sqrt(add_scalar(add(rows_sum(mul(diff, diff)), Tensor::matrix(B, 1, mask)), 1e-12));
    const Tensor unit = div(diff, broadcast_cols(norms, d));
    return matmul(unit, transpose(unit));
}

}  // namespace

Tensor rkd_relational_loss(const Tensor& student_embeddings, const Tensor& teacher_embeddings) {
    const std::size_t B = student_embeddings.rows();
    if (B < 3) throw UsageError("rkd: batch of at least 3 samples required, got " + std::to_string(B));
    if (teacher_embeddings.rows() != B) throw ShapeError("rkd: student and teacher batch sizes differ");
    const Tensor teacher = teacher_embeddings.detach();

    const Tensor dist = scale(sum(huber(sub(distance_potential(student_embeddings), distance_potential(teacher)))),
                              1.0 / static_cast<double>(B * (B - 1)));
    Tensor angle_sum;
    for (std::size_t j = 0; j < B; ++j) {
        const Tensor a = sum(huber(sub(angle_potential(student_embeddings, j), angle_potential(teacher, j))));
        angle_sum = angle_sum.defined() ? add(angle_sum, a) : a;
    }
    const Tensor angle = scale(angle_sum, 1.0 / static_cast<double>(B * (B - 1) * (B - 2)));
    return add(scale(dist, kRkdDistanceWeight), scale(angle, kRkdAngleWeight));
}

LossBreakdown rkd_loss(const ForwardOutput& student, const ForwardOutput& teacher,
                       std::span<const OutputPair> batch_mates, int label) {
    std::vector<Tensor> s{student.pooled}, t{teacher.pooled};
    for (const auto& m : batch_mates) {
        s.push_back(m.student->pooled);
        t.push_back(m.teacher->pooled);
    }
    if (s.size() < 3) throw UsageError("rkd_loss: batch of at least 3 samples required");
    const Tensor aux = rkd_relational_loss(concat_rows(s), concat_rows(t));
    return LossBreakdown::from_terms(bce_loss(student.logit, label), {}, {}, aux);
}

LossBreakdown rkd_batch_loss(std::span<const OutputPair> batch, std::span<const int> labels) {
    if (batch.size() != labels.size()) throw UsageError("rkd_batch_loss: label count mismatch");
    if (batch.size() < 3) throw UsageError("rkd_batch_loss: batch of at least 3 samples required");
    std::vector<Tensor> s, t, bces;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        s.push_back(batch[i].student->pooled);
        t.push_back(batch[i].teacher->pooled);
        bces.push_back(reshape(bce_loss(batch[i].student->logit, labels[i]), {1, 1}));
    }
    const Tensor bce = scale(sum(concat_rows(bces)), 1.0 / static_cast<double>(batch.size()));
    return LossBreakdown::from_terms(bce, {}, {}, rkd_relational_loss(concat_rows(s), concat_rows(t)));
}

FitNetsRegressors FitNetsRegressors::create(std::span<const LayerSpec> layers, int d_student, int d_teacher,
                                            std::uint64_t seed) {
    FitNetsRegressors r;
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_student));
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto ds = static_cast<std::size_t>(d_student), dt = static_cast<std::size_t>(d_teacher);
    for (const LayerSpec& spec : layers) {
        std::vector<double> w(ds * dt);
        for (double& v : w) v = dist(rng);
        r.maps[spec] = {Tensor::matrix(ds, dt, std::move(w), true), Tensor::zeros({dt}, true)};
    }
    return r;
}

FitNetsRegressors FitNetsRegressors::identity(std::span<const LayerSpec> layers, int width) {
    FitNetsRegressors r;
    const auto d = static_cast<std::size_t>(width);
    for (const LayerSpec& spec : layers) {
        std::vector<double> w(d * d, 0.0);
        for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
        r.maps[spec] = {Tensor::matrix(d, d, std::move(w), true), Tensor::zeros({d}, true)};
    }
    return r;
}

std::vector<std::pair<std::string, Tensor>> FitNetsRegressors::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [spec, wb] : maps) {
        const std::string base = "regressor." + layer_spec_to_string(spec);
        out.emplace_back(base + ".weight", wb.first);
        out.emplace_back(base + ".bias", wb.second);
    }
    return out;
}

std::vector<LayerSpec> fitnets_layers(FitNetsMode mode, const DistillConfig& config, int layers_per_block) {
    return mode == FitNetsMode::Last ? last_layers(layers_per_block) : config.layer_set;
}

LossBreakdown fitnets_loss(const ForwardOutput& student, const ForwardOutput& teacher, std::span<const LayerSpec> layers,
                           const FitNetsRegressors& regressors, int label) {
    Tensor aux;
    for (const LayerSpec& spec : layers) {
        auto reg = regressors.maps.find(spec);
        if (reg == regressors.maps.end()) {
            throw ConfigError("fitnets: no regressor for layer " + layer_spec_to_string(spec));
        }
        auto s = student.block_outputs.find(spec);
        auto t = teacher.block_outputs.find(spec);
        if (s == student.block_outputs.end() || t == teacher.block_outputs.end()) {
            throw ConfigError("fitnets: missing block output for layer " + layer_spec_to_string(spec));
        }
        const Tensor projected = affine(s->second, reg->second.first, reg->second.second);
        const Tensor diff = sub(projected, t->second.detach());
        const Tensor mse = mean(mul(diff, diff));
        aux = aux.defined() ? add(aux, mse) : mse;
    }
    return LossBreakdown::from_terms(bce_loss(student.logit, label), {}, {}, aux);
}

LossBreakdown minilm_star_loss(const ForwardOutput& student, const ForwardOutput& teacher, int label) {
    int last = 0;
    for (const auto& [spec, _] : student.block_outputs) {
        if (spec.block == Block::Fusion) last = std::max(last, spec.layer);
    }
    if (last == 0) throw ConfigError("minilm: student output has no Fusion layers");
    const std::vector<LayerSpec> layer{{Block::Fusion, last}};
    const Tensor aux = add(cad_loss(student, teacher, layer, 1.0), vr_loss(student, teacher, layer, 1.0));
    return LossBreakdown::from_terms(bce_loss(student.logit, label), {}, {}, aux);
}

double trace_temperature(const DistillConfig& config) {
    return config.method == Method::MTD ? config.tau : 1.0;
}

std::vector<LayerSpec> traced_layers(const DistillConfig& config, int layers_per_block) {
    switch (config.method) {
        case Method::MTD: return config.layer_set;
        case Method::MiniLMStar: return {{Block::Fusion, layers_per_block}};
        default: return {};
    }
}

}  // namespace mtd
