#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtd/distill_losses.hpp"
#include "mtd/sync_model.hpp"
#include "mtd/tensor.hpp"
#include "test_support.hpp"

namespace mtd::test {

struct PrimitiveCase {
    const char* name;
    std::function<Tensor(const Tensor&)> f;
    double lo = -1.0, hi = 1.0;
};

struct GradientError {
    std::string name;
    double error = 0.0;
};

inline constexpr int kGradientShapes = 3;

/// Worst relative central-difference error of every primitive on one of three shapes.
inline std::vector<GradientError> primitive_gradient_errors(int shape_index) {
    const std::size_t shapes[3][2] = {{2, 3}, {4, 4}, {5, 2}};
    const auto [r, c] = std::pair{shapes[shape_index][0], shapes[shape_index][1]};
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(shape_index) * 37;
    const Tensor other = random_matrix(r, c, seed + 1, -1, 1, false);
    const Tensor right = random_matrix(c, 3, seed + 2, -1, 1, false);
    const Tensor left = random_matrix(2, r, seed + 3, -1, 1, false);
    const Tensor bias = Tensor::from({3}, {0.1, -0.2, 0.3});
    const Tensor gamma = random_matrix(1, c, seed + 4, 0.5, 1.5, false);
    const Tensor beta = random_matrix(1, c, seed + 5, -0.5, 0.5, false);
    const Tensor q = random_distribution(r, c, seed + 6);
    const Tensor positive = random_matrix(r, c, seed + 7, 0.5, 2.0, false);
    const std::vector<PrimitiveCase> cases{
        {"matmul_right", [&](const Tensor& x) { return sum(matmul(x, right)); }},
        {"matmul_left", [&](const Tensor& x) { return sum(tanh(matmul(left, x))); }},
        {"transpose", [&](const Tensor& x) { return sum(mul(transpose(x), transpose(other))); }},
        {"affine", [&](const Tensor& x) { return sum(tanh(affine(x, right, reshape(bias, {3})))); }},
        {"add", [&](const Tensor& x) { return sum(mul(add(x, other), add(x, other))); }},
        {"sub", [&](const Tensor& x) { return sum(mul(sub(x, other), x)); }},
        {"mul", [&](const Tensor& x) { return sum(mul(x, other)); }},
        {"div", [&](const Tensor& x) { return sum(div(x, positive)); }},
        {"div_denominator", [&](const Tensor& x) { return sum(div(other, x)); }, 0.5, 2.0},
        {"scale", [&](const Tensor& x) { return sum(mul(scale(x, -2.5), x)); }},
        {"add_scalar", [&](const Tensor& x) { return sum(mul(add_scalar(x, 0.7), x)); }},
        {"relu", [&](const Tensor& x) { return sum(mul(relu(x), other)); }},
        {"tanh", [&](const Tensor& x) { return sum(tanh(x)); }, -2, 2},
        {"sigmoid", [&](const Tensor& x) { return sum(mul(sigmoid(x), other)); }, -3, 3},
        {"softplus", [&](const Tensor& x) { return sum(softplus(x)); }, -4, 4},
        {"sqrt", [&](const Tensor& x) { return sum(sqrt(x)); }, 0.5, 2.0},
        {"log", [&](const Tensor& x) { return sum(log(x)); }, 0.5, 2.0},
        {"huber", [&](const Tensor& x) { return sum(huber(scale(x, 2.0), 1.0)); }, -1.3, 1.3},
        {"sum", [&](const Tensor& x) { return sum(x); }},
        {"mean", [&](const Tensor& x) { return mean(mul(x, x)); }},
        {"rows_sum", [&](const Tensor& x) { return sum(tanh(rows_sum(x))); }},
        {"broadcast_rows", [&](const Tensor& x) { return sum(mul(broadcast_rows(slice_rows(x, 0, 1), r), other)); }},
        {"broadcast_cols", [&](const Tensor& x) { return sum(mul(broadcast_cols(slice_cols(x, 0, 1), c), other)); }},
        {"max_pool_rows", [&](const Tensor& x) { return sum(mul(max_pool_rows(x), slice_rows(other, 0, 1))); }},
        {"reshape", [&](const Tensor& x) { return sum(tanh(reshape(x, {c, r}))); }},
        {"slice_concat", [&](const Tensor& x) {
             return sum(mul(concat_rows({slice_rows(x, 1, r - 1), slice_rows(x, 0, 1)}), other));
         }},
        {"concat_cols", [&](const Tensor& x) {
             return sum(mul(concat_cols({slice_cols(x, 1, c - 1), slice_cols(x, 0, 1)}), other));
         }},
        {"layer_norm", [&](const Tensor& x) {
             return sum(mul(layer_norm_rows(x, reshape(gamma, {c}), reshape(beta, {c})), other));
         }},
        {"softmax_rows", [&](const Tensor& x) { return sum(mul(softmax_rows(x, 0.7, 1.3), other)); }, -2, 2},
        {"kl_first", [&](const Tensor& x) { return kl_div_rows(softmax_rows(x), q); }, -2, 2},
        {"kl_second", [&](const Tensor& x) { return kl_div_rows(q, softmax_rows(x, 3.0)); }, -2, 2},
    };
    std::vector<GradientError> out;
    for (const auto& pc : cases) {
        const Tensor x = random_matrix(r, c, seed + 50, pc.lo, pc.hi);
        out.push_back({std::string(pc.name) + " on " + std::to_string(r) + "x" + std::to_string(c),
                       finite_diff_check(pc.f, x, 1e-6)});
    }
    return out;
}

inline const std::vector<LayerSpec>& toy_layer_set() {
    static const std::vector<LayerSpec> layers{{Block::Fusion, 2}, {Block::AV, 1}};
    return layers;
}

/// Total loss of one method for a toy student/teacher pair on fresh forwards.
inline Tensor method_total(Method method, const SyncModel& student, const SyncModel& teacher,
                           const FitNetsRegressors& reg, std::uint64_t input_seed = 5) {
    DistillConfig cfg;
    cfg.method = method;
    cfg.layer_set = toy_layer_set();
    cfg.tau = 3.0;
    ForwardOptions opt;
    opt.tau_trace = trace_temperature(cfg);
    opt.trace_layers = traced_layers(cfg, student.config().layers_per_block);
    const auto c = student.config();
    const auto a = toy_input(c, 3, input_seed), b = toy_input(c, 3, input_seed + 1), d = toy_input(c, 3, input_seed + 2);
    const auto s = model_forward(student, a.visual, a.audio, opt);
    const auto t = model_forward(teacher, a.visual, a.audio, opt);
    switch (method) {
        case Method::BceOnly: return bce_loss(s.logit, 1);
        case Method::KD: return kd_loss(s.logit, t.logit_value(), 1, 3.0).total;
        case Method::RKD: {
            const auto s2 = model_forward(student, b.visual, b.audio, opt), t2 = model_forward(teacher, b.visual, b.audio, opt);
            const auto s3 = model_forward(student, d.visual, d.audio, opt), t3 = model_forward(teacher, d.visual, d.audio, opt);
            const std::vector<OutputPair> batch{{&s, &t}, {&s2, &t2}, {&s3, &t3}};
            const std::vector<int> labels{1, 0, 0};
            return rkd_batch_loss(batch, labels).total;
        }
        case Method::MiniLMStar: return minilm_star_loss(s, t, 1).total;
        case Method::LastFitNets: return fitnets_loss(s, t, last_layers(student.config().layers_per_block), reg, 1).total;
        case Method::SelFitNets: return fitnets_loss(s, t, toy_layer_set(), reg, 1).total;
        case Method::MTD: return mtd_loss(s, t, 1, cfg).total;
    }
    return {};
}

/// Worst central-difference error of a method's total loss over every student
/// parameter (and the regressors it uses), for toy models drawn from `seed`.
inline GradientError method_gradient_error(Method method, std::uint64_t seed, std::size_t coords = 3) {
    const SyncModel student = init_model(toy_config(8, 2, 2, seed));
    const SyncModel teacher = init_model(toy_config(12, 2, 2, seed + 100));
    std::vector<LayerSpec> all = toy_layer_set();
    for (const auto& l : last_layers(2)) all.push_back(l);
    const auto reg = FitNetsRegressors::create(all, 8, 12, seed + 200);
    GradientError worst{std::string(method_name(method)), 0.0};
    auto loss = [&] { return method_total(method, student, teacher, reg, seed + 300); };
    for (const auto& [name, w] : student.parameters()) {
        const double err = finite_diff_check_leaf(loss, w, 1e-6, coords);
        if (err > worst.error) worst = {std::string(method_name(method)) + " / " + name, err};
    }
    if (method == Method::LastFitNets || method == Method::SelFitNets) {
        const auto used = method == Method::LastFitNets ? last_layers(2) : toy_layer_set();
        for (const auto& spec : used) {
            const auto& [wt, bias] = reg.maps.at(spec);
            for (const Tensor& p : {wt, bias}) {
                const double err = finite_diff_check_leaf(loss, p, 1e-6, 2 * coords);
                if (err > worst.error) worst = {std::string(method_name(method)) + " / regressor", err};
            }
        }
    }
    return worst;
}

}  // namespace mtd::test
