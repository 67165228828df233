#pragma once

// Dense row-major tensors of 64-bit reals with reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a graph node. Operations on tensors that
// require gradients record their parents and a backward closure; calling
// backward() on a scalar walks the recorded graph once in reverse
// topological order. Leaves accumulate gradients across calls until
// zero_grad(); intermediate nodes are reset on every call.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const noexcept { return !backward_fn; }
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;
    /// Row/column count of a rank-2 tensor; throws ShapeError otherwise.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> values() const;
    /// Writable view for optimizers and finite differencing. Mutating the
    /// values of a node that already has dependents invalidates them.
    std::span<double> mutable_values();
    double item() const;
    double at(std::size_t r, std::size_t c) const;

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool has_grad() const;
    std::span<const double> grad() const;
    void zero_grad();

    /// New leaf sharing no storage with this tensor and carrying no history.
    Tensor detach() const;
    /// Deep copy as a leaf, keeping requires_grad.
    Tensor clone() const;

    const char* op_name() const;
    std::shared_ptr<detail::Node> node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// RAII switch disabling graph recording on the current thread.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
/// x[m×k]·w[k×n] + bias[n] broadcast over rows.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias);

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// log(1 + exp(x)), stable for large |x|.
Tensor softplus(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor log(const Tensor& x);
/// Smooth-L1 with threshold delta: 0.5x²/delta inside, |x| - 0.5delta outside.
Tensor huber(const Tensor& x, double delta = 1.0);

// Reductions and broadcasting.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// [m×n] -> [m×1]
Tensor rows_sum(const Tensor& x);
/// [1×n] -> [m×n]
Tensor broadcast_rows(const Tensor& row, std::size_t m);
/// [m×1] -> [m×n]
Tensor broadcast_cols(const Tensor& col, std::size_t n);
/// Column-wise maximum over rows (max-pool over time): [m×n] -> [1×n].
Tensor max_pool_rows(const Tensor& x);

// Structural.
/// Same values, new shape of equal element count.
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Normalization and distributions.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Row-wise softmax(x / (tau·scale)) with max subtraction.
Tensor softmax_rows(const Tensor& x, double tau = 1.0, double scale = 1.0);

inline constexpr double kKlFloor = 1e-8;
/// (1/m)·Σ_i Σ_j P·ln(P/Q) with both arguments floored at kKlFloor.
/// Every row of P and Q must sum to 1 within 1e-6.
Tensor kl_div_rows(const Tensor& p, const Tensor& q);

/// Populates gradients of every requires_grad leaf reachable from loss.
void backward(const Tensor& loss);

/// Central-difference check of d f(x)/dx against backward(). Returns the
/// maximum over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
/// f must be deterministic; a non-deterministic f gives meaningless results.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps);

/// Same check for a leaf owned elsewhere (e.g. a model parameter): loss()
/// rebuilds the graph from current values. At most max_coords coordinates
/// are probed, evenly strided. The leaf's values are restored on exit.
double finite_diff_check_leaf(const std::function<Tensor()>& loss, Tensor leaf, double eps,
                              std::size_t max_coords = 0);

}  // namespace mtd
