#include "mtd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

#include "mtd/errors.hpp"

namespace mtd {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Copies into Eigen-aligned storage. Vectorized products over unaligned maps
// peel a data-dependent number of elements, which changes the summation order
// and breaks run-to-run reproducibility.
RowMat aligned(const double* data, std::size_t rows, std::size_t cols) {
    return ConstMapMat(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

namespace {

thread_local bool g_grad_enabled = true;

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a matrix, got shape " +
                         shape_to_string(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
    }
}

// Creates the output node. History is recorded only when grad mode is on and
// at least one input requires gradients.
NodePtr make_result(Shape shape, std::vector<double> value, const char* op,
                    std::initializer_list<const Tensor*> inputs) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    if (!g_grad_enabled) return node;
    bool any = false;
    for (const Tensor* in : inputs) any = any || in->requires_grad();
    if (!any) return node;
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor* in : inputs) node->parents.push_back(in->node());
    return node;
}

NodePtr make_result(Shape shape, std::vector<double> value, const char* op,
                    const std::vector<Tensor>& inputs) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    if (!g_grad_enabled) return node;
    bool any = false;
    for (const Tensor& in : inputs) any = any || in.requires_grad();
    if (!any) return node;
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->parents.push_back(in.node());
    return node;
}

inline bool wants(const NodePtr& p) { return p && p->requires_grad; }

template <typename Fn>
Tensor unary(const Tensor& x, const char* op, Fn&& fwd) {
    std::vector<double> out(x.numel());
    auto in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
    return Tensor(make_result(x.shape(), std::move(out), op, {&x}));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::vector<double> values(shape_numel(shape), value);
    return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_to_string(shape));
    }
    if (values.size() != shape_numel(shape)) {
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_to_string(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
    return from({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->shape;
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::size_t Tensor::rows() const {
    require_rank2(*this, "rows");
    return node_->shape[0];
}

std::size_t Tensor::cols() const {
    require_rank2(*this, "cols");
    return node_->shape[1];
}

std::span<const double> Tensor::values() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->value;
}

std::span<double> Tensor::mutable_values() {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->value;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_to_string(shape()));
    return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    require_rank2(*this, "at");
    if (r >= node_->shape[0] || c >= node_->shape[1]) throw ShapeError("index out of range");
    return node_->value[r * node_->shape[1] + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
    if (!node_) throw UsageError("use of an undefined tensor");
    if (!node_->is_leaf()) throw UsageError("requires_grad can only be changed on leaves");
    node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!node_) throw UsageError("use of an undefined tensor");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::clone() const { return from(shape(), node_->value, node_->requires_grad); }

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() noexcept { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
    }
    std::vector<double> out(m * n);
    const RowMat prod = aligned(a.values().data(), m, k) * aligned(b.values().data(), k, n);
    MapMat(out.data(), m, n) = prod;
    auto node = make_result({m, n}, std::move(out), "matmul", {&a, &b});
    if (node->requires_grad) {
        node->backward_fn = [m, k, n](Node& self) {
            const RowMat g = aligned(self.grad.data(), m, n);
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants(pa)) {
                const RowMat ga = g * aligned(pb->value.data(), k, n).transpose();
                MapMat(pa->grad.data(), m, k) += ga;
            }
            if (wants(pb)) {
                const RowMat gb = aligned(pa->value.data(), m, k).transpose() * g;
                MapMat(pb->grad.data(), k, n) += gb;
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor transpose(const Tensor& x) {
    require_rank2(x, "transpose");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    MapMat(out.data(), n, m) = ConstMapMat(x.values().data(), m, n).transpose();
    auto node = make_result({n, m}, std::move(out), "transpose", {&x});
    if (node->requires_grad) {
        node->backward_fn = [m, n](Node& self) {
            auto& p = self.parents[0];
            MapMat(p->grad.data(), m, n) += ConstMapMat(self.grad.data(), n, m).transpose();
        };
    }
    return Tensor(std::move(node));
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& bias) {
    require_rank2(x, "affine");
    require_rank2(w, "affine");
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    if (w.rows() != k) {
        throw ShapeError("affine: input " + shape_to_string(x.shape()) + " does not match weight " +
                         shape_to_string(w.shape()));
    }
    if (bias.numel() != n) {
        throw ShapeError("affine: bias " + shape_to_string(bias.shape()) + " does not match weight " +
                         shape_to_string(w.shape()));
    }
    std::vector<double> out(m * n);
    MapMat o(out.data(), m, n);
    o = aligned(x.values().data(), m, k) * aligned(w.values().data(), k, n);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), static_cast<Eigen::Index>(n));
    auto node = make_result({m, n}, std::move(out), "affine", {&x, &w, &bias});
    if (node->requires_grad) {
        node->backward_fn = [m, k, n](Node& self) {
            const RowMat g = aligned(self.grad.data(), m, n);
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            auto& pb = self.parents[2];
            if (wants(px)) {
                const RowMat gx = g * aligned(pw->value.data(), k, n).transpose();
                MapMat(px->grad.data(), m, k) += gx;
            }
            if (wants(pw)) {
                const RowMat gw = aligned(px->value.data(), m, k).transpose() * g;
                MapMat(pw->grad.data(), k, n) += gw;
            }
            if (wants(pb)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
                }
            }
        };
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto node = make_result(a.shape(), std::move(out), "add", {&a, &b});
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            for (auto& p : self.parents) {
                if (!wants(p)) continue;
                for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto node = make_result(a.shape(), std::move(out), "sub", {&a, &b});
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants(pa)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
            }
            if (wants(pb)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto node = make_result(a.shape(), std::move(out), "mul", {&a, &b});
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            if (wants(pa)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
            }
            if (wants(pb)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    std::vector<double> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
    auto node = make_result(a.shape(), std::move(out), "div", {&a, &b});
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double inv = 1.0 / pb->value[i];
                if (wants(pa)) pa->grad[i] += self.grad[i] * inv;
                if (wants(pb)) pb->grad[i] -= self.grad[i] * self.value[i] * inv;
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor scale(const Tensor& x, double factor) {
    auto t = unary(x, "scale", [factor](double v) { return v * factor; });
    if (t.requires_grad()) {
        t.node()->backward_fn = [factor](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * factor;
        };
    }
    return t;
}

Tensor add_scalar(const Tensor& x, double offset) {
    auto t = unary(x, "add_scalar", [offset](double v) { return v + offset; });
    if (t.requires_grad()) {
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        };
    }
    return t;
}

Tensor relu(const Tensor& x) {
    auto t = unary(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; });
    if (t.requires_grad()) {
        // subgradient 0 at 0
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (p->value[i] > 0.0) p->grad[i] += self.grad[i];
            }
        };
    }
    return t;
}

Tensor tanh(const Tensor& x) {
    auto t = unary(x, "tanh", [](double v) { return std::tanh(v); });
    if (t.requires_grad()) {
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                p->grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
            }
        };
    }
    return t;
}

namespace {
double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}
}  // namespace

Tensor sigmoid(const Tensor& x) {
    auto t = unary(x, "sigmoid", stable_sigmoid);
    if (t.requires_grad()) {
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                p->grad[i] += self.grad[i] * self.value[i] * (1.0 - self.value[i]);
            }
        };
    }
    return t;
}

Tensor softplus(const Tensor& x) {
    auto t = unary(x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
    if (t.requires_grad()) {
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                p->grad[i] += self.grad[i] * stable_sigmoid(p->value[i]);
            }
        };
    }
    return t;
}

Tensor sqrt(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v >= 0.0)) throw DomainError("sqrt: negative or non-finite argument");
    }
    auto t = unary(x, "sqrt", [](double v) { return std::sqrt(v); });
    if (t.requires_grad()) {
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                p->grad[i] += self.grad[i] * 0.5 / self.value[i];
            }
        };
    }
    return t;
}

Tensor log(const Tensor& x) {
    for (double v : x.values()) {
        if (!(v > 0.0)) throw DomainError("log: non-positive or non-finite argument");
    }
    auto t = unary(x, "log", [](double v) { return std::log(v); });
    if (t.requires_grad()) {
        t.node()->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] / p->value[i];
        };
    }
    return t;
}

Tensor huber(const Tensor& x, double delta) {
    if (!(delta > 0.0)) throw DomainError("huber: delta must be positive");
    auto t = unary(x, "huber", [delta](double v) {
        const double a = std::abs(v);
        return a < delta ? 0.5 * v * v / delta : a - 0.5 * delta;
    });
    if (t.requires_grad()) {
        t.node()->backward_fn = [delta](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const double v = p->value[i];
                const double d = std::abs(v) < delta ? v / delta : (v > 0.0 ? 1.0 : -1.0);
                p->grad[i] += self.grad[i] * d;
            }
        };
    }
    return t;
}

// ---------------------------------------------------------------------------
// Reductions and broadcasting

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    auto node = make_result({}, {total}, "sum", {&x});
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (double& g : p->grad) g += self.grad[0];
        };
    }
    return Tensor(std::move(node));
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor rows_sum(const Tensor& x) {
    require_rank2(x, "rows_sum");
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m);
    auto xv = x.values();
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += xv[i * n + j];
        out[i] = acc;
    }
    auto node = make_result({m, 1}, std::move(out), "rows_sum", {&x});
    if (node->requires_grad) {
        node->backward_fn = [m, n](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[i];
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor broadcast_rows(const Tensor& row, std::size_t m) {
    require_rank2(row, "broadcast_rows");
    if (row.rows() != 1) throw ShapeError("broadcast_rows: expected [1xn], got " + shape_to_string(row.shape()));
    const std::size_t n = row.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(row.values().data(), n, out.data() + i * n);
    auto node = make_result({m, n}, std::move(out), "broadcast_rows", {&row});
    if (node->requires_grad) {
        node->backward_fn = [m, n](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) p->grad[j] += self.grad[i * n + j];
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor broadcast_cols(const Tensor& col, std::size_t n) {
    require_rank2(col, "broadcast_cols");
    if (col.cols() != 1) throw ShapeError("broadcast_cols: expected [mx1], got " + shape_to_string(col.shape()));
    const std::size_t m = col.rows();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) std::fill_n(out.data() + i * n, n, col.values()[i]);
    auto node = make_result({m, n}, std::move(out), "broadcast_cols", {&col});
    if (node->requires_grad) {
        node->backward_fn = [m, n](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) p->grad[i] += self.grad[i * n + j];
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor max_pool_rows(const Tensor& x) {
    require_rank2(x, "max_pool_rows");
    const std::size_t m = x.rows(), n = x.cols();
    auto v = x.values();
    std::vector<double> out(n);
    std::vector<std::size_t> arg(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        out[j] = v[j];
        for (std::size_t i = 1; i < m; ++i) {
            if (v[i * n + j] > out[j]) {
                out[j] = v[i * n + j];
                arg[j] = i;
            }
        }
    }
    auto node = make_result({1, n}, std::move(out), "max_pool_rows", {&x});
    if (node->requires_grad) {
        node->backward_fn = [n, arg = std::move(arg)](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t j = 0; j < n; ++j) p->grad[arg[j] * n + j] += self.grad[j];
        };
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Structural

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    auto node = make_result(std::move(shape), std::move(out), "reshape", {&x});
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        };
    }
    return Tensor(std::move(node));
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (count == 0 || start + count > m) {
        throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_to_string(x.shape()));
    }
    std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * n),
                            x.values().begin() + static_cast<std::ptrdiff_t>((start + count) * n));
    auto node = make_result({count, n}, std::move(out), "slice_rows", {&x});
    if (node->requires_grad) {
        node->backward_fn = [start, n](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[start * n + i] += self.grad[i];
        };
    }
    return Tensor(std::move(node));
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
    require_rank2(x, "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (count == 0 || start + count > n) {
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_to_string(x.shape()));
    }
    std::vector<double> out(m * count);
    MapMat(out.data(), m, count) = ConstMapMat(x.values().data(), m, n).middleCols(start, count);
    auto node = make_result({m, count}, std::move(out), "slice_cols", {&x});
    if (node->requires_grad) {
        node->backward_fn = [m, n, start, count](Node& self) {
            auto& p = self.parents[0];
            MapMat(p->grad.data(), m, n).middleCols(start, count) += ConstMapMat(self.grad.data(), m, count);
        };
    }
    return Tensor(std::move(node));
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) throw ShapeError("concat_rows: column count mismatch");
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    auto node = make_result({m, n}, std::move(out), "concat_rows", parts);
    if (node->requires_grad) {
        node->backward_fn = [](Node& self) {
            std::size_t offset = 0;
            for (auto& p : self.parents) {
                const std::size_t len = p->value.size();
                if (wants(p)) {
                    for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[offset + i];
                }
                offset += len;
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        if (p.rows() != m) throw ShapeError("concat_cols: row count mismatch");
        n += p.cols();
    }
    std::vector<double> out(m * n);
    MapMat o(out.data(), m, n);
    std::size_t col = 0;
    for (const auto& p : parts) {
        o.middleCols(col, p.cols()) = ConstMapMat(p.values().data(), m, p.cols());
        col += p.cols();
    }
    auto node = make_result({m, n}, std::move(out), "concat_cols", parts);
    if (node->requires_grad) {
        node->backward_fn = [m, n](Node& self) {
            ConstMapMat g(self.grad.data(), m, n);
            std::size_t c = 0;
            for (auto& p : self.parents) {
                const std::size_t w = p->shape[1];
                if (wants(p)) MapMat(p->grad.data(), m, w) += g.middleCols(c, w);
                c += w;
            }
        };
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Normalization and distributions

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_rank2(x, "layer_norm_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (gamma.numel() != n || beta.numel() != n) {
        throw ShapeError("layer_norm_rows: gain/bias width does not match " + shape_to_string(x.shape()));
    }
    auto xv = x.values();
    auto gv = gamma.values();
    auto bv = beta.values();
    std::vector<double> out(m * n), xhat(m * n), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xv.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (row[j] - mu) * inv_std[i];
            out[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
        }
    }
    auto node = make_result({m, n}, std::move(out), "layer_norm_rows", {&x, &gamma, &beta});
    if (node->requires_grad) {
        node->backward_fn = [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
            auto& px = self.parents[0];
            auto& pg = self.parents[1];
            auto& pb = self.parents[2];
            std::vector<double> dxhat(n);
            for (std::size_t i = 0; i < m; ++i) {
                const double* g = self.grad.data() + i * n;
                const double* xh = xhat.data() + i * n;
                if (wants(pg)) {
                    for (std::size_t j = 0; j < n; ++j) pg->grad[j] += g[j] * xh[j];
                }
                if (wants(pb)) {
                    for (std::size_t j = 0; j < n; ++j) pb->grad[j] += g[j];
                }
                if (!wants(px)) continue;
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dxhat[j] = g[j] * pg->value[j];
                    s1 += dxhat[j];
                    s2 += dxhat[j] * xh[j];
                }
                const double nn = static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    px->grad[i * n + j] += inv_std[i] / nn * (nn * dxhat[j] - s1 - xh[j] * s2);
                }
            }
        };
    }
    return Tensor(std::move(node));
}

Tensor softmax_rows(const Tensor& x, double tau, double scale_factor) {
    require_rank2(x, "softmax_rows");
    if (!(tau > 0.0) || !(scale_factor > 0.0)) {
        throw DomainError("softmax_rows: tau and scale must be positive");
    }
    const std::size_t m = x.rows(), n = x.cols();
    const double inv = 1.0 / (tau * scale_factor);
    auto xv = x.values();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = xv.data() + i * n;
        double* o = out.data() + i * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp((row[j] - mx) * inv);
            z += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= z;
    }
    auto node = make_result({m, n}, std::move(out), "softmax_rows", {&x});
    if (node->requires_grad) {
        node->backward_fn = [m, n, inv](Node& self) {
            auto& p = self.parents[0];
            for (std::size_t i = 0; i < m; ++i) {
                const double* y = self.value.data() + i * n;
                const double* g = self.grad.data() + i * n;
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
                for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += inv * y[j] * (g[j] - dot);
            }
        };
    }
    return Tensor(std::move(node));
}

namespace {
void check_distribution_rows(const Tensor& t, const char* which) {
    const std::size_t m = t.rows(), n = t.cols();
    auto v = t.values();
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        bool ok = true;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = v[i * n + j];
            if (!std::isfinite(e) || e < -1e-12) ok = false;
            s += e;
        }
        if (!ok || std::abs(s - 1.0) > 1e-6) {
            throw DomainError(std::string("kl_div_rows: row ") + std::to_string(i) + " of " + which +
                              " is not a probability distribution (sum " + std::to_string(s) + ")");
        }
    }
}
}  // namespace

Tensor kl_div_rows(const Tensor& p, const Tensor& q) {
    require_rank2(p, "kl_div_rows");
    require_same_shape(p, q, "kl_div_rows");
    check_distribution_rows(p, "P");
    check_distribution_rows(q, "Q");
    const std::size_t m = p.rows();
    auto pv = p.values(), qv = q.values();
    double total = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double a = std::max(pv[i], kKlFloor);
        const double b = std::max(qv[i], kKlFloor);
        total += a * std::log(a / b);
    }
    const double inv_m = 1.0 / static_cast<double>(m);
    auto node = make_result({}, {total * inv_m}, "kl_div_rows", {&p, &q});
    if (node->requires_grad) {
        node->backward_fn = [inv_m](Node& self) {
            auto& pp = self.parents[0];
            auto& pq = self.parents[1];
            const double g = self.grad[0] * inv_m;
            for (std::size_t i = 0; i < pp->value.size(); ++i) {
                const double a = std::max(pp->value[i], kKlFloor);
                const double b = std::max(pq->value[i], kKlFloor);
                if (wants(pp) && pp->value[i] > kKlFloor) pp->grad[i] += g * (std::log(a / b) + 1.0);
                if (wants(pq) && pq->value[i] > kKlFloor) pq->grad[i] -= g * a / b;
            }
        };
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Backward pass

void backward(const Tensor& loss) {
    if (!loss.defined()) throw UsageError("backward: undefined loss");
    if (loss.numel() != 1) {
        throw UsageError("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));
    }
    Node* root = loss.node().get();
    if (!root->requires_grad) return;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->is_leaf()) {
            if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
        } else {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    Tensor leaf = Tensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
    backward(f(leaf));
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        std::vector<double> plus(x.values().begin(), x.values().end());
        std::vector<double> minus = plus;
        plus[i] += eps;
        minus[i] -= eps;
        const double fp = f(Tensor::from(x.shape(), std::move(plus))).item();
        const double fm = f(Tensor::from(x.shape(), std::move(minus))).item();
        const double numeric = (fp - fm) / (2.0 * eps);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

double finite_diff_check_leaf(const std::function<Tensor()>& loss, Tensor leaf, double eps, std::size_t max_coords) {
    leaf.zero_grad();
    backward(loss());
    const std::size_t n = leaf.numel();
    std::vector<double> analytic(n, 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    leaf.zero_grad();

    const std::size_t probes = (max_coords == 0 || max_coords >= n) ? n : max_coords;
    const std::size_t stride = std::max<std::size_t>(1, n / probes);
    double worst = 0.0;
    NoGradGuard no_grad;
    auto values = leaf.mutable_values();
    for (std::size_t c = 0, i = 0; c < probes && i < n; ++c, i += stride) {
        const double saved = values[i];
        values[i] = saved + eps;
        const double fp = loss().item();
        values[i] = saved - eps;
        const double fm = loss().item();
        values[i] = saved;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

}  // namespace mtd
