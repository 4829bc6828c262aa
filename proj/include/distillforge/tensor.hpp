#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace distillforge {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Element precision. Storage is always double; in F32 mode every constructed tensor and
/// every kernel output is rounded to the nearest float, so values are exactly those
/// representable in 32 bits.
enum class Precision { F32, F64 };

void set_precision(Precision p);
Precision precision();

/// Scoped precision override, restores the previous mode on exit.
class PrecisionGuard {
public:
    explicit PrecisionGuard(Precision p);
    ~PrecisionGuard();
    PrecisionGuard(const PrecisionGuard&) = delete;
    PrecisionGuard& operator=(const PrecisionGuard&) = delete;

private:
    Precision saved_;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised when an operation produces NaN or infinity; carries the op name.
struct NumericError : std::runtime_error {
    NumericError(std::string op, const std::string& what)
        : std::runtime_error(what), op(std::move(op)) {}
    std::string op;
};

struct GraphError : std::logic_error {
    using std::logic_error::logic_error;
};

namespace detail {
struct GraphState;
}

/// Immutable dense array. Copies share storage. A tensor bound to a graph node
/// participates in differentiation; a tensor without one is a constant.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t rank() const { return shape_.size(); }
    bool defined() const { return static_cast<bool>(data_); }

    std::span<const double> values() const;
    double item() const;
    double operator[](std::size_t i) const { return (*data_)[i]; }

    bool requires_grad() const { return graph_ != nullptr; }
    /// Same values, no graph node.
    Tensor detach() const;

    std::size_t node() const { return node_; }
    const std::shared_ptr<detail::GraphState>& graph_state() const { return graph_; }
    const std::shared_ptr<const std::vector<double>>& storage() const { return data_; }

    static Tensor from_storage(Shape shape, std::shared_ptr<const std::vector<double>> data,
                               std::shared_ptr<detail::GraphState> graph = nullptr,
                               std::size_t node = 0);

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    std::shared_ptr<detail::GraphState> graph_;
    std::size_t node_ = 0;
};

/// Per-objective computation graph: create leaves, build an expression, differentiate, drop.
class Graph {
public:
    Graph();

    /// A differentiable input.
    Tensor leaf(const Tensor& value);
    Tensor leaf(Shape shape, std::vector<double> values);

    /// Number of recorded operation records (leaves included).
    std::size_t records() const;
    bool consumed() const;

    const std::shared_ptr<detail::GraphState>& state() const { return state_; }

private:
    std::shared_ptr<detail::GraphState> state_;
};

/// Reverse-mode gradient of a scalar `output` with respect to each of `wrt`.
///
/// With `create_graph` the adjoint computation is itself recorded, so the returned
/// gradients can be differentiated again. Without it, the graph is consumed and its
/// saved values are released.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|, |numeric|).
/// Evaluated in 64-bit mode.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-6);

/// Reports the same relative error, but for several inputs at once.
double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& xs, double eps = 1e-6);

// ---- primitives -------------------------------------------------------------------------
// Every primitive records itself when any input is bound to a graph, and its adjoint is
// written in terms of primitives from this same set.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor shift(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor relu(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// Repeats size-1 axes of `a` to reach `shape`; ranks must match.
Tensor broadcast_to(const Tensor& a, const Shape& shape);
/// Sums `a` down to `shape` (same rank, each extent 1 or equal).
Tensor sum_to(const Tensor& a, const Shape& shape);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Stride-1 2-D convolution (cross-correlation), x:[N,C,H,W], w:[O,C,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t padding);
/// Weight adjoint of conv2d: d<g, conv2d(x, w)>/dw.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t kh, std::size_t kw,
                          std::size_t padding);
/// [O,C,kh,kw] -> [C,O,kh,kw] with both spatial axes reversed.
Tensor flip_transpose_kernel(const Tensor& w);

/// 2x2 average pool, floor on odd extents.
Tensor avg_pool2(const Tensor& x);
/// Exact adjoint of avg_pool2 back to spatial extent h x w.
Tensor avg_unpool2(const Tensor& g, std::size_t h, std::size_t w);

/// Row-wise log-softmax of a [N,K] matrix.
Tensor log_softmax(const Tensor& logits);
/// Mean softmax cross-entropy of [N,K] logits against integer labels.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

Tensor concat0(const std::vector<Tensor>& parts);
Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end);
Tensor gather0(const Tensor& a, std::span<const std::size_t> index);
Tensor scatter_add0(const Tensor& a, std::span<const std::size_t> index, std::size_t rows);

/// Fixed sparse resampling operator over [N,C,H,W] images. Output pixel p of image n
/// is sum_k weight * input[n, c, source], identical for every channel.
struct ResampleMap {
    struct Tap {
        std::uint32_t source;
        double weight;
    };
    std::size_t batch = 0;
    std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
    /// taps[(n * out_h * out_w + p)] lists the contributing input pixels.
    std::vector<std::vector<Tap>> taps;
};

Tensor resample(const Tensor& x, std::shared_ptr<const ResampleMap> map);
Tensor resample_transpose(const Tensor& g, std::shared_ptr<const ResampleMap> map);

/// Instance normalization over the spatial axes of [N,C,H,W], no affine parameters.
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

}  // namespace distillforge
