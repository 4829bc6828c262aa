#include "distillforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace distillforge {

namespace {

Precision g_precision = Precision::F32;

}  // namespace

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

PrecisionGuard::PrecisionGuard(Precision p) : saved_(g_precision) { g_precision = p; }
PrecisionGuard::~PrecisionGuard() { g_precision = saved_; }

namespace detail {

struct Slot {
    Shape shape;
    std::shared_ptr<const std::vector<double>> data;
    bool bound = false;
    std::size_t node = 0;
};

using Backward = std::function<std::vector<Tensor>(const std::vector<Tensor>& inputs,
                                                   const Tensor& grad_out,
                                                   const std::vector<bool>& needs)>;

struct Record {
    const char* op = "leaf";
    std::vector<Slot> inputs;
    Backward backward;
};

struct GraphState {
    std::vector<Record> records;
    bool consumed = false;
};

}  // namespace detail

using detail::GraphState;

// ---- Tensor ----------------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    if (numel(shape_) != values.size())
        throw ShapeError("tensor: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape_));
    if (g_precision == Precision::F32)
        for (double& v : values) v = static_cast<float>(v);
    data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::span<const double> Tensor::values() const {
    if (!data_) return {};
    return {data_->data(), data_->size()};
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not scalar");
    return (*data_)[0];
}

Tensor Tensor::detach() const { return from_storage(shape_, data_); }

Tensor Tensor::from_storage(Shape shape, std::shared_ptr<const std::vector<double>> data,
                            std::shared_ptr<GraphState> graph, std::size_t node) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    t.graph_ = std::move(graph);
    t.node_ = node;
    return t;
}

// ---- Graph -----------------------------------------------------------------------------

Graph::Graph() : state_(std::make_shared<GraphState>()) {}

Tensor Graph::leaf(const Tensor& value) {
    if (state_->consumed) throw GraphError("graph already consumed");
    state_->records.push_back(detail::Record{});
    return Tensor::from_storage(value.shape(), value.storage(), state_, state_->records.size() - 1);
}

Tensor Graph::leaf(Shape shape, std::vector<double> values) {
    return leaf(Tensor(std::move(shape), std::move(values)));
}

std::size_t Graph::records() const { return state_->records.size(); }
bool Graph::consumed() const { return state_->consumed; }

namespace {

void finalize(const char* op, std::vector<double>& v) {
    const bool f32 = g_precision == Precision::F32;
    for (double& x : v) {
        if (f32) x = static_cast<double>(static_cast<float>(x));
        if (!std::isfinite(x))
            throw NumericError(op, std::string("non-finite result in ") + op);
    }
}

Tensor make_list(const char* op, Shape shape, std::vector<double> values,
                 const std::vector<Tensor>& inputs, detail::Backward backward) {
    finalize(op, values);
    auto data = std::make_shared<const std::vector<double>>(std::move(values));
    std::shared_ptr<GraphState> graph;
    for (const Tensor& in : inputs) {
        const auto& g = in.graph_state();
        if (!g) continue;
        if (graph && graph != g) throw GraphError(std::string(op) + ": inputs belong to different graphs");
        graph = g;
    }
    if (!graph) return Tensor::from_storage(std::move(shape), std::move(data));
    if (graph->consumed) throw GraphError("graph already consumed");
    detail::Record rec;
    rec.op = op;
    for (const Tensor& in : inputs)
        rec.inputs.push_back({in.shape(), in.storage(), in.requires_grad(), in.node()});
    rec.backward = std::move(backward);
    graph->records.push_back(std::move(rec));
    return Tensor::from_storage(std::move(shape), std::move(data), graph, graph->records.size() - 1);
}

/// Builds the output tensor and records it when any input is bound to a graph.
Tensor make(const char* op, Shape shape, std::vector<double> values,
            std::initializer_list<const Tensor*> inputs, detail::Backward backward) {
    std::vector<Tensor> in;
    in.reserve(inputs.size());
    for (const Tensor* t : inputs) in.push_back(*t);
    return make_list(op, std::move(shape), std::move(values), in, std::move(backward));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
    if (a.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
}

}  // namespace

// ---- grad ------------------------------------------------------------------------------

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph) {
    if (output.size() != 1)
        throw GraphError("grad: output must be scalar, got shape " + shape_str(output.shape()));
    const auto& state = output.graph_state();
    if (!state) throw GraphError("grad: output is not part of a graph");
    if (state->consumed) throw GraphError("graph already consumed");
    for (const Tensor& w : wrt) {
        if (w.graph_state() != state || w.node() > output.node())
            throw GraphError("grad: input unreachable from output");
    }

    const std::size_t n = output.node() + 1;
    std::vector<char> needed(n, 0);
    for (const Tensor& w : wrt) needed[w.node()] = 1;
    for (std::size_t i = 0; i < n; ++i) {
        if (needed[i]) continue;
        for (const auto& s : state->records[i].inputs) {
            if (s.bound && needed[s.node]) {
                needed[i] = 1;
                break;
            }
        }
    }

    std::vector<Tensor> grads(n);
    grads[output.node()] = Tensor::full(output.shape(), 1.0);
    for (std::size_t idx = n; idx-- > 0;) {
        if (!grads[idx].defined() || !needed[idx]) continue;
        // Copy what we need: recording may reallocate the record list.
        const auto backward = state->records[idx].backward;
        if (!backward) continue;
        const std::vector<detail::Slot> slots = state->records[idx].inputs;
        std::vector<bool> needs(slots.size());
        bool any = false;
        std::vector<Tensor> inputs;
        inputs.reserve(slots.size());
        for (std::size_t k = 0; k < slots.size(); ++k) {
            needs[k] = slots[k].bound && needed[slots[k].node];
            any = any || needs[k];
            if (create_graph && slots[k].bound)
                inputs.push_back(Tensor::from_storage(slots[k].shape, slots[k].data, state, slots[k].node));
            else
                inputs.push_back(Tensor::from_storage(slots[k].shape, slots[k].data));
        }
        if (!any) continue;
        const Tensor g = create_graph ? grads[idx] : grads[idx].detach();
        std::vector<Tensor> in_grads = backward(inputs, g, needs);
        for (std::size_t k = 0; k < slots.size(); ++k) {
            if (!needs[k]) continue;
            Tensor& acc = grads[slots[k].node];
            acc = acc.defined() ? add(acc, in_grads[k]) : in_grads[k];
        }
    }

    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const Tensor& w : wrt) {
        const Tensor& g = w.node() == output.node() ? Tensor::full(w.shape(), 1.0) : grads[w.node()];
        if (!g.defined()) throw GraphError("grad: input unreachable from output");
        result.push_back(create_graph ? g : g.detach());
    }
    if (!create_graph) {
        state->consumed = true;
        state->records.clear();
        state->records.shrink_to_fit();
    }
    return result;
}

// ---- elementwise -----------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> v(a.size());
    const auto x = a.values(), y = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] + y[i];
    return make("add", a.shape(), std::move(v), {&a, &b},
                [](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{g, g};
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> v(a.size());
    const auto x = a.values(), y = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] - y[i];
    return make("sub", a.shape(), std::move(v), {&a, &b},
                [](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>& needs) {
                    return std::vector<Tensor>{g, needs[1] ? neg(g) : Tensor()};
                });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> v(a.size());
    const auto x = a.values(), y = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] * y[i];
    return make("mul", a.shape(), std::move(v), {&a, &b},
                [](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>& needs) {
                    return std::vector<Tensor>{needs[0] ? mul(g, in[1]) : Tensor(),
                                               needs[1] ? mul(g, in[0]) : Tensor()};
                });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
    std::vector<double> v(a.values().begin(), a.values().end());
    for (double& x : v) x *= c;
    return make("scale", a.shape(), std::move(v), {&a},
                [c](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{scale(g, c)};
                });
}

Tensor shift(const Tensor& a, double c) {
    std::vector<double> v(a.values().begin(), a.values().end());
    for (double& x : v) x += c;
    return make("shift", a.shape(), std::move(v), {&a},
                [](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{g};
                });
}

Tensor exp(const Tensor& a) {
    std::vector<double> v(a.values().begin(), a.values().end());
    for (double& x : v) x = std::exp(x);
    return make("exp", a.shape(), std::move(v), {&a},
                [](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{mul(g, exp(in[0]))};
                });
}

Tensor pow(const Tensor& a, double p) {
    std::vector<double> v(a.values().begin(), a.values().end());
    for (double& x : v) x = std::pow(x, p);
    return make("pow", a.shape(), std::move(v), {&a},
                [p](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{mul(g, scale(pow(in[0], p - 1.0), p))};
                });
}

Tensor relu(const Tensor& a) {
    std::vector<double> v(a.values().begin(), a.values().end());
    for (double& x : v) x = x > 0.0 ? x : 0.0;
    return make("relu", a.shape(), std::move(v), {&a},
                [](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>&) {
                    std::vector<double> mask(in[0].size());
                    const auto x = in[0].values();
                    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
                    return std::vector<Tensor>{mul(g, Tensor(in[0].shape(), std::move(mask)))};
                });
}

// ---- shape & reductions ----------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<double> v(a.values().begin(), a.values().end());
    Shape from = a.shape();
    return make("reshape", std::move(shape), std::move(v), {&a},
                [from](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{reshape(g, from)};
                });
}

namespace {

std::vector<std::size_t> strides_of(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

void check_broadcastable(const char* op, const Shape& small, const Shape& big) {
    bool ok = small.size() == big.size();
    for (std::size_t i = 0; ok && i < small.size(); ++i) ok = small[i] == 1 || small[i] == big[i];
    if (!ok) throw ShapeError(std::string(op) + ": " + shape_str(small) + " incompatible with " + shape_str(big));
}

/// For each element of `big`, the flat index of the matching element of `small`.
/// Calls fn(i, j) for each flat index i of `big` and the matching flat index j of `small`.
template <typename Fn>
void for_each_broadcast(const Shape& small, const Shape& big, Fn&& fn) {
    const std::size_t n = numel(big);
    if (small == big) {
        for (std::size_t i = 0; i < n; ++i) fn(i, i);
        return;
    }
    const auto sst = strides_of(small);
    const std::size_t r = big.size();
    const std::size_t inner = big.empty() ? 1 : big.back();
    const std::size_t inner_step = big.empty() || small.back() == 1 ? 0 : sst.back();
    std::vector<std::size_t> step(r), count(r, 0);
    for (std::size_t d = 0; d < r; ++d) step[d] = small[d] == 1 ? 0 : sst[d];
    std::size_t s = 0;
    for (std::size_t i = 0; i < n; i += inner) {
        for (std::size_t k = 0; k < inner; ++k) fn(i + k, s + k * inner_step);
        for (std::size_t d = r - 1; d-- > 0;) {
            s += step[d];
            if (++count[d] < big[d]) break;
            s -= step[d] * big[d];
            count[d] = 0;
        }
    }
}

}  // namespace

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    check_broadcastable("broadcast_to", a.shape(), shape);
    std::vector<double> v(numel(shape));
    const auto x = a.values();
    for_each_broadcast(a.shape(), shape, [&](std::size_t i, std::size_t j) { v[i] = x[j]; });
    Shape from = a.shape();
    return make("broadcast_to", shape, std::move(v), {&a},
                [from](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{sum_to(g, from)};
                });
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
    check_broadcastable("sum_to", shape, a.shape());
    std::vector<double> v(numel(shape), 0.0);
    const auto x = a.values();
    for_each_broadcast(shape, a.shape(), [&](std::size_t i, std::size_t j) { v[j] += x[i]; });
    Shape from = a.shape();
    return make("sum_to", shape, std::move(v), {&a},
                [from](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{broadcast_to(g, from)};
                });
}

Tensor sum(const Tensor& a) { return reshape(sum_to(reshape(a, {a.size()}), {1}), {}); }

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// ---- linear algebra --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> v(m * n, 0.0);
    const auto x = a.values(), y = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double s = x[i * k + p];
            const double* row = &y[p * n];
            double* out = &v[i * n];
            for (std::size_t j = 0; j < n; ++j) out[j] += s * row[j];
        }
    return make("matmul", {m, n}, std::move(v), {&a, &b},
                [](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>& needs) {
                    return std::vector<Tensor>{needs[0] ? matmul(g, transpose(in[1])) : Tensor(),
                                               needs[1] ? matmul(transpose(in[0]), g) : Tensor()};
                });
}

Tensor transpose(const Tensor& a) {
    require_rank("transpose", a, 2);
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> v(r * c);
    const auto x = a.values();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) v[j * r + i] = x[i * c + j];
    return make("transpose", {c, r}, std::move(v), {&a},
                [](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{transpose(g)};
                });
}

// ---- convolution -----------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t padding) {
    require_rank("conv2d", x, 4);
    require_rank("conv2d", w, 4);
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    const std::size_t o = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != c)
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
    if (kh != kw || padding >= kh)
        throw ShapeError("conv2d: square kernel with padding < kernel size required");
    if (h + 2 * padding < kh || wd + 2 * padding < kw)
        throw ShapeError("conv2d: input " + shape_str(x.shape()) + " smaller than kernel");
    const std::size_t ho = h + 2 * padding - kh + 1, wo = wd + 2 * padding - kw + 1;
    std::vector<double> v(n * o * ho * wo, 0.0);
    const auto xs = x.values(), ws = w.values();
    const long p = static_cast<long>(padding);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc) {
            double* out = &v[(b * o + oc) * ho * wo];
            for (std::size_t ic = 0; ic < c; ++ic) {
                const double* in = &xs[(b * c + ic) * h * wd];
                const double* ker = &ws[(oc * c + ic) * kh * kw];
                for (std::size_t i = 0; i < kh; ++i) {
                    // rows y with 0 <= y + i - p < h
                    const long y0 = std::max(0L, p - static_cast<long>(i));
                    const long y1 = std::min(static_cast<long>(ho), static_cast<long>(h) + p - static_cast<long>(i));
                    for (std::size_t j = 0; j < kw; ++j) {
                        const double k = ker[i * kw + j];
                        const long x0 = std::max(0L, p - static_cast<long>(j));
                        const long x1 = std::min(static_cast<long>(wo), static_cast<long>(wd) + p - static_cast<long>(j));
                        for (long y = y0; y < y1; ++y) {
                            const double* src = in + (y + static_cast<long>(i) - p) * static_cast<long>(wd) +
                                                static_cast<long>(j) - p;
                            double* dst = out + y * static_cast<long>(wo);
                            for (long xx = x0; xx < x1; ++xx) dst[xx] += k * src[xx];
                        }
                    }
                }
            }
        }
    return make("conv2d", {n, o, ho, wo}, std::move(v), {&x, &w},
                [padding, kh, kw](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>& needs) {
                    return std::vector<Tensor>{
                        needs[0] ? conv2d(g, flip_transpose_kernel(in[1]), kh - 1 - padding) : Tensor(),
                        needs[1] ? conv2d_weight_grad(in[0], g, kh, kw, padding) : Tensor()};
                });
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, std::size_t kh, std::size_t kw,
                          std::size_t padding) {
    require_rank("conv2d_weight_grad", x, 4);
    require_rank("conv2d_weight_grad", g, 4);
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    const std::size_t o = g.shape()[1], ho = g.shape()[2], wo = g.shape()[3];
    if (g.shape()[0] != n || ho != h + 2 * padding - kh + 1 || wo != wd + 2 * padding - kw + 1)
        throw ShapeError("conv2d_weight_grad: " + shape_str(x.shape()) + " vs " + shape_str(g.shape()));
    std::vector<double> v(o * c * kh * kw, 0.0);
    const auto xs = x.values(), gs = g.values();
    const long p = static_cast<long>(padding);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc) {
            const double* gout = &gs[(b * o + oc) * ho * wo];
            for (std::size_t ic = 0; ic < c; ++ic) {
                const double* in = &xs[(b * c + ic) * h * wd];
                double* acc = &v[(oc * c + ic) * kh * kw];
                for (std::size_t i = 0; i < kh; ++i) {
                    const long y0 = std::max(0L, p - static_cast<long>(i));
                    const long y1 = std::min(static_cast<long>(ho), static_cast<long>(h) + p - static_cast<long>(i));
                    for (std::size_t j = 0; j < kw; ++j) {
                        const long x0 = std::max(0L, p - static_cast<long>(j));
                        const long x1 = std::min(static_cast<long>(wo), static_cast<long>(wd) + p - static_cast<long>(j));
                        double s = 0.0;
                        for (long y = y0; y < y1; ++y) {
                            const double* src = in + (y + static_cast<long>(i) - p) * static_cast<long>(wd) +
                                                static_cast<long>(j) - p;
                            const double* gr = gout + y * static_cast<long>(wo);
                            for (long xx = x0; xx < x1; ++xx) s += gr[xx] * src[xx];
                        }
                        acc[i * kw + j] += s;
                    }
                }
            }
        }
    return make("conv2d_weight_grad", {o, c, kh, kw}, std::move(v), {&x, &g},
                [padding, kh](const std::vector<Tensor>& in, const Tensor& gw, const std::vector<bool>& needs) {
                    return std::vector<Tensor>{
                        needs[0] ? conv2d(in[1], flip_transpose_kernel(gw), kh - 1 - padding) : Tensor(),
                        needs[1] ? conv2d(in[0], gw, padding) : Tensor()};
                });
}

Tensor flip_transpose_kernel(const Tensor& w) {
    require_rank("flip_transpose_kernel", w, 4);
    const std::size_t o = w.shape()[0], c = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    std::vector<double> v(w.size());
    const auto ws = w.values();
    for (std::size_t a = 0; a < o; ++a)
        for (std::size_t b = 0; b < c; ++b)
            for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j)
                    v[((b * o + a) * kh + (kh - 1 - i)) * kw + (kw - 1 - j)] = ws[((a * c + b) * kh + i) * kw + j];
    return make("flip_transpose_kernel", {c, o, kh, kw}, std::move(v), {&w},
                [](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{flip_transpose_kernel(g)};
                });
}

// ---- pooling ---------------------------------------------------------------------------

Tensor avg_pool2(const Tensor& x) {
    require_rank("avg_pool2", x, 4);
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    const std::size_t ho = h / 2, wo = w / 2;
    if (ho == 0 || wo == 0) throw ShapeError("avg_pool2: input too small " + shape_str(x.shape()));
    std::vector<double> v(n * c * ho * wo);
    const auto xs = x.values();
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* in = &xs[p * h * w];
        double* out = &v[p * ho * wo];
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx) {
                const double* r0 = in + 2 * y * w + 2 * xx;
                const double* r1 = r0 + w;
                out[y * wo + xx] = 0.25 * (r0[0] + r0[1] + r1[0] + r1[1]);
            }
    }
    return make("avg_pool2", {n, c, ho, wo}, std::move(v), {&x},
                [h, w](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{avg_unpool2(g, h, w)};
                });
}

Tensor avg_unpool2(const Tensor& g, std::size_t h, std::size_t w) {
    require_rank("avg_unpool2", g, 4);
    const std::size_t n = g.shape()[0], c = g.shape()[1], ho = g.shape()[2], wo = g.shape()[3];
    if (ho != h / 2 || wo != w / 2)
        throw ShapeError("avg_unpool2: " + shape_str(g.shape()) + " does not pool from " +
                         std::to_string(h) + "x" + std::to_string(w));
    std::vector<double> v(n * c * h * w, 0.0);
    const auto gs = g.values();
    for (std::size_t p = 0; p < n * c; ++p) {
        const double* in = &gs[p * ho * wo];
        double* out = &v[p * h * w];
        for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xx = 0; xx < wo; ++xx) {
                const double q = 0.25 * in[y * wo + xx];
                double* r0 = out + 2 * y * w + 2 * xx;
                double* r1 = r0 + w;
                r0[0] = q;
                r0[1] = q;
                r1[0] = q;
                r1[1] = q;
            }
    }
    return make("avg_unpool2", {n, c, h, w}, std::move(v), {&g},
                [](const std::vector<Tensor>&, const Tensor& gg, const std::vector<bool>&) {
                    return std::vector<Tensor>{avg_pool2(gg)};
                });
}

// ---- classification losses -------------------------------------------------------------

Tensor log_softmax(const Tensor& logits) {
    require_rank("log_softmax", logits, 2);
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    std::vector<double> v(n * k);
    const auto x = logits.values();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = &x[i * k];
        const double m = *std::max_element(row, row + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
        const double lse = m + std::log(s);
        for (std::size_t j = 0; j < k; ++j) v[i * k + j] = row[j] - lse;
    }
    return make("log_softmax", {n, k}, std::move(v), {&logits},
                [n, k](const std::vector<Tensor>& in, const Tensor& g, const std::vector<bool>&) {
                    const Tensor probs = exp(log_softmax(in[0]));
                    const Tensor row_sum = broadcast_to(sum_to(g, {n, 1}), {n, k});
                    return std::vector<Tensor>{sub(g, mul(probs, row_sum))};
                });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank("softmax_cross_entropy", logits, 2);
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != n)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    std::vector<double> onehot(n * k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k)
            throw ShapeError("softmax_cross_entropy: label out of range");
        onehot[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    const Tensor picked = mul(log_softmax(logits), Tensor({n, k}, std::move(onehot)));
    return scale(sum(picked), -1.0 / static_cast<double>(n));
}

// ---- row selection ---------------------------------------------------------------------

Tensor concat0(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat0: no inputs");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    std::vector<double> v;
    for (const Tensor& t : parts) {
        if (t.rank() == 0 || Shape(t.shape().begin() + 1, t.shape().end()) != tail)
            throw ShapeError("concat0: incompatible part " + shape_str(t.shape()));
        offsets.push_back(rows);
        rows += t.shape()[0];
        v.insert(v.end(), t.values().begin(), t.values().end());
    }
    Shape shape = tail;
    shape.insert(shape.begin(), rows);
    std::vector<std::size_t> counts;
    for (const Tensor& t : parts) counts.push_back(t.shape()[0]);
    return make_list("concat0", shape, std::move(v), parts,
                     [offsets, counts](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>& needs) {
                         std::vector<Tensor> out(offsets.size());
                         for (std::size_t i = 0; i < offsets.size(); ++i)
                             if (needs[i]) out[i] = slice0(g, offsets[i], offsets[i] + counts[i]);
                         return out;
                     });
}

Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end) {
    if (a.rank() == 0 || begin > end || end > a.shape()[0])
        throw ShapeError("slice0: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(a.shape()));
    const std::size_t row = a.size() / a.shape()[0];
    std::vector<double> v(a.values().begin() + static_cast<long>(begin * row),
                          a.values().begin() + static_cast<long>(end * row));
    Shape shape = a.shape();
    shape[0] = end - begin;
    const Shape full = a.shape();
    return make("slice0", shape, std::move(v), {&a},
                [begin, end, full](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    std::vector<Tensor> parts;
                    Shape pre = full, post = full;
                    pre[0] = begin;
                    post[0] = full[0] - end;
                    if (begin > 0) parts.push_back(Tensor::zeros(pre));
                    parts.push_back(g);
                    if (end < full[0]) parts.push_back(Tensor::zeros(post));
                    return std::vector<Tensor>{parts.size() == 1 ? g : concat0(parts)};
                });
}

Tensor gather0(const Tensor& a, std::span<const std::size_t> index) {
    if (a.rank() == 0) throw ShapeError("gather0: scalar input");
    const std::size_t rows = a.shape()[0], row = a.size() / rows;
    std::vector<double> v;
    v.reserve(index.size() * row);
    for (std::size_t r : index) {
        if (r >= rows) throw ShapeError("gather0: index out of range");
        v.insert(v.end(), a.values().begin() + static_cast<long>(r * row),
                 a.values().begin() + static_cast<long>((r + 1) * row));
    }
    Shape shape = a.shape();
    shape[0] = index.size();
    auto idx = std::make_shared<const std::vector<std::size_t>>(index.begin(), index.end());
    return make("gather0", shape, std::move(v), {&a},
                [idx, rows](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{scatter_add0(g, *idx, rows)};
                });
}

Tensor scatter_add0(const Tensor& a, std::span<const std::size_t> index, std::size_t rows) {
    if (a.rank() == 0 || a.shape()[0] != index.size())
        throw ShapeError("scatter_add0: " + std::to_string(index.size()) + " indices for " + shape_str(a.shape()));
    const std::size_t row = a.size() / std::max<std::size_t>(index.size(), 1);
    Shape shape = a.shape();
    shape[0] = rows;
    std::vector<double> v(numel(shape), 0.0);
    const auto x = a.values();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= rows) throw ShapeError("scatter_add0: index out of range");
        for (std::size_t j = 0; j < row; ++j) v[index[i] * row + j] += x[i * row + j];
    }
    auto idx = std::make_shared<const std::vector<std::size_t>>(index.begin(), index.end());
    return make("scatter_add0", shape, std::move(v), {&a},
                [idx](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{gather0(g, *idx)};
                });
}

// ---- resampling ------------------------------------------------------------------------

Tensor resample(const Tensor& x, std::shared_ptr<const ResampleMap> map) {
    require_rank("resample", x, 4);
    const std::size_t n = x.shape()[0], c = x.shape()[1];
    if (n != map->batch || x.shape()[2] != map->in_h || x.shape()[3] != map->in_w)
        throw ShapeError("resample: map does not fit " + shape_str(x.shape()));
    const std::size_t in_px = map->in_h * map->in_w, out_px = map->out_h * map->out_w;
    std::vector<double> v(n * c * out_px, 0.0);
    const auto xs = x.values();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* in = &xs[(b * c + ch) * in_px];
            double* out = &v[(b * c + ch) * out_px];
            for (std::size_t p = 0; p < out_px; ++p) {
                double s = 0.0;
                for (const auto& tap : map->taps[b * out_px + p]) s += tap.weight * in[tap.source];
                out[p] = s;
            }
        }
    return make("resample", {n, c, map->out_h, map->out_w}, std::move(v), {&x},
                [map](const std::vector<Tensor>&, const Tensor& g, const std::vector<bool>&) {
                    return std::vector<Tensor>{resample_transpose(g, map)};
                });
}

Tensor resample_transpose(const Tensor& g, std::shared_ptr<const ResampleMap> map) {
    require_rank("resample_transpose", g, 4);
    const std::size_t n = g.shape()[0], c = g.shape()[1];
    if (n != map->batch || g.shape()[2] != map->out_h || g.shape()[3] != map->out_w)
        throw ShapeError("resample_transpose: map does not fit " + shape_str(g.shape()));
    const std::size_t in_px = map->in_h * map->in_w, out_px = map->out_h * map->out_w;
    std::vector<double> v(n * c * in_px, 0.0);
    const auto gs = g.values();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* in = &gs[(b * c + ch) * out_px];
            double* out = &v[(b * c + ch) * in_px];
            for (std::size_t p = 0; p < out_px; ++p)
                for (const auto& tap : map->taps[b * out_px + p]) out[tap.source] += tap.weight * in[p];
        }
    return make("resample_transpose", {n, c, map->in_h, map->in_w}, std::move(v), {&g},
                [map](const std::vector<Tensor>&, const Tensor& gg, const std::vector<bool>&) {
                    return std::vector<Tensor>{resample(gg, map)};
                });
}

// ---- normalization ---------------------------------------------------------------------

Tensor instance_norm(const Tensor& x, double eps) {
    require_rank("instance_norm", x, 4);
    const Shape& s = x.shape();
    const Shape stat{s[0], s[1], 1, 1};
    const double inv_count = 1.0 / static_cast<double>(s[2] * s[3]);
    const Tensor mu = scale(sum_to(x, stat), inv_count);
    const Tensor centered = sub(x, broadcast_to(mu, s));
    const Tensor var = scale(sum_to(mul(centered, centered), stat), inv_count);
    const Tensor inv_std = pow(shift(var, eps), -0.5);
    return mul(centered, broadcast_to(inv_std, s));
}

// ---- finite differences ----------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& xs, double eps) {
    PrecisionGuard guard(Precision::F64);
    Graph g;
    std::vector<Tensor> leaves;
    for (const Tensor& x : xs) leaves.push_back(g.leaf(x.detach()));
    const Tensor y = f(leaves);
    if (!std::isfinite(y.item())) throw NumericError("finite_diff_check", "objective is non-finite");
    std::vector<Tensor> analytic;
    if (y.requires_grad()) {
        analytic = grad(y, leaves);
    } else {
        for (const Tensor& x : xs) analytic.push_back(Tensor::zeros(x.shape()));
    }

    double worst = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        for (std::size_t i = 0; i < xs[t].size(); ++i) {
            auto eval = [&](double delta) {
                std::vector<Tensor> args;
                for (std::size_t u = 0; u < xs.size(); ++u) args.push_back(xs[u].detach());
                std::vector<double> v(xs[t].values().begin(), xs[t].values().end());
                v[i] += delta;
                args[t] = Tensor(xs[t].shape(), std::move(v));
                const double r = f(args).item();
                if (!std::isfinite(r))
                    throw NumericError("finite_diff_check", "objective non-finite at perturbed point");
                return r;
            };
            const double numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            const double a = analytic[t][i];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    return finite_diff_check([&f](const std::vector<Tensor>& xs) { return f(xs[0]); },
                             std::vector<Tensor>{x}, eps);
}

}  // namespace distillforge
