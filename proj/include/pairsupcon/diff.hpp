#pragma once

// Minimal reverse-mode differentiation over dense double matrices.
//
// A Graph owns an append-only list of nodes; node ids are creation indices, so parents always
// precede children and reverse id order is a valid topological order for backward().
// Each primitive computes its forward value eagerly and registers a backward closure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pairsupcon/error.hpp"
#include "pairsupcon/matrix.hpp"

namespace pairsupcon::diff {

enum class Primitive {
    leaf,
    constant,
    matmul,
    add,
    sub,
    mul,
    scale,
    exp,
    log,
    abs,
    sum,
    mean,
    concat_cols,
    transpose,
    normalize_rows,
    stop_gradient,
    relu,
    gram,
    logsumexp_rows,
    pick,
    gather_rows,
    pool_rows,
    custom,
};

inline const char* primitive_name(Primitive p) {
    switch (p) {
        case Primitive::leaf: return "leaf";
        case Primitive::constant: return "constant";
        case Primitive::matmul: return "matmul";
        case Primitive::add: return "add";
        case Primitive::sub: return "sub";
        case Primitive::mul: return "mul";
        case Primitive::scale: return "scale";
        case Primitive::exp: return "exp";
        case Primitive::log: return "log";
        case Primitive::abs: return "abs";
        case Primitive::sum: return "sum";
        case Primitive::mean: return "mean";
        case Primitive::concat_cols: return "concat_cols";
        case Primitive::transpose: return "transpose";
        case Primitive::normalize_rows: return "normalize_rows";
        case Primitive::stop_gradient: return "stop_gradient";
        case Primitive::relu: return "relu";
        case Primitive::gram: return "gram";
        case Primitive::logsumexp_rows: return "logsumexp_rows";
        case Primitive::pick: return "pick";
        case Primitive::gather_rows: return "gather_rows";
        case Primitive::pool_rows: return "pool_rows";
        case Primitive::custom: return "custom";
    }
    return "?";
}

using NodeId = std::size_t;

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* g, NodeId id) : graph_(g), id_(id) {}

    Graph& graph() const { return *graph_; }
    NodeId id() const noexcept { return id_; }
    bool valid() const noexcept { return graph_ != nullptr; }

    const Matrix& value() const;
    const Matrix& grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double scalar() const;

private:
    Graph* graph_ = nullptr;
    NodeId id_ = 0;
};

struct BackwardContext {
    const Matrix& value;
    const Matrix& grad;
    std::span<const Matrix* const> inputs;
    // null where the input does not require a gradient
    std::span<Matrix* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Matrix value, bool requires_grad = true) {
        return push(Primitive::leaf, std::move(value), {}, requires_grad, nullptr);
    }

    Var constant(Matrix value) { return push(Primitive::constant, std::move(value), {}, false, nullptr); }

    // Registers a node computed outside the built-in primitives.
    Var custom(std::span<const Var> inputs, Matrix value, BackwardFn backward) {
        std::vector<NodeId> parents;
        for (const Var& v : inputs) parents.push_back(own(v));
        return push(Primitive::custom, std::move(value), std::move(parents), true, std::move(backward));
    }

    Var push(Primitive kind, Matrix value, std::vector<NodeId> parents, bool requires_grad, BackwardFn backward) {
        if (kind != Primitive::leaf && kind != Primitive::stop_gradient) {
            bool any = false;
            for (NodeId p : parents) any = any || nodes_[p].requires_grad;
            requires_grad = requires_grad && any;
        }
        nodes_.push_back(Node{kind, std::move(value), Matrix{}, std::move(parents), requires_grad, std::move(backward)});
        return {this, nodes_.size() - 1};
    }

    NodeId own(const Var& v) const {
        pairsupcon::detail::require(v.valid() && &v.graph() == this && v.id() < nodes_.size(), "Var does not belong to this graph");
        return v.id();
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    const Matrix& value(NodeId id) const { return nodes_.at(id).value; }
    const Matrix& grad(NodeId id) const { return nodes_.at(id).grad; }
    Primitive kind(NodeId id) const { return nodes_.at(id).kind; }
    std::span<const NodeId> parents(NodeId id) const { return nodes_.at(id).parents; }
    bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

    // Reverse accumulation from a 1x1 loss. Every node's gradient is reset to zeros first,
    // so nodes the loss does not depend on (or that sit behind stop_gradient) end up zero.
    void backward(const Var& loss) {
        const NodeId root = own(loss);
        const Matrix& lv = nodes_[root].value;
        pairsupcon::detail::require(lv.rows() == 1 && lv.cols() == 1, "backward: loss must be scalar, got " + lv.shape_string());
        for (Node& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
        nodes_[root].grad[0] = 1.0;

        std::vector<const Matrix*> in_values;
        std::vector<Matrix*> in_grads;
        for (NodeId id = root + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.requires_grad || !n.backward) continue;
            in_values.clear();
            in_grads.clear();
            for (NodeId p : n.parents) {
                in_values.push_back(&nodes_[p].value);
                in_grads.push_back(nodes_[p].requires_grad ? &nodes_[p].grad : nullptr);
            }
            n.backward(BackwardContext{n.value, n.grad, in_values, in_grads});
        }
    }

private:
    struct Node {
        Primitive kind;
        Matrix value;
        Matrix grad;
        std::vector<NodeId> parents;
        bool requires_grad;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return graph_->value(id_); }
inline const Matrix& Var::grad() const { return graph_->grad(id_); }
inline double Var::scalar() const {
    const Matrix& v = value();
    pairsupcon::detail::require(v.size() == 1, "Var::scalar on non-scalar " + v.shape_string());
    return v[0];
}

namespace impl {

inline std::string shapes(const char* op, const Matrix& a, const Matrix& b) {
    return std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string();
}

inline Graph& same_graph(const Var& a, const Var& b) {
    pairsupcon::detail::require(a.valid() && b.valid() && &a.graph() == &b.graph(), "operands belong to different graphs");
    return a.graph();
}

enum class Broadcast { none, row, col, scalar };

inline Broadcast broadcast_kind(const char* op, const Matrix& a, const Matrix& b) {
    if (a.same_shape(b)) return Broadcast::none;
    if (b.rows() == 1 && b.cols() == 1) return Broadcast::scalar;
    if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::row;
    if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::col;
    pairsupcon::detail::fail(shapes(op, a, b));
}

inline std::size_t bindex(Broadcast k, std::size_t r, std::size_t c, std::size_t bcols) {
    switch (k) {
        case Broadcast::none: return r * bcols + c;
        case Broadcast::row: return c;
        case Broadcast::col: return r;
        case Broadcast::scalar: return 0;
    }
    return 0;
}

template <typename F>
Matrix map(const Matrix& x, F f) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return out;
}

// Elementwise binary op with right-operand broadcasting (row, column or scalar).
// da/db give the local partials at (a, b).
template <typename F, typename DA, typename DB>
Var binary(Primitive kind, const char* op, const Var& a, const Var& b, F f, DA da, DB db) {
    Graph& g = same_graph(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    const Broadcast bk = broadcast_kind(op, av, bv);
    Matrix out(av.rows(), av.cols());
    for (std::size_t r = 0; r < av.rows(); ++r)
        for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = f(av(r, c), bv[bindex(bk, r, c, bv.cols())]);
    return g.push(kind, std::move(out), {a.id(), b.id()}, true, [bk, da, db](const BackwardContext& ctx) {
        const Matrix& x = *ctx.inputs[0];
        const Matrix& y = *ctx.inputs[1];
        for (std::size_t r = 0; r < x.rows(); ++r) {
            for (std::size_t c = 0; c < x.cols(); ++c) {
                const std::size_t bi = bindex(bk, r, c, y.cols());
                const double gr = ctx.grad(r, c);
                if (ctx.input_grads[0]) (*ctx.input_grads[0])(r, c) += gr * da(x(r, c), y[bi]);
                if (ctx.input_grads[1]) (*ctx.input_grads[1])[bi] += gr * db(x(r, c), y[bi]);
            }
        }
    });
}

template <typename DF>
Var unary(Primitive kind, const Var& x, Matrix out, DF df) {
    Graph& g = x.graph();
    return g.push(kind, std::move(out), {x.id()}, true, [df](const BackwardContext& ctx) {
        Matrix& gx = *ctx.input_grads[0];
        const Matrix& xv = *ctx.inputs[0];
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += ctx.grad[i] * df(xv[i], ctx.value[i]);
    });
}

} // namespace impl

inline Var matmul(const Var& a, const Var& b) {
    Graph& g = impl::same_graph(a, b);
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    pairsupcon::detail::require(av.cols() == bv.rows(), impl::shapes("matmul", av, bv));
    return g.push(Primitive::matmul, kernels::matmul(av, bv), {a.id(), b.id()}, true, [](const BackwardContext& ctx) {
        if (ctx.input_grads[0]) *ctx.input_grads[0] += kernels::matmul_nt(ctx.grad, *ctx.inputs[1]);
        if (ctx.input_grads[1]) *ctx.input_grads[1] += kernels::matmul_tn(*ctx.inputs[0], ctx.grad);
    });
}

inline Var add(const Var& a, const Var& b) {
    return impl::binary(
        Primitive::add, "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return impl::binary(
        Primitive::sub, "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

// elementwise product
inline Var mul(const Var& a, const Var& b) {
    return impl::binary(
        Primitive::mul, "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

inline Var scale(const Var& x, double factor) {
    return impl::unary(Primitive::scale, x, impl::map(x.value(), [factor](double v) { return factor * v; }),
                               [factor](double, double) { return factor; });
}

inline Var exp(const Var& x) {
    return impl::unary(Primitive::exp, x, impl::map(x.value(), [](double v) { return std::exp(v); }),
                               [](double, double y) { return y; });
}

inline Var log(const Var& x) {
    const Matrix& xv = x.value();
    for (std::size_t i = 0; i < xv.size(); ++i)
        pairsupcon::detail::require(xv[i] > 0.0, "log: non-positive entry " + std::to_string(xv[i]) + " at (" +
                                                     std::to_string(i / xv.cols()) + "," +
                                                     std::to_string(i % xv.cols()) + ")");
    return impl::unary(Primitive::log, x, impl::map(xv, [](double v) { return std::log(v); }),
                               [](double v, double) { return 1.0 / v; });
}

inline Var abs(const Var& x) {
    return impl::unary(Primitive::abs, x, impl::map(x.value(), [](double v) { return std::abs(v); }),
                               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var relu(const Var& x) {
    return impl::unary(Primitive::relu, x, impl::map(x.value(), [](double v) { return v > 0.0 ? v : 0.0; }),
                               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return x.graph().push(Primitive::sum, Matrix(1, 1, s), {x.id()}, true, [](const BackwardContext& ctx) {
        Matrix& gx = *ctx.input_grads[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad[0];
    });
}

inline Var mean(const Var& x) {
    const Matrix& xv = x.value();
    pairsupcon::detail::require(!xv.empty(), "mean: empty input");
    double s = 0.0;
    for (double v : xv.values()) s += v;
    const double n = static_cast<double>(xv.size());
    return x.graph().push(Primitive::mean, Matrix(1, 1, s / n), {x.id()}, true, [n](const BackwardContext& ctx) {
        Matrix& gx = *ctx.input_grads[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += ctx.grad[0] / n;
    });
}

inline Var concat_cols(std::span<const Var> parts) {
    pairsupcon::detail::require(!parts.empty(), "concat_cols: no inputs");
    Graph& g = parts.front().graph();
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    std::vector<NodeId> ids;
    for (const Var& p : parts) {
        pairsupcon::detail::require(p.rows() == rows,
                                    impl::shapes("concat_cols", parts.front().value(), p.value()));
        ids.push_back(g.own(p));
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const Matrix& pv = p.value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offset + c) = pv(r, c);
        offset += pv.cols();
    }
    return g.push(Primitive::concat_cols, std::move(out), std::move(ids), true, [](const BackwardContext& ctx) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < ctx.inputs.size(); ++k) {
            const std::size_t w = ctx.inputs[k]->cols();
            if (Matrix* gk = ctx.input_grads[k]) {
                for (std::size_t r = 0; r < gk->rows(); ++r)
                    for (std::size_t c = 0; c < w; ++c) (*gk)(r, c) += ctx.grad(r, off + c);
            }
            off += w;
        }
    });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
    return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

inline Var transpose(const Var& x) {
    return x.graph().push(Primitive::transpose, x.value().transposed(), {x.id()}, true,
                          [](const BackwardContext& ctx) { *ctx.input_grads[0] += ctx.grad.transposed(); });
}

// Each row divided by its Euclidean norm. A zero row is rejected by index.
inline Var normalize_rows(const Var& x) {
    const Matrix& xv = x.value();
    Matrix out(xv.rows(), xv.cols());
    std::vector<double> norms(xv.rows());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        double s = 0.0;
        for (double v : xv.row(r)) s += v * v;
        const double n = std::sqrt(s);
        pairsupcon::detail::require(n > 0.0, "normalize_rows: row " + std::to_string(r) + " has zero norm");
        norms[r] = n;
        for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r, c) / n;
    }
    return x.graph().push(Primitive::normalize_rows, std::move(out), {x.id()}, true,
                          [norms = std::move(norms)](const BackwardContext& ctx) {
                              Matrix& gx = *ctx.input_grads[0];
                              const Matrix& y = ctx.value;
                              for (std::size_t r = 0; r < y.rows(); ++r) {
                                  double dot = 0.0;
                                  for (std::size_t c = 0; c < y.cols(); ++c) dot += ctx.grad(r, c) * y(r, c);
                                  for (std::size_t c = 0; c < y.cols(); ++c)
                                      gx(r, c) += (ctx.grad(r, c) - y(r, c) * dot) / norms[r];
                              }
                          });
}

// Identity on the forward pass; gradient does not flow into x.
inline Var stop_gradient(const Var& x) {
    return x.graph().push(Primitive::stop_gradient, x.value(), {x.id()}, false, nullptr);
}

// x * x^T, exactly symmetric.
inline Var gram(const Var& x) {
    return x.graph().push(Primitive::gram, kernels::gram(x.value()), {x.id()}, true, [](const BackwardContext& ctx) {
        Matrix sym = ctx.grad;
        sym += ctx.grad.transposed();
        *ctx.input_grads[0] += kernels::matmul(sym, *ctx.inputs[0]);
    });
}

// Row-wise log-sum-exp (max-subtracted) -> n x 1. With a mask, only entries where mask != 0
// take part; masked entries get zero gradient. Every row must keep at least one entry.
inline Var logsumexp_rows(const Var& x, const std::optional<Matrix>& mask = std::nullopt) {
    const Matrix& xv = x.value();
    if (mask)
        pairsupcon::detail::require(mask->same_shape(xv), impl::shapes("logsumexp_rows mask", xv, *mask));
    auto keep = [&mask](std::size_t r, std::size_t c) { return !mask || (*mask)(r, c) != 0.0; };
    Matrix out(xv.rows(), 1);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        double hi = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < xv.cols(); ++c)
            if (keep(r, c)) {
                hi = std::max(hi, xv(r, c));
                any = true;
            }
        pairsupcon::detail::require(any, "logsumexp_rows: row " + std::to_string(r) + " is fully masked");
        double s = 0.0;
        for (std::size_t c = 0; c < xv.cols(); ++c)
            if (keep(r, c)) s += std::exp(xv(r, c) - hi);
        out(r, 0) = hi + std::log(s);
    }
    return x.graph().push(Primitive::logsumexp_rows, std::move(out), {x.id()}, true,
                          [mask](const BackwardContext& ctx) {
                              Matrix& gx = *ctx.input_grads[0];
                              const Matrix& xv = *ctx.inputs[0];
                              for (std::size_t r = 0; r < xv.rows(); ++r) {
                                  const double g = ctx.grad(r, 0);
                                  const double lse = ctx.value(r, 0);
                                  for (std::size_t c = 0; c < xv.cols(); ++c)
                                      if (!mask || (*mask)(r, c) != 0.0) gx(r, c) += g * std::exp(xv(r, c) - lse);
                              }
                          });
}

// out(r) = x(r, cols[r]) -> n x 1
inline Var pick(const Var& x, std::span<const std::size_t> cols) {
    const Matrix& xv = x.value();
    pairsupcon::detail::require(cols.size() == xv.rows(), "pick: need one column per row, got " +
                                                              std::to_string(cols.size()) + " for " + xv.shape_string());
    Matrix out(xv.rows(), 1);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        pairsupcon::detail::require(cols[r] < xv.cols(), "pick: column " + std::to_string(cols[r]) +
                                                             " out of range for " + xv.shape_string());
        out(r, 0) = xv(r, cols[r]);
    }
    std::vector<std::size_t> idx(cols.begin(), cols.end());
    return x.graph().push(Primitive::pick, std::move(out), {x.id()}, true,
                          [idx = std::move(idx)](const BackwardContext& ctx) {
                              Matrix& gx = *ctx.input_grads[0];
                              for (std::size_t r = 0; r < idx.size(); ++r) gx(r, idx[r]) += ctx.grad(r, 0);
                          });
}

// out row k = x row rows[k]
inline Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
    const Matrix& xv = x.value();
    Matrix out(rows.size(), xv.cols());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        pairsupcon::detail::require(rows[k] < xv.rows(), "gather_rows: row " + std::to_string(rows[k]) +
                                                             " out of range for " + xv.shape_string());
        std::copy(xv.row(rows[k]).begin(), xv.row(rows[k]).end(), out.row(k).begin());
    }
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return x.graph().push(Primitive::gather_rows, std::move(out), {x.id()}, true,
                          [idx = std::move(idx)](const BackwardContext& ctx) {
                              Matrix& gx = *ctx.input_grads[0];
                              for (std::size_t k = 0; k < idx.size(); ++k) {
                                  auto dst = gx.row(idx[k]);
                                  auto src = ctx.grad.row(k);
                                  for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
                              }
                          });
}

// One output row per group: sum of weight * table row. Groups are applied in the order given,
// so callers wanting order-independent results pass entries sorted by row id.
struct PoolEntry {
    std::size_t row;
    double weight;
};
using PoolGroup = std::vector<PoolEntry>;

inline Var pool_rows(const Var& table, std::vector<PoolGroup> groups) {
    const Matrix& tv = table.value();
    Matrix out(groups.size(), tv.cols());
    for (std::size_t k = 0; k < groups.size(); ++k) {
        auto dst = out.row(k);
        for (const PoolEntry& e : groups[k]) {
            pairsupcon::detail::require(e.row < tv.rows(), "pool_rows: row " + std::to_string(e.row) +
                                                               " out of range for " + tv.shape_string());
            auto src = tv.row(e.row);
            for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += e.weight * src[c];
        }
    }
    return table.graph().push(Primitive::pool_rows, std::move(out), {table.id()}, true,
                              [groups = std::move(groups)](const BackwardContext& ctx) {
                                  Matrix& gt = *ctx.input_grads[0];
                                  for (std::size_t k = 0; k < groups.size(); ++k) {
                                      auto src = ctx.grad.row(k);
                                      for (const PoolEntry& e : groups[k]) {
                                          auto dst = gt.row(e.row);
                                          for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += e.weight * src[c];
                                      }
                                  }
                              });
}

// Generic entry point for the primitives that take only matrix operands and scalar attributes.
// Index-carrying primitives (pick, gather_rows, pool_rows) have their own functions.
inline Var apply_primitive(Graph& g, Primitive kind, std::span<const Var> inputs, std::span<const double> attrs = {}) {
    auto arity = [&](std::size_t n) {
        pairsupcon::detail::require(inputs.size() == n, std::string(primitive_name(kind)) + ": expected " +
                                                            std::to_string(n) + " inputs, got " +
                                                            std::to_string(inputs.size()));
        for (const Var& v : inputs) g.own(v);
    };
    switch (kind) {
        case Primitive::matmul: arity(2); return matmul(inputs[0], inputs[1]);
        case Primitive::add: arity(2); return add(inputs[0], inputs[1]);
        case Primitive::sub: arity(2); return sub(inputs[0], inputs[1]);
        case Primitive::mul: arity(2); return mul(inputs[0], inputs[1]);
        case Primitive::scale:
            arity(1);
            pairsupcon::detail::require(attrs.size() == 1, "scale: expected one attribute");
            return scale(inputs[0], attrs[0]);
        case Primitive::exp: arity(1); return exp(inputs[0]);
        case Primitive::log: arity(1); return log(inputs[0]);
        case Primitive::abs: arity(1); return abs(inputs[0]);
        case Primitive::relu: arity(1); return relu(inputs[0]);
        case Primitive::sum: arity(1); return sum(inputs[0]);
        case Primitive::mean: arity(1); return mean(inputs[0]);
        case Primitive::transpose: arity(1); return transpose(inputs[0]);
        case Primitive::normalize_rows: arity(1); return normalize_rows(inputs[0]);
        case Primitive::stop_gradient: arity(1); return stop_gradient(inputs[0]);
        case Primitive::gram: arity(1); return gram(inputs[0]);
        case Primitive::logsumexp_rows: arity(1); return logsumexp_rows(inputs[0]);
        case Primitive::concat_cols:
            for (const Var& v : inputs) g.own(v);
            return concat_cols(inputs);
        default: break;
    }
    pairsupcon::detail::fail(std::string("apply_primitive: unsupported kind ") + primitive_name(kind));
}

// n x n cosine similarities between the rows of z.
inline Var cosine_similarity_matrix(const Var& z) { return gram(normalize_rows(z)); }

// Mean over rows of -log softmax(logits)[target].
inline Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
    const Matrix& lv = logits.value();
    pairsupcon::detail::require(lv.rows() >= 1, "softmax_cross_entropy: empty batch");
    pairsupcon::detail::require(targets.size() == lv.rows(), "softmax_cross_entropy: " + std::to_string(targets.size()) +
                                                                 " targets for " + lv.shape_string() + " logits");
    for (std::size_t t : targets)
        pairsupcon::detail::require(t < lv.cols(), "softmax_cross_entropy: target " + std::to_string(t) +
                                                       " out of range [0," + std::to_string(lv.cols()) + ")");
    return mean(sub(logsumexp_rows(logits), pick(logits, targets)));
}

// ---------------------------------------------------------------------------------------------
// Finite-difference verification

using ScalarBuilder = std::function<Var(Graph&, const Var&)>;

struct GradCheckReport {
    double max_abs_err = 0.0;
    // |analytic - numeric| / max(|analytic|, |numeric|, abs_floor); the floor keeps coordinates
    // whose true gradient is ~0 from amplifying finite-difference roundoff.
    double max_rel_err = 0.0;
    Matrix analytic;
    Matrix numeric;
};

inline double evaluate_scalar(const ScalarBuilder& fn, const Matrix& point, bool want_grad, Matrix* grad_out) {
    Graph g;
    Var x = g.leaf(point, want_grad);
    Var y = fn(g, x);
    const double v = y.scalar();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite forward value");
    if (want_grad) {
        g.backward(y);
        *grad_out = x.grad();
    }
    return v;
}

inline GradCheckReport grad_check(const ScalarBuilder& fn, const Matrix& point, double epsilon = 1e-5,
                                  double abs_floor = 1e-6) {
    pairsupcon::detail::require(epsilon > 0.0, "grad_check: epsilon must be positive");
    GradCheckReport rep;
    evaluate_scalar(fn, point, true, &rep.analytic);
    rep.numeric = Matrix(point.rows(), point.cols());
    Matrix probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        probe[i] = point[i] + epsilon;
        const double hi = evaluate_scalar(fn, probe, false, nullptr);
        probe[i] = point[i] - epsilon;
        const double lo = evaluate_scalar(fn, probe, false, nullptr);
        probe[i] = point[i];
        rep.numeric[i] = (hi - lo) / (2.0 * epsilon);
        const double a = rep.analytic[i];
        const double n = rep.numeric[i];
        const double err = std::abs(a - n);
        rep.max_abs_err = std::max(rep.max_abs_err, err);
        rep.max_rel_err = std::max(rep.max_rel_err, err / std::max({std::abs(a), std::abs(n), abs_floor}));
    }
    return rep;
}

} // namespace pairsupcon::diff
