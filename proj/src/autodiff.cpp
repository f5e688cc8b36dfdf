// Copyright 2026 The lipedit Authors
// SPDX-License-Identifier: Apache-2.0

#include "lipedit/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace lipedit::ad {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
        return grad;
    }
};

}  // namespace detail

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Stride = Eigen::OuterStride<>;
using SMapMat = Eigen::Map<RowMat, 0, Stride>;
using CSMapMat = Eigen::Map<const RowMat, 0, Stride>;

namespace {

thread_local bool g_grad_enabled = true;

Node& parent_node(Node& self, size_t i) { return *self.parents[i]; }

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
    if (!node_) throw Error("access to undefined Var");
    return node_->value;
}

bool Var::requires_grad() const { return node_ && node_->requires_grad; }

const Tensor& Var::grad() const {
    if (!node_) throw Error("access to undefined Var");
    return node_->grad_buffer();
}

bool Var::has_grad() const { return node_ && !node_->grad.empty(); }

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

void Var::assign(Tensor value) {
    if (!node_) throw Error("assign to undefined Var");
    if (value.shape() != node_->value.shape()) {
        throw Error("assign shape mismatch " + shape_str(node_->value.shape()) + " vs " + shape_str(value.shape()));
    }
    node_->value = std::move(value);
}

void Var::set_requires_grad(bool requires_grad) {
    if (!node_) throw Error("set_requires_grad on undefined Var");
    if (!node_->parents.empty()) throw Error("only leaf Vars can be frozen or unfrozen");
    node_->requires_grad = requires_grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (auto& in : inputs) node->parents.push_back(in.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Var(std::move(node));
}

void backward(const Var& output) {
    if (!output.defined()) throw Error("backward on undefined Var");
    if (output.value().size() != 1) {
        throw Error("backward requires a scalar output, got shape " + shape_str(output.shape()));
    }
    if (!output.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(output.node().get(), 0);
    seen.insert(output.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->grad_buffer();
    output.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw Error("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        }
        out[i] = std::max(da, db);
        if (da == 0 || db == 0) out[i] = 0;
    }
    return out;
}

/// For every element of `out`, the linear index of the corresponding element of `in`.
std::vector<int64_t> broadcast_map(const Shape& out, const Shape& in) {
    const size_t r = out.size();
    const size_t off = r - in.size();
    std::vector<int64_t> in_stride(r, 0);
    int64_t s = 1;
    for (size_t i = r; i-- > off;) {
        const int64_t d = in[i - off];
        in_stride[i] = d == 1 ? 0 : s;
        s *= d;
    }
    const int64_t n = shape_numel(out);
    std::vector<int64_t> map(static_cast<size_t>(n));
    std::vector<int64_t> idx(r, 0);
    int64_t lin = 0;
    for (int64_t k = 0; k < n; ++k) {
        map[static_cast<size_t>(k)] = lin;
        for (size_t ax = r; ax-- > 0;) {
            ++idx[ax];
            lin += in_stride[ax];
            if (idx[ax] < out[ax]) break;
            lin -= in_stride[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    return map;
}

enum class BKind { same, scalar_rhs, scalar_lhs, general };

struct Broadcast {
    Shape out;
    BKind kind = BKind::general;
    std::vector<int64_t> map_a, map_b;
};

Broadcast plan_broadcast(const Tensor& a, const Tensor& b) {
    Broadcast p;
    if (a.shape() == b.shape()) {
        p.out = a.shape();
        p.kind = BKind::same;
        return p;
    }
    p.out = broadcast_shape(a.shape(), b.shape());
    if (b.size() == 1 && p.out == a.shape()) {
        p.kind = BKind::scalar_rhs;
        return p;
    }
    if (a.size() == 1 && p.out == b.shape()) {
        p.kind = BKind::scalar_lhs;
        return p;
    }
    p.map_a = broadcast_map(p.out, a.shape());
    p.map_b = broadcast_map(p.out, b.shape());
    return p;
}

template <class F>
Tensor apply_binary(const Tensor& a, const Tensor& b, const Broadcast& p, F f) {
    Tensor out(p.out);
    const size_t n = out.size();
    switch (p.kind) {
        case BKind::same:
            for (size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
            break;
        case BKind::scalar_rhs:
            for (size_t i = 0; i < n; ++i) out[i] = f(a[i], b[0]);
            break;
        case BKind::scalar_lhs:
            for (size_t i = 0; i < n; ++i) out[i] = f(a[0], b[i]);
            break;
        case BKind::general:
            for (size_t i = 0; i < n; ++i) out[i] = f(a[static_cast<size_t>(p.map_a[i])], b[static_cast<size_t>(p.map_b[i])]);
            break;
    }
    return out;
}

/// Accumulates g (shaped like the broadcast output) into dst, summing broadcast axes.
/// which: 0 for the lhs operand, 1 for the rhs operand. `factor(i)` scales each term.
template <class F>
void reduce_into(Tensor& dst, const Tensor& g, const Broadcast& p, int which, F factor) {
    const size_t n = g.size();
    const bool is_lhs = which == 0;
    if (p.kind == BKind::same || (p.kind == BKind::scalar_rhs && is_lhs) || (p.kind == BKind::scalar_lhs && !is_lhs)) {
        for (size_t i = 0; i < n; ++i) dst[i] += g[i] * factor(i);
        return;
    }
    if (p.kind == BKind::scalar_rhs || p.kind == BKind::scalar_lhs) {
        double s = 0.0;
        for (size_t i = 0; i < n; ++i) s += g[i] * factor(i);
        dst[0] += s;
        return;
    }
    const auto& map = is_lhs ? p.map_a : p.map_b;
    for (size_t i = 0; i < n; ++i) dst[static_cast<size_t>(map[i])] += g[i] * factor(i);
}

}  // namespace

Var add(const Var& a, const Var& b) {
    auto p = std::make_shared<Broadcast>(plan_broadcast(a.value(), b.value()));
    Tensor out = apply_binary(a.value(), b.value(), *p, [](double x, double y) { return x + y; });
    return make_result(std::move(out), {a, b}, [p](Node& self) {
        auto one = [](size_t) { return 1.0; };
        if (parent_node(self, 0).requires_grad) reduce_into(parent_node(self, 0).grad_buffer(), self.grad, *p, 0, one);
        if (parent_node(self, 1).requires_grad) reduce_into(parent_node(self, 1).grad_buffer(), self.grad, *p, 1, one);
    });
}

Var sub(const Var& a, const Var& b) {
    auto p = std::make_shared<Broadcast>(plan_broadcast(a.value(), b.value()));
    Tensor out = apply_binary(a.value(), b.value(), *p, [](double x, double y) { return x - y; });
    return make_result(std::move(out), {a, b}, [p](Node& self) {
        if (parent_node(self, 0).requires_grad)
            reduce_into(parent_node(self, 0).grad_buffer(), self.grad, *p, 0, [](size_t) { return 1.0; });
        if (parent_node(self, 1).requires_grad)
            reduce_into(parent_node(self, 1).grad_buffer(), self.grad, *p, 1, [](size_t) { return -1.0; });
    });
}

Var mul(const Var& a, const Var& b) {
    auto p = std::make_shared<Broadcast>(plan_broadcast(a.value(), b.value()));
    Tensor out = apply_binary(a.value(), b.value(), *p, [](double x, double y) { return x * y; });
    return make_result(std::move(out), {a, b}, [p](Node& self) {
        Node& na = parent_node(self, 0);
        Node& nb = parent_node(self, 1);
        const Tensor& av = na.value;
        const Tensor& bv = nb.value;
        auto value_at = [&p](const Tensor& t, int which, size_t i) {
            switch (p->kind) {
                case BKind::same: return t[i];
                case BKind::scalar_rhs: return which == 1 ? t[0] : t[i];
                case BKind::scalar_lhs: return which == 0 ? t[0] : t[i];
                case BKind::general: break;
            }
            return t[static_cast<size_t>((which == 0 ? p->map_a : p->map_b)[i])];
        };
        if (na.requires_grad) reduce_into(na.grad_buffer(), self.grad, *p, 0, [&](size_t i) { return value_at(bv, 1, i); });
        if (nb.requires_grad) reduce_into(nb.grad_buffer(), self.grad, *p, 1, [&](size_t i) { return value_at(av, 0, i); });
    });
}

Var scale(const Var& a, double s) {
    Tensor out(a.shape());
    const Tensor& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    return make_result(std::move(out), {a}, [s](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out(a.shape());
    const Tensor& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    return make_result(std::move(out), {a}, [](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

namespace {

template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
    Tensor out(a.shape());
    const Tensor& av = a.value();
    for (size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return make_result(std::move(out), {a}, [df](Node& self) {
        Node& p = parent_node(self, 0);
        Tensor& g = p.grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p.value[i], self.value[i]);
    });
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Var square(const Var& a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var silu(const Var& a) {
    return unary(
        a, [](double x) { return x * sigmoid_d(x); },
        [](double x, double) {
            const double s = sigmoid_d(x);
            return s * (1.0 + x * (1.0 - s));
        });
}

Var gelu(const Var& a) {
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double u = kGeluC * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

Var tanh(const Var& a) {
    return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
    return unary(a, [](double x) { return sigmoid_d(x); }, [](double, double y) { return y * (1.0 - y); });
}

// ---------------------------------------------------------------------------
// Matrix products

namespace {

struct MatmulDims {
    int64_t batch = 1;
    int64_t m = 0, k = 0, n = 0;
    bool shared_rhs = false;
    bool shared_lhs = false;
    Shape out;
};

MatmulDims matmul_dims(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw Error("matmul needs rank >= 2 operands, got " + shape_str(a) + " and " + shape_str(b));
    }
    MatmulDims d;
    d.m = a[a.size() - 2];
    d.k = a[a.size() - 1];
    d.n = b[b.size() - 1];
    if (b[b.size() - 2] != d.k) {
        throw Error("matmul inner-dimension mismatch: " + shape_str(a) + " x " + shape_str(b));
    }
    const Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
    if (bb.empty()) {
        d.shared_rhs = true;
        d.batch = shape_numel(ba);
        d.out = ba;
    } else if (ba.empty()) {
        d.shared_lhs = true;
        d.batch = shape_numel(bb);
        d.out = bb;
    } else if (ba == bb) {
        d.batch = shape_numel(ba);
        d.out = ba;
    } else {
        throw Error("matmul batch mismatch: " + shape_str(a) + " x " + shape_str(b));
    }
    d.out.push_back(d.m);
    d.out.push_back(d.n);
    return d;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    const MatmulDims d = matmul_dims(a.shape(), b.shape());
    Tensor out(d.out);
    const double* ap = a.value().data().data();
    const double* bp = b.value().data().data();
    double* op = out.data().data();
    if (d.shared_rhs) {
        MapMat(op, d.batch * d.m, d.n).noalias() = CMapMat(ap, d.batch * d.m, d.k) * CMapMat(bp, d.k, d.n);
    } else {
        for (int64_t i = 0; i < d.batch; ++i) {
            const double* ai = d.shared_lhs ? ap : ap + i * d.m * d.k;
            MapMat(op + i * d.m * d.n, d.m, d.n).noalias() =
                CMapMat(ai, d.m, d.k) * CMapMat(bp + i * d.k * d.n, d.k, d.n);
        }
    }
    return make_result(std::move(out), {a, b}, [d](Node& self) {
        Node& na = parent_node(self, 0);
        Node& nb = parent_node(self, 1);
        const double* g = self.grad.data().data();
        if (d.shared_rhs) {
            CMapMat G(g, d.batch * d.m, d.n);
            if (na.requires_grad) {
                MapMat(na.grad_buffer().data().data(), d.batch * d.m, d.k).noalias() +=
                    G * CMapMat(nb.value.data().data(), d.k, d.n).transpose();
            }
            if (nb.requires_grad) {
                MapMat(nb.grad_buffer().data().data(), d.k, d.n).noalias() +=
                    CMapMat(na.value.data().data(), d.batch * d.m, d.k).transpose() * G;
            }
            return;
        }
        for (int64_t i = 0; i < d.batch; ++i) {
            CMapMat G(g + i * d.m * d.n, d.m, d.n);
            const int64_t a_off = d.shared_lhs ? 0 : i * d.m * d.k;
            if (na.requires_grad) {
                MapMat(na.grad_buffer().data().data() + a_off, d.m, d.k).noalias() +=
                    G * CMapMat(nb.value.data().data() + i * d.k * d.n, d.k, d.n).transpose();
            }
            if (nb.requires_grad) {
                MapMat(nb.grad_buffer().data().data() + i * d.k * d.n, d.k, d.n).noalias() +=
                    CMapMat(na.value.data().data() + a_off, d.m, d.k).transpose() * G;
            }
        }
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    Var y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return make_result(std::move(out), {a}, [](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var transpose(const Var& a) {
    if (a.value().rank() != 2) throw Error("transpose expects rank 2, got " + shape_str(a.shape()));
    const int64_t r = a.shape()[0], c = a.shape()[1];
    Tensor out({c, r});
    MapMat(out.data().data(), c, r) = CMapMat(a.value().data().data(), r, c).transpose();
    return make_result(std::move(out), {a}, [r, c](Node& self) {
        MapMat(parent_node(self, 0).grad_buffer().data().data(), r, c) +=
            CMapMat(self.grad.data().data(), c, r).transpose();
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    return make_result(Tensor::scalar(s), {a}, [](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        const double gs = self.grad[0];
        for (size_t i = 0; i < g.size(); ++i) g[i] += gs;
    });
}

Var mean(const Var& a) {
    const size_t n = a.value().size();
    if (n == 0) throw Error("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var layer_norm(const Var& a, double eps) {
    const Tensor& x = a.value();
    if (x.rank() < 1) throw Error("layer_norm on scalar");
    const int64_t d = x.shape().back();
    const int64_t rows = static_cast<int64_t>(x.size()) / std::max<int64_t>(d, 1);
    Tensor out(x.shape());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(r)] = is;
        double* orow = out.data().data() + r * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = (xr[j] - mu) * is;
    }
    return make_result(std::move(out), {a}, [inv_std, rows, d](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = self.value.data().data() + r * d;
            const double* dy = self.grad.data().data() + r * d;
            double mdy = 0.0, mdyy = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                mdy += dy[j];
                mdyy += dy[j] * y[j];
            }
            mdy /= static_cast<double>(d);
            mdyy /= static_cast<double>(d);
            const double is = (*inv_std)[static_cast<size_t>(r)];
            double* gr = g.data().data() + r * d;
            for (int64_t j = 0; j < d; ++j) gr[j] += is * (dy[j] - mdy - y[j] * mdyy);
        }
    });
}

Var softmax(const Var& a) {
    const Tensor& x = a.value();
    if (x.rank() < 1) throw Error("softmax on scalar");
    const int64_t d = x.shape().back();
    const int64_t rows = static_cast<int64_t>(x.size()) / std::max<int64_t>(d, 1);
    Tensor out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double* o = out.data().data() + r * d;
        const double mx = *std::max_element(xr, xr + d);
        double s = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            o[j] = std::exp(xr[j] - mx);
            s += o[j];
        }
        for (int64_t j = 0; j < d; ++j) o[j] /= s;
    }
    return make_result(std::move(out), {a}, [rows, d](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = self.value.data().data() + r * d;
            const double* dy = self.grad.data().data() + r * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
            double* gr = g.data().data() + r * d;
            for (int64_t j = 0; j < d; ++j) gr[j] += y[j] * (dy[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// Attention

Var attention(const Var& q, const Var& k, const Var& v, int heads, const Tensor& additive_mask) {
    const Tensor& Q = q.value();
    const Tensor& K = k.value();
    const Tensor& V = v.value();
    if (Q.rank() != 2 || K.rank() != 2 || V.rank() != 2) {
        throw Error("attention expects rank-2 q/k/v, got " + shape_str(Q.shape()) + ", " + shape_str(K.shape()) +
                    ", " + shape_str(V.shape()));
    }
    const int64_t S = Q.shape()[0], T = K.shape()[0], HD = Q.shape()[1];
    if (heads <= 0 || HD % heads != 0 || K.shape()[1] != HD || V.shape()[1] != HD || V.shape()[0] != T) {
        throw Error("attention head/channel mismatch: q " + shape_str(Q.shape()) + ", k " + shape_str(K.shape()) +
                    ", v " + shape_str(V.shape()) + ", heads " + std::to_string(heads));
    }
    const bool has_mask = !additive_mask.empty();
    if (has_mask && additive_mask.shape() != Shape{S, T}) {
        throw Error("attention mask shape " + shape_str(additive_mask.shape()) + " does not match scores [" +
                    std::to_string(S) + "," + std::to_string(T) + "]");
    }
    const int64_t d = HD / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();

    auto probs = std::make_shared<std::vector<RowMat>>(static_cast<size_t>(heads));
    Tensor out({S, HD});
    for (int h = 0; h < heads; ++h) {
        CSMapMat qh(Q.data().data() + h * d, S, d, Stride(HD));
        CSMapMat kh(K.data().data() + h * d, T, d, Stride(HD));
        CSMapMat vh(V.data().data() + h * d, T, d, Stride(HD));
        RowMat scores = (qh * kh.transpose()) * inv_sqrt_d;
        if (!scores.allFinite()) throw Error("attention produced non-finite scores in head " + std::to_string(h));
        for (int64_t i = 0; i < S; ++i) {
            double mx = kNegInf;
            for (int64_t j = 0; j < T; ++j) {
                if (has_mask) {
                    const double m = additive_mask[static_cast<size_t>(i * T + j)];
                    scores(i, j) = m == kNegInf ? kNegInf : scores(i, j) + m;
                }
                mx = std::max(mx, scores(i, j));
            }
            if (!std::isfinite(mx)) {
                throw Error("attention row " + std::to_string(i) + " has no finite score");
            }
            double s = 0.0;
            for (int64_t j = 0; j < T; ++j) {
                const double e = scores(i, j) == kNegInf ? 0.0 : std::exp(scores(i, j) - mx);
                scores(i, j) = e;
                s += e;
            }
            scores.row(i) /= s;
        }
        SMapMat(out.data().data() + h * d, S, d, Stride(HD)).noalias() = scores * vh;
        (*probs)[static_cast<size_t>(h)] = std::move(scores);
    }
    return make_result(std::move(out), {q, k, v}, [probs, heads, S, T, HD, d, inv_sqrt_d](Node& self) {
        Node& nq = parent_node(self, 0);
        Node& nk = parent_node(self, 1);
        Node& nv = parent_node(self, 2);
        for (int h = 0; h < heads; ++h) {
            const RowMat& P = (*probs)[static_cast<size_t>(h)];
            CSMapMat dO(self.grad.data().data() + h * d, S, d, Stride(HD));
            CSMapMat qh(nq.value.data().data() + h * d, S, d, Stride(HD));
            CSMapMat kh(nk.value.data().data() + h * d, T, d, Stride(HD));
            CSMapMat vh(nv.value.data().data() + h * d, T, d, Stride(HD));
            if (nv.requires_grad) {
                SMapMat(nv.grad_buffer().data().data() + h * d, T, d, Stride(HD)).noalias() += P.transpose() * dO;
            }
            if (!nq.requires_grad && !nk.requires_grad) continue;
            RowMat dP = dO * vh.transpose();
            for (int64_t i = 0; i < S; ++i) {
                const double dot = dP.row(i).dot(P.row(i));
                dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
            }
            dP *= inv_sqrt_d;
            if (nq.requires_grad) {
                SMapMat(nq.grad_buffer().data().data() + h * d, S, d, Stride(HD)).noalias() += dP * kh;
            }
            if (nk.requires_grad) {
                SMapMat(nk.grad_buffer().data().data() + h * d, T, d, Stride(HD)).noalias() += dP.transpose() * qh;
            }
        }
    });
}

Var rope_rotate(const Var& x, const Tensor& angles, int heads) {
    const Tensor& X = x.value();
    if (X.rank() != 2) throw Error("rope_rotate expects [S, H*d], got " + shape_str(X.shape()));
    const int64_t S = X.shape()[0], HD = X.shape()[1];
    if (heads <= 0 || HD % heads != 0 || (HD / heads) % 2 != 0) {
        throw Error("rope_rotate needs an even per-head width, got " + shape_str(X.shape()) + " with " +
                    std::to_string(heads) + " heads");
    }
    const int64_t d = HD / heads, half = d / 2;
    if (angles.shape() != Shape{S, half}) {
        throw Error("rope angles shape " + shape_str(angles.shape()) + " does not match [" + std::to_string(S) + "," +
                    std::to_string(half) + "]");
    }
    auto cs = std::make_shared<std::vector<double>>(angles.size());
    auto sn = std::make_shared<std::vector<double>>(angles.size());
    for (size_t i = 0; i < angles.size(); ++i) {
        (*cs)[i] = std::cos(angles[i]);
        (*sn)[i] = std::sin(angles[i]);
    }
    Tensor out(X.shape());
    for (int64_t s = 0; s < S; ++s) {
        for (int h = 0; h < heads; ++h) {
            const double* xr = X.data().data() + s * HD + h * d;
            double* o = out.data().data() + s * HD + h * d;
            for (int64_t j = 0; j < half; ++j) {
                const double c = (*cs)[static_cast<size_t>(s * half + j)];
                const double si = (*sn)[static_cast<size_t>(s * half + j)];
                o[2 * j] = xr[2 * j] * c - xr[2 * j + 1] * si;
                o[2 * j + 1] = xr[2 * j] * si + xr[2 * j + 1] * c;
            }
        }
    }
    return make_result(std::move(out), {x}, [cs, sn, S, HD, heads, d, half](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (int64_t s = 0; s < S; ++s) {
            for (int h = 0; h < heads; ++h) {
                const double* dy = self.grad.data().data() + s * HD + h * d;
                double* gr = g.data().data() + s * HD + h * d;
                for (int64_t j = 0; j < half; ++j) {
                    const double c = (*cs)[static_cast<size_t>(s * half + j)];
                    const double si = (*sn)[static_cast<size_t>(s * half + j)];
                    gr[2 * j] += dy[2 * j] * c + dy[2 * j + 1] * si;
                    gr[2 * j + 1] += -dy[2 * j] * si + dy[2 * j + 1] * c;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Row and column plumbing

Var concat_rows(std::span<const Var> parts) {
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const auto& p : parts) values.push_back(p.value());
    Tensor out = concat0(values);
    std::vector<int64_t> sizes;
    for (const auto& p : parts) sizes.push_back(static_cast<int64_t>(p.value().size()));
    return make_result(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [sizes](Node& self) {
        int64_t off = 0;
        for (size_t i = 0; i < sizes.size(); ++i) {
            Node& p = parent_node(self, i);
            if (p.requires_grad) {
                Tensor& g = p.grad_buffer();
                for (int64_t j = 0; j < sizes[i]; ++j) g[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(off + j)];
            }
            off += sizes[i];
        }
    });
}

Var slice_rows(const Var& a, int64_t begin, int64_t count) {
    Tensor out = a.value().slice0(begin, count);
    const int64_t rs = a.value().row_size();
    return make_result(std::move(out), {a}, [begin, rs](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (size_t j = 0; j < self.grad.size(); ++j) g[static_cast<size_t>(begin * rs) + j] += self.grad[j];
    });
}

Var gather_rows(const Var& a, std::span<const int64_t> rows) {
    const Tensor& A = a.value();
    if (A.rank() < 1) throw Error("gather_rows on scalar");
    const int64_t rs = A.row_size();
    Shape s = A.shape();
    s[0] = static_cast<int64_t>(rows.size());
    Tensor out(s);
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= A.shape()[0]) throw Error("gather_rows index out of range");
        std::copy_n(A.data().data() + rows[i] * rs, rs, out.data().data() + static_cast<int64_t>(i) * rs);
    }
    std::vector<int64_t> idx(rows.begin(), rows.end());
    return make_result(std::move(out), {a}, [idx, rs](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (size_t i = 0; i < idx.size(); ++i) {
            for (int64_t j = 0; j < rs; ++j) {
                g[static_cast<size_t>(idx[i] * rs + j)] += self.grad[static_cast<size_t>(static_cast<int64_t>(i) * rs + j)];
            }
        }
    });
}

Var slice_cols(const Var& a, int64_t begin, int64_t count) {
    const Tensor& A = a.value();
    if (A.rank() != 2) throw Error("slice_cols expects rank 2, got " + shape_str(A.shape()));
    const int64_t R = A.shape()[0], C = A.shape()[1];
    if (begin < 0 || count < 0 || begin + count > C) throw Error("slice_cols out of range for " + shape_str(A.shape()));
    Tensor out({R, count});
    for (int64_t r = 0; r < R; ++r) std::copy_n(A.data().data() + r * C + begin, count, out.data().data() + r * count);
    return make_result(std::move(out), {a}, [R, C, begin, count](Node& self) {
        Tensor& g = parent_node(self, 0).grad_buffer();
        for (int64_t r = 0; r < R; ++r) {
            for (int64_t j = 0; j < count; ++j) {
                g[static_cast<size_t>(r * C + begin + j)] += self.grad[static_cast<size_t>(r * count + j)];
            }
        }
    });
}

Var masked_row_add(const Var& z, const Var& update, std::span<const uint8_t> row_mask) {
    const Tensor& Z = z.value();
    const Tensor& U = update.value();
    if (!Z.same_shape(U) || Z.rank() < 1) {
        throw Error("masked_row_add shape mismatch " + shape_str(Z.shape()) + " vs " + shape_str(U.shape()));
    }
    if (static_cast<int64_t>(row_mask.size()) != Z.shape()[0]) throw Error("masked_row_add mask length mismatch");
    const int64_t rs = Z.row_size();
    Tensor out = Z;
    for (size_t r = 0; r < row_mask.size(); ++r) {
        if (!row_mask[r]) continue;
        for (int64_t j = 0; j < rs; ++j) out[r * rs + j] = Z[r * rs + j] + U[r * rs + j];
    }
    std::vector<uint8_t> mask(row_mask.begin(), row_mask.end());
    return make_result(std::move(out), {z, update}, [mask, rs](Node& self) {
        Node& nz = parent_node(self, 0);
        Node& nu = parent_node(self, 1);
        if (nz.requires_grad) {
            Tensor& g = nz.grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (nu.requires_grad) {
            Tensor& g = nu.grad_buffer();
            for (size_t r = 0; r < mask.size(); ++r) {
                if (!mask[r]) continue;
                for (int64_t j = 0; j < rs; ++j) g[r * rs + j] += self.grad[r * rs + j];
            }
        }
    });
}

}  // namespace lipedit::ad
