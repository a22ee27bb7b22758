#include "loclab/tensor.hpp"

#include "loclab/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>
#include <unordered_set>

namespace loclab {

namespace {

std::atomic<bool> g_finite_check{false};

using NodePtr = std::shared_ptr<detail::Node>;

std::string shape_str(const Shape &s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

void check_finite(const std::vector<double> &v, const char *op) {
    if (!g_finite_check.load(std::memory_order_relaxed)) return;
    for (double x : v) {
        if (!std::isfinite(x)) throw DomainError(std::string("non-finite value produced by ") + op);
    }
}

// Builds an op result. The backward closure is kept only when some input
// participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                   std::function<void(detail::Node &)> backward_fn, const char *op) {
    check_finite(value, op);
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool rg = false;
    for (const auto &p : parents) rg = rg || p->requires_grad;
    if (rg) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

void require_matrix(const Tensor &t, const char *op) {
    if (!t.defined() || t.dim() != 2) throw DimensionError(std::string(op) + ": expected a 2-d tensor");
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    MutMap(c, idx(m), idx(n)).noalias() += ConstMap(a, idx(m), idx(k)) * ConstMap(b, idx(k), idx(n));
}

// c[m x k] += a[m x n] * b[k x n]^T
void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t n, std::size_t k) {
    MutMap(c, idx(m), idx(k)).noalias() += ConstMap(a, idx(m), idx(n)) * ConstMap(b, idx(k), idx(n)).transpose();
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    MutMap(c, idx(k), idx(n)).noalias() += ConstMap(a, idx(m), idx(k)).transpose() * ConstMap(b, idx(m), idx(n));
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

double stable_sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(sigmoid(x)) = -softplus(-x)
double log_sigmoid_value(double x) {
    if (x >= 0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

} // namespace

std::size_t shape_numel(const Shape &shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    check_finite(data, "Tensor::from");
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::rows() const { return dim() >= 1 ? shape()[0] : 1; }

std::size_t Tensor::cols() const { return dim() >= 2 ? shape()[1] : 1; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on a tensor with " + std::to_string(numel()) + " elements");
    return node_->value[0];
}

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

void set_finite_check(bool enabled) { g_finite_check.store(enabled); }

bool finite_check_enabled() { return g_finite_check.load(); }

void backward(const Tensor &loss) {
    if (!loss.defined() || loss.numel() != 1) throw ContractError("backward() requires a scalar loss");
    if (!loss.requires_grad()) return;

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<detail::Node *> order;
    std::unordered_set<detail::Node *> visited;
    std::vector<std::pair<detail::Node *, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node *p = node->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior gradients are recomputed from scratch on every call.
    for (auto *n : order) {
        if (n->backward) n->grad.assign(n->value.size(), 0.0);
    }
    loss.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

namespace ops {

Tensor elementwise(Unary kind, const Tensor &x, double param) {
    std::vector<double> out(x.numel());
    const auto in = x.data();
    switch (kind) {
    case Unary::gelu:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(in[i]);
        break;
    case Unary::sigmoid:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(in[i]);
        break;
    case Unary::log:
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (!(in[i] > 0.0)) throw DomainError("log of non-positive value " + std::to_string(in[i]));
            out[i] = std::log(in[i]);
        }
        break;
    case Unary::exp:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(in[i]);
        break;
    case Unary::pow:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(in[i], param);
        break;
    case Unary::abs:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(in[i]);
        break;
    case Unary::neg:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = -in[i];
        break;
    case Unary::log_sigmoid:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = log_sigmoid_value(in[i]);
        break;
    case Unary::square:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * in[i];
        break;
    }
    auto xn = x.node();
    return make_result(
        x.shape(), std::move(out), {xn},
        [xn, kind, param](detail::Node &self) {
            auto &g = xn->ensure_grad();
            const auto &in = xn->value;
            const auto &y = self.value;
            const auto &gy = self.grad;
            switch (kind) {
            case Unary::gelu:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * gelu_derivative(in[i]);
                break;
            case Unary::sigmoid:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * y[i] * (1.0 - y[i]);
                break;
            case Unary::log:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] / in[i];
                break;
            case Unary::exp:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * y[i];
                break;
            case Unary::pow:
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += gy[i] * param * std::pow(in[i], param - 1.0);
                break;
            case Unary::abs:
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += gy[i] * (in[i] > 0 ? 1.0 : (in[i] < 0 ? -1.0 : 0.0));
                break;
            case Unary::neg:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= gy[i];
                break;
            case Unary::log_sigmoid:
                // d/dx log sigmoid(x) = sigmoid(-x)
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * stable_sigmoid(-in[i]);
                break;
            case Unary::square:
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i] * 2.0 * in[i];
                break;
            }
        },
        "elementwise");
}

Tensor matmul(const Tensor &a, const Tensor &b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return make_result(
        {m, n}, std::move(out), {an, bn},
        [an, bn, m, k, n](detail::Node &self) {
            if (an->requires_grad) gemm_nt(self.grad.data(), bn->value.data(), an->ensure_grad().data(), m, n, k);
            if (bn->requires_grad) gemm_tn(an->value.data(), self.grad.data(), bn->ensure_grad().data(), m, k, n);
        },
        "matmul");
}

Tensor transpose(const Tensor &a) {
    require_matrix(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    const auto in = a.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
    auto an = a.node();
    return make_result(
        {c, r}, std::move(out), {an},
        [an, r, c](detail::Node &self) {
            auto &g = an->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
        },
        "transpose");
}

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    auto an = a.node(), bn = b.node();
    return make_result(
        a.shape(), std::move(out), {an, bn},
        [an, bn](detail::Node &self) {
            for (auto *p : {an.get(), bn.get()}) {
                if (!p->requires_grad) continue;
                auto &g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        },
        "add");
}

Tensor sub(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    auto an = a.node(), bn = b.node();
    return make_result(
        a.shape(), std::move(out), {an, bn},
        [an, bn](detail::Node &self) {
            if (an->requires_grad) {
                auto &g = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (bn->requires_grad) {
                auto &g = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        },
        "sub");
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    auto an = a.node(), bn = b.node();
    return make_result(
        a.shape(), std::move(out), {an, bn},
        [an, bn](detail::Node &self) {
            if (an->requires_grad) {
                auto &g = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
            }
            if (bn->requires_grad) {
                auto &g = bn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
            }
        },
        "mul");
}

Tensor add_row(const Tensor &a, const Tensor &row) {
    require_matrix(a, "add_row");
    const std::size_t r = a.rows(), c = a.cols();
    if (row.numel() != c) throw DimensionError("add_row: row length does not match column count");
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto rd = row.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rd[j];
    auto an = a.node(), rn = row.node();
    return make_result(
        a.shape(), std::move(out), {an, rn},
        [an, rn, r, c](detail::Node &self) {
            if (an->requires_grad) {
                auto &g = an->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (rn->requires_grad) {
                auto &g = rn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
            }
        },
        "add_row");
}

Tensor scale(const Tensor &a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto &v : out) v *= s;
    auto an = a.node();
    return make_result(
        a.shape(), std::move(out), {an},
        [an, s](detail::Node &self) {
            auto &g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
        },
        "scale");
}

Tensor add_scalar(const Tensor &a, double s) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (auto &v : out) v += s;
    auto an = a.node();
    return make_result(
        a.shape(), std::move(out), {an},
        [an](detail::Node &self) {
            auto &g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        },
        "add_scalar");
}

Tensor sum(const Tensor &x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    auto xn = x.node();
    return make_result(
        {}, {s}, {xn},
        [xn](detail::Node &self) {
            auto &g = xn->ensure_grad();
            for (auto &v : g) v += self.grad[0];
        },
        "sum");
}

Tensor mean(const Tensor &x) {
    if (x.numel() == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor row_sum(const Tensor &x) {
    require_matrix(x, "row_sum");
    const std::size_t r = x.rows(), c = x.cols();
    std::vector<double> out(r, 0.0);
    const auto d = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += d[i * c + j];
    auto xn = x.node();
    return make_result(
        {r}, std::move(out), {xn},
        [xn, r, c](detail::Node &self) {
            auto &g = xn->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[i];
        },
        "row_sum");
}

Tensor segment_sum(const Tensor &v, std::span<const std::size_t> offsets) {
    if (offsets.size() < 2 || offsets.back() != v.numel())
        throw DimensionError("segment_sum: offsets do not cover the input");
    const std::size_t ns = offsets.size() - 1;
    std::vector<double> out(ns, 0.0);
    const auto d = v.data();
    for (std::size_t s = 0; s < ns; ++s)
        for (std::size_t i = offsets[s]; i < offsets[s + 1]; ++i) out[s] += d[i];
    auto vn = v.node();
    std::vector<std::size_t> offs(offsets.begin(), offsets.end());
    return make_result(
        {ns}, std::move(out), {vn},
        [vn, offs = std::move(offs)](detail::Node &self) {
            auto &g = vn->ensure_grad();
            for (std::size_t s = 0; s + 1 < offs.size(); ++s)
                for (std::size_t i = offs[s]; i < offs[s + 1]; ++i) g[i] += self.grad[s];
        },
        "segment_sum");
}

Tensor segment_mean(const Tensor &v, std::span<const std::size_t> offsets) {
    Tensor s = segment_sum(v, offsets);
    std::vector<double> inv(offsets.size() - 1);
    for (std::size_t i = 0; i + 1 < offsets.size(); ++i) {
        const auto len = offsets[i + 1] - offsets[i];
        if (len == 0) throw ContractError("segment_mean over an empty segment");
        inv[i] = 1.0 / static_cast<double>(len);
    }
    const std::size_t n = inv.size();
    return mul(s, Tensor::from({n}, std::move(inv)));
}

Tensor gather_rows(const Tensor &x, std::span<const std::size_t> rows) {
    require_matrix(x, "gather_rows");
    const std::size_t c = x.cols(), r = x.rows();
    std::vector<double> out(rows.size() * c);
    const auto d = x.data();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= r) throw IndexError("gather_rows: row index out of range");
        std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
    }
    auto xn = x.node();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return make_result(
        {rows.size(), c}, std::move(out), {xn},
        [xn, idx = std::move(idx), c](detail::Node &self) {
            auto &g = xn->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += self.grad[i * c + j];
        },
        "gather_rows");
}

Tensor gather(const Tensor &x, std::span<const std::size_t> indices) {
    std::vector<double> out(indices.size());
    const auto d = x.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= d.size()) throw IndexError("gather: index out of range");
        out[i] = d[indices[i]];
    }
    auto xn = x.node();
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    return make_result(
        {indices.size()}, std::move(out), {xn},
        [xn, idx = std::move(idx)](detail::Node &self) {
            auto &g = xn->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += self.grad[i];
        },
        "gather");
}

Tensor embedding(const Tensor &table, std::span<const int> ids) {
    require_matrix(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    std::vector<double> out(ids.size() * d);
    const auto td = table.data();
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab)
            throw IndexError("embedding: id " + std::to_string(ids[t]) + " outside vocabulary of " + std::to_string(vocab));
        std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[t] * d), d, out.begin() + static_cast<std::ptrdiff_t>(t * d));
    }
    auto tn = table.node();
    std::vector<int> idv(ids.begin(), ids.end());
    return make_result(
        {ids.size(), d}, std::move(out), {tn},
        [tn, idv = std::move(idv), d](detail::Node &self) {
            auto &g = tn->ensure_grad();
            for (std::size_t t = 0; t < idv.size(); ++t)
                for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idv[t]) * d + j] += self.grad[t * d + j];
        },
        "embedding");
}

Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps) {
    require_matrix(x, "layer_norm");
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.numel() != c || bias.numel() != c) throw DimensionError("layer_norm: gain/bias length mismatch");
    std::vector<double> out(r * c), xhat(r * c), rstd(r);
    const auto xd = x.data(), gd = gain.data(), bd = bias.data();
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xd[i * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double dv = xd[i * c + j] - mu;
            var += dv * dv;
        }
        var /= static_cast<double>(c);
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (xd[i * c + j] - mu) * rstd[i];
            out[i * c + j] = xhat[i * c + j] * gd[j] + bd[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return make_result(
        x.shape(), std::move(out), {xn, gn, bn},
        [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), r, c](detail::Node &self) {
            const auto &gy = self.grad;
            if (gn->requires_grad) {
                auto &g = gn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += gy[i * c + j] * xhat[i * c + j];
            }
            if (bn->requires_grad) {
                auto &g = bn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) g[j] += gy[i * c + j];
            }
            if (xn->requires_grad) {
                auto &g = xn->ensure_grad();
                const auto &gamma = gn->value;
                const double inv_c = 1.0 / static_cast<double>(c);
                for (std::size_t i = 0; i < r; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = gy[i * c + j] * gamma[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * c + j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                        const double dxh = gy[i * c + j] * gamma[j];
                        g[i * c + j] += rstd[i] * (dxh - inv_c * s1 - xhat[i * c + j] * inv_c * s2);
                    }
                }
            }
        },
        "layer_norm");
}

Tensor causal_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t n_heads,
                        std::span<const std::size_t> offsets) {
    require_matrix(q, "causal_attention");
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t T = q.rows(), d = q.cols();
    if (n_heads == 0 || d % n_heads != 0) throw DimensionError("causal_attention: width not divisible by heads");
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != T)
        throw DimensionError("causal_attention: offsets do not cover the input");
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // Probabilities are stored per (head, row) as a contiguous run over the
    // row's visible keys; prob_start[h*T + r] locates the run.
    std::vector<std::size_t> seg_of(T);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
        for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) seg_of[r] = s;
    std::vector<std::size_t> prob_start(n_heads * T + 1);
    {
        std::size_t acc = 0;
        for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t r = 0; r < T; ++r) {
                prob_start[h * T + r] = acc;
                acc += r - offsets[seg_of[r]] + 1;
            }
        prob_start[n_heads * T] = acc;
    }
    std::vector<double> probs(prob_start.back());
    std::vector<double> out(T * d, 0.0);
    const auto qd = q.data(), kd = k.data(), vd = v.data();
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t r = 0; r < T; ++r) {
            const std::size_t s0 = offsets[seg_of[r]];
            double *p = probs.data() + prob_start[h * T + r];
            double mx = -INFINITY;
            for (std::size_t j = s0; j <= r; ++j) {
                double sdot = 0.0;
                for (std::size_t e = 0; e < dh; ++e) sdot += qd[r * d + off + e] * kd[j * d + off + e];
                p[j - s0] = sdot * inv_sqrt;
                mx = std::max(mx, p[j - s0]);
            }
            double z = 0.0;
            for (std::size_t j = s0; j <= r; ++j) {
                p[j - s0] = std::exp(p[j - s0] - mx);
                z += p[j - s0];
            }
            for (std::size_t j = s0; j <= r; ++j) {
                p[j - s0] /= z;
                const double pj = p[j - s0];
                for (std::size_t e = 0; e < dh; ++e) out[r * d + off + e] += pj * vd[j * d + off + e];
            }
        }
    }
    auto qn = q.node(), kn = k.node(), vn = v.node();
    std::vector<std::size_t> seg_start(T);
    for (std::size_t r = 0; r < T; ++r) seg_start[r] = offsets[seg_of[r]];
    return make_result(
        q.shape(), std::move(out), {qn, kn, vn},
        [qn, kn, vn, probs = std::move(probs), prob_start = std::move(prob_start), seg_start = std::move(seg_start), T, d,
         dh, n_heads, inv_sqrt](detail::Node &self) {
            const auto &gy = self.grad;
            const auto &qd = qn->value, &kd = kn->value, &vd = vn->value;
            std::vector<double> gq(T * d, 0.0), gk(T * d, 0.0), gv(T * d, 0.0);
            std::vector<double> dp;
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = h * dh;
                for (std::size_t r = 0; r < T; ++r) {
                    const std::size_t s0 = seg_start[r];
                    const std::size_t n = r - s0 + 1;
                    const double *p = probs.data() + prob_start[h * T + r];
                    dp.assign(n, 0.0);
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t e = 0; e < dh; ++e) s += gy[r * d + off + e] * vd[(s0 + j) * d + off + e];
                        dp[j] = s;
                        dot += s * p[j];
                        for (std::size_t e = 0; e < dh; ++e) gv[(s0 + j) * d + off + e] += p[j] * gy[r * d + off + e];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                        if (ds == 0.0) continue;
                        for (std::size_t e = 0; e < dh; ++e) {
                            gq[r * d + off + e] += ds * kd[(s0 + j) * d + off + e];
                            gk[(s0 + j) * d + off + e] += ds * qd[r * d + off + e];
                        }
                    }
                }
            }
            auto accumulate = [](const std::shared_ptr<detail::Node> &n, const std::vector<double> &g) {
                if (!n->requires_grad) return;
                auto &dst = n->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
            };
            accumulate(qn, gq);
            accumulate(kn, gk);
            accumulate(vn, gv);
        },
        "causal_attention");
}

Tensor softmax(const Tensor &logits) {
    require_matrix(logits, "softmax");
    const std::size_t r = logits.rows(), c = logits.cols();
    std::vector<double> out(r * c);
    const auto d = logits.data();
    for (std::size_t i = 0; i < r; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, d[i * c + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out[i * c + j] = std::exp(d[i * c + j] - mx);
            z += out[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
    }
    auto ln = logits.node();
    return make_result(
        logits.shape(), std::move(out), {ln},
        [ln, r, c](detail::Node &self) {
            auto &g = ln->ensure_grad();
            const auto &y = self.value;
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * y[i * c + j];
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[i * c + j] * (self.grad[i * c + j] - dot);
            }
        },
        "softmax");
}

Tensor log_softmax_gather(const Tensor &logits, std::span<const std::size_t> rows, std::span<const int> targets) {
    require_matrix(logits, "log_softmax_gather");
    if (rows.size() != targets.size()) throw DimensionError("log_softmax_gather: rows/targets length mismatch");
    const std::size_t R = logits.rows(), V = logits.cols();
    const std::size_t n = rows.size();
    std::vector<double> out(n);
    std::vector<double> lse(n);
    const auto d = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        if (rows[i] >= R) throw IndexError("log_softmax_gather: row out of range");
        if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V)
            throw IndexError("target id " + std::to_string(targets[i]) + " outside vocabulary of " + std::to_string(V));
        const double *row = d.data() + rows[i] * V;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
        lse[i] = mx + std::log(z);
        out[i] = row[targets[i]] - lse[i];
    }
    auto ln = logits.node();
    std::vector<std::size_t> rv(rows.begin(), rows.end());
    std::vector<int> tv(targets.begin(), targets.end());
    return make_result(
        {n}, std::move(out), {ln},
        [ln, rv = std::move(rv), tv = std::move(tv), lse = std::move(lse), V](detail::Node &self) {
            auto &g = ln->ensure_grad();
            const auto &d = ln->value;
            for (std::size_t i = 0; i < rv.size(); ++i) {
                const double gi = self.grad[i];
                if (gi == 0.0) continue;
                const double *row = d.data() + rv[i] * V;
                double *grow = g.data() + rv[i] * V;
                for (std::size_t j = 0; j < V; ++j) grow[j] -= gi * std::exp(row[j] - lse[i]);
                grow[tv[i]] += gi;
            }
        },
        "log_softmax_gather");
}

Tensor softmax_cross_entropy(const Tensor &logits, std::span<const int> targets) {
    require_matrix(logits, "softmax_cross_entropy");
    if (targets.size() != logits.rows()) throw DimensionError("softmax_cross_entropy: one target per row required");
    std::vector<std::size_t> rows(targets.size());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return neg(mean(log_softmax_gather(logits, rows, targets)));
}

} // namespace ops
} // namespace loclab
