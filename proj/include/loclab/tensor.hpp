#pragma once

// Dense float64 tensors with eager reverse-mode differentiation.
//
// Every op builds its result immediately and, when any input requires a
// gradient, records a closure that routes the output gradient back to the
// inputs. The graph lives exactly as long as the Tensors that reference it;
// nothing persists across forward passes.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace loclab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape &shape);

namespace detail {
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node &)> backward;

    std::vector<double> &ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};
} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape &shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim() const { return node_->shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const { return node_->value; }
    double item() const;
    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    // Zeros when no gradient has been accumulated yet.
    std::vector<double> grad() const;
    void zero_grad() { node_->grad.clear(); }

    const std::shared_ptr<detail::Node> &node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

// When enabled, every op verifies its output is finite and throws
// DomainError otherwise. Off by default; tests and --check runs enable it.
void set_finite_check(bool enabled);
bool finite_check_enabled();

// Populates the gradient of every requires_grad leaf reachable from `loss`.
// Leaf gradients accumulate across calls until zero_grad().
void backward(const Tensor &loss);

namespace ops {

enum class Unary { gelu, sigmoid, log, exp, pow, abs, neg, log_sigmoid, square };

Tensor elementwise(Unary kind, const Tensor &x, double param = 0.0);

inline Tensor gelu(const Tensor &x) { return elementwise(Unary::gelu, x); }
inline Tensor sigmoid(const Tensor &x) { return elementwise(Unary::sigmoid, x); }
inline Tensor log(const Tensor &x) { return elementwise(Unary::log, x); }
inline Tensor exp(const Tensor &x) { return elementwise(Unary::exp, x); }
inline Tensor pow(const Tensor &x, double exponent) { return elementwise(Unary::pow, x, exponent); }
inline Tensor abs(const Tensor &x) { return elementwise(Unary::abs, x); }
inline Tensor neg(const Tensor &x) { return elementwise(Unary::neg, x); }
inline Tensor log_sigmoid(const Tensor &x) { return elementwise(Unary::log_sigmoid, x); }
inline Tensor square(const Tensor &x) { return elementwise(Unary::square, x); }

Tensor matmul(const Tensor &a, const Tensor &b);
Tensor transpose(const Tensor &a);

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
// a[r, :] + row for every r.
Tensor add_row(const Tensor &a, const Tensor &row);
Tensor scale(const Tensor &a, double s);
Tensor add_scalar(const Tensor &a, double s);

Tensor sum(const Tensor &x);
Tensor mean(const Tensor &x);
// [T x d] -> [T]
Tensor row_sum(const Tensor &x);
// v[n] reduced over segments [offsets[s], offsets[s+1]) -> [offsets.size()-1]
Tensor segment_sum(const Tensor &v, std::span<const std::size_t> offsets);
Tensor segment_mean(const Tensor &v, std::span<const std::size_t> offsets);
Tensor gather_rows(const Tensor &x, std::span<const std::size_t> rows);
// Elements x[i] for the given flat indices.
Tensor gather(const Tensor &x, std::span<const std::size_t> indices);

Tensor embedding(const Tensor &table, std::span<const int> ids);
Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps = 1e-5);

// Multi-head causal self-attention over packed sequences. Row r attends to
// rows of its own segment with index <= r. q, k, v are [T x d].
Tensor causal_attention(const Tensor &q, const Tensor &k, const Tensor &v, std::size_t n_heads,
                        std::span<const std::size_t> offsets);

Tensor softmax(const Tensor &logits);
// log softmax(logits[rows[i], :])[targets[i]] for each i -> [n]
Tensor log_softmax_gather(const Tensor &logits, std::span<const std::size_t> rows,
                          std::span<const int> targets);
// Mean negative log-probability of targets[t] under row t.
Tensor softmax_cross_entropy(const Tensor &logits, std::span<const int> targets);

} // namespace ops
} // namespace loclab
