#include "loclab/error.hpp"
#include "loclab/rng.hpp"
#include "loclab/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

using namespace loclab;
namespace o = loclab::ops;

namespace {

using Build = std::function<Tensor(const std::vector<Tensor> &)>;

// Max relative error between backward() and central differences over every
// entry of every input.
double grad_error(const std::vector<Shape> &shapes, const Build &build, std::uint64_t seed, double lo = -1.0,
                  double hi = 1.0) {
    Rng rng(seed);
    std::vector<std::vector<double>> values;
    for (const auto &s : shapes) {
        std::vector<double> v(shape_numel(s));
        for (auto &x : v) x = rng.uniform(lo, hi);
        values.push_back(v);
    }
    auto make = [&](bool grad) {
        std::vector<Tensor> leaves;
        for (std::size_t i = 0; i < shapes.size(); ++i) leaves.push_back(Tensor::from(shapes[i], values[i], grad));
        return leaves;
    };
    auto leaves = make(true);
    backward(build(leaves));
    double worst = 0.0;
    const double eps = 1e-6;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto analytic = leaves[i].grad();
        for (std::size_t j = 0; j < values[i].size(); ++j) {
            const double saved = values[i][j];
            values[i][j] = saved + eps;
            const double up = build(make(false)).item();
            values[i][j] = saved - eps;
            const double down = build(make(false)).item();
            values[i][j] = saved;
            const double fd = (up - down) / (2 * eps);
            worst = std::max(worst, std::abs(fd - analytic[j]) / std::max(1.0, std::abs(fd)));
        }
    }
    return worst;
}

constexpr double kTol = 1e-7;

} // namespace

TEST(TensorTest, MatmulValues) {
    auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = o::matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{2, 2}));
    EXPECT_DOUBLE_EQ(c.at(0, 0), 58);
    EXPECT_DOUBLE_EQ(c.at(0, 1), 64);
    EXPECT_DOUBLE_EQ(c.at(1, 0), 139);
    EXPECT_DOUBLE_EQ(c.at(1, 1), 154);
}

TEST(TensorTest, MatmulRejectsMismatch) {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({2, 3});
    EXPECT_THROW(o::matmul(a, b), DimensionError);
}

TEST(TensorTest, SoftmaxRowsSumToOne) {
    auto x = Tensor::from({2, 3}, {1000, 1001, 1002, -5, 0, 5});
    auto p = o::softmax(x);
    for (std::size_t r = 0; r < 2; ++r) EXPECT_NEAR(p.at(r, 0) + p.at(r, 1) + p.at(r, 2), 1.0, 1e-15);
}

TEST(TensorTest, BinaryAndReductionGradients) {
    EXPECT_LT(grad_error({{3, 4}, {4, 2}}, [](auto &v) { return o::sum(o::square(o::matmul(v[0], v[1]))); }, 1),
              kTol);
    EXPECT_LT(grad_error({{3, 4}}, [](auto &v) { return o::sum(o::square(o::transpose(v[0]))); }, 2), kTol);
    EXPECT_LT(grad_error({{2, 3}, {2, 3}}, [](auto &v) { return o::sum(o::mul(o::sub(v[0], v[1]), o::add(v[0], v[1]))); },
                         3),
              kTol);
    EXPECT_LT(grad_error({{3, 2}, {2}}, [](auto &v) { return o::sum(o::square(o::add_row(v[0], v[1]))); }, 4), kTol);
    EXPECT_LT(grad_error({{5}}, [](auto &v) { return o::mean(o::square(o::add_scalar(o::scale(v[0], 3.0), 1.0))); }, 5),
              kTol);
    EXPECT_LT(grad_error({{3, 4}}, [](auto &v) { return o::sum(o::square(o::row_sum(v[0]))); }, 6), kTol);
}

TEST(TensorTest, SegmentAndGatherGradients) {
    const std::vector<std::size_t> offsets{0, 2, 5, 6};
    EXPECT_LT(grad_error({{6}}, [&](auto &v) { return o::sum(o::square(o::segment_sum(v[0], offsets))); }, 7), kTol);
    EXPECT_LT(grad_error({{6}}, [&](auto &v) { return o::sum(o::square(o::segment_mean(v[0], offsets))); }, 8), kTol);
    const std::vector<std::size_t> rows{2, 0, 2};
    EXPECT_LT(grad_error({{3, 2}}, [&](auto &v) { return o::sum(o::square(o::gather_rows(v[0], rows))); }, 9), kTol);
    const std::vector<std::size_t> idx{5, 1, 1};
    EXPECT_LT(grad_error({{6}}, [&](auto &v) { return o::sum(o::square(o::gather(v[0], idx))); }, 10), kTol);
    const std::vector<int> ids{1, 3, 1};
    EXPECT_LT(grad_error({{4, 2}}, [&](auto &v) { return o::sum(o::square(o::embedding(v[0], ids))); }, 11), kTol);
}

TEST(TensorTest, UnaryGradients) {
    for (auto kind : {o::Unary::gelu, o::Unary::sigmoid, o::Unary::exp, o::Unary::neg, o::Unary::log_sigmoid,
                      o::Unary::square}) {
        EXPECT_LT(grad_error({{7}}, [&](auto &v) { return o::sum(o::square(o::elementwise(kind, v[0]))); }, 12), kTol)
            << static_cast<int>(kind);
    }
    EXPECT_LT(grad_error({{5}}, [](auto &v) { return o::sum(o::log(v[0])); }, 13, 0.5, 2.0), kTol);
    EXPECT_LT(grad_error({{5}}, [](auto &v) { return o::sum(o::pow(v[0], 1.7)); }, 14, 0.5, 2.0), kTol);
    EXPECT_LT(grad_error({{5}}, [](auto &v) { return o::sum(o::abs(v[0])); }, 15, 0.2, 1.0), kTol);
}

TEST(TensorTest, LayerNormAttentionAndLossGradients) {
    EXPECT_LT(grad_error({{3, 4}, {4}, {4}}, [](auto &v) { return o::sum(o::square(o::layer_norm(v[0], v[1], v[2]))); },
                         16),
              1e-6);
    const std::vector<std::size_t> offsets{0, 3, 5};
    EXPECT_LT(grad_error({{5, 4}, {5, 4}, {5, 4}},
                         [&](auto &v) { return o::sum(o::square(o::causal_attention(v[0], v[1], v[2], 2, offsets))); },
                         17),
              1e-6);
    EXPECT_LT(grad_error({{2, 3}}, [](auto &v) { return o::sum(o::square(o::softmax(v[0]))); }, 18), kTol);
    const std::vector<std::size_t> rows{0, 2};
    const std::vector<int> targets{1, 2};
    EXPECT_LT(grad_error({{3, 3}}, [&](auto &v) { return o::sum(o::log_softmax_gather(v[0], rows, targets)); }, 19),
              kTol);
    const std::vector<int> all{0, 2, 1};
    EXPECT_LT(grad_error({{3, 3}}, [&](auto &v) { return o::softmax_cross_entropy(v[0], all); }, 20), kTol);
}

TEST(TensorTest, AttentionNeverCrossesSegments) {
    // Changing the second segment must not move outputs of the first.
    Rng rng(3);
    std::vector<double> q(5 * 4), k(5 * 4), v(5 * 4);
    for (auto *vec : {&q, &k, &v})
        for (auto &x : *vec) x = rng.normal();
    const std::vector<std::size_t> offsets{0, 3, 5};
    auto out1 = o::causal_attention(Tensor::from({5, 4}, q), Tensor::from({5, 4}, k), Tensor::from({5, 4}, v), 2, offsets);
    for (std::size_t i = 12; i < 20; ++i) v[i] += 10.0;
    auto out2 = o::causal_attention(Tensor::from({5, 4}, q), Tensor::from({5, 4}, k), Tensor::from({5, 4}, v), 2, offsets);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(out1.at(i), out2.at(i));
}

TEST(TensorTest, GradientsAccumulateUntilCleared) {
    auto x = Tensor::from({2}, {1.0, 2.0}, true);
    backward(o::sum(o::scale(x, 3.0)));
    backward(o::sum(o::scale(x, 3.0)));
    EXPECT_EQ(x.grad(), (std::vector<double>{6.0, 6.0}));
    x.zero_grad();
    EXPECT_EQ(x.grad(), (std::vector<double>{0.0, 0.0}));
}

TEST(TensorTest, FiniteCheckRaisesDomainError) {
    set_finite_check(true);
    auto x = Tensor::from({1}, {-1.0});
    EXPECT_THROW(o::log(x), DomainError);
    set_finite_check(false);
}
