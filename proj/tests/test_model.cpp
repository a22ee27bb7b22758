#include "support.hpp"

#include "loclab/error.hpp"
#include "loclab/model.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace loclab;
using namespace loclab::testing;

TEST(ModelTest, ForwardShape) {
    const auto p = Parameters::init(tiny_config());
    const std::vector<int> tokens{5, 6, 7, 8};
    const auto res = forward(p, tokens, true);
    EXPECT_EQ(res.logits.shape(), (Shape{4, 16}));
    ASSERT_TRUE(res.trace.has_value());
    ASSERT_EQ(res.trace->layers.size(), 2u);
    EXPECT_EQ(res.trace->layers[0].coefficients.shape(), (Shape{4, 16}));
    EXPECT_EQ(res.trace->layers[1].mlp_output.shape(), (Shape{4, 8}));
}

TEST(ModelTest, CausalPrefixLogitsIgnoreLaterTokens) {
    const auto p = Parameters::init(tiny_config());
    const auto a = forward(p, std::vector<int>{5, 6, 7, 8}).logits;
    const auto b = forward(p, std::vector<int>{5, 6, 7, 12}).logits;
    for (std::size_t i = 0; i < 3 * 16; ++i) EXPECT_NEAR(a.at(i), b.at(i), 1e-12);
}

TEST(ModelTest, PackingMatchesSeparatePasses) {
    const auto p = Parameters::init(tiny_config(4));
    const std::vector<int> s1{5, 9, 7}, s2{6, 6, 10, 11, 12};
    PackedBatch batch;
    batch.add(s1);
    batch.add(s2);
    ModelGraph g(p, false);
    const auto packed = g.forward(batch).logits;
    const auto a = forward(p, s1).logits;
    const auto b = forward(p, s2).logits;
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(packed.at(i), a.at(i), 1e-12);
    for (std::size_t i = 0; i < b.numel(); ++i) EXPECT_NEAR(packed.at(a.numel() + i), b.at(i), 1e-12);
}

TEST(ModelTest, InitIsDeterministicUnderSeed) {
    EXPECT_TRUE(bit_identical(Parameters::init(tiny_config(3)), Parameters::init(tiny_config(3))));
    EXPECT_FALSE(bit_identical(Parameters::init(tiny_config(3)), Parameters::init(tiny_config(4))));
}

TEST(ModelTest, SaveLoadRoundTrip) {
    const auto p = perturbed(Parameters::init(tiny_config(2)), 0.1, 9);
    const auto path = std::filesystem::temp_directory_path() / "loclab_model_roundtrip.bin";
    p.save(path);
    const auto q = Parameters::load(path);
    EXPECT_TRUE(bit_identical(p, q));
    EXPECT_EQ(p.config(), q.config());
    std::filesystem::remove(path);
}

TEST(ModelTest, LoadRejectsTruncatedFile) {
    const auto path = std::filesystem::temp_directory_path() / "loclab_model_truncated.bin";
    Parameters::init(tiny_config()).save(path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    EXPECT_THROW(Parameters::load(path), IoError);
    std::filesystem::remove(path);
}

TEST(ModelTest, MixEndpointsAndMidpoint) {
    const auto a = Parameters::init(tiny_config(1));
    auto b = perturbed(a, 0.5, 2);
    EXPECT_TRUE(bit_identical(mix(a, b, 0.0), a));
    EXPECT_TRUE(bit_identical(mix(a, b, 1.0), b));
    auto x = a, y = a;
    x.tensors()[0].data[0] = 2.0;
    y.tensors()[0].data[0] = 4.0;
    EXPECT_EQ(mix(x, y, 0.5).tensors()[0].data[0], 3.0);
    const auto m = mix(a, b, 0.3);
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t i = 0; i < a.tensors()[t].data.size(); ++i)
            EXPECT_NEAR(m.tensors()[t].data[i], 0.7 * a.tensors()[t].data[i] + 0.3 * b.tensors()[t].data[i], 1e-15);
}

TEST(ModelTest, ArgmaxTiesGoToLowestId) {
    const std::vector<double> row{0.1, 0.7, 0.7, 0.2};
    EXPECT_EQ(argmax_lowest(row), 1);
}

TEST(ModelTest, GreedyDecodeMatchesStepwiseArgmax) {
    const auto p = Parameters::init(tiny_config(8));
    std::vector<int> seq{5, 6};
    const auto out = greedy_decode(p, seq, 4);
    ASSERT_EQ(out.size(), 4u);
    for (int tok : out) {
        const auto logits = forward(p, seq).logits;
        const auto last = logits.data().subspan((seq.size() - 1) * 16, 16);
        EXPECT_EQ(argmax_lowest(last), tok);
        seq.push_back(tok);
    }
}

TEST(ModelTest, MaskValidation) {
    const auto cfg = tiny_config();
    EXPECT_THROW(ValueVectorMask::from_vectors(cfg, {{0, 1}, {0, 1}}), ContractError);
    EXPECT_THROW(ValueVectorMask::from_vectors(cfg, {{2, 0}}), ContractError);
    EXPECT_THROW(ValueVectorMask::from_weights(cfg, {cfg.value_weight_count()}), ContractError);
    const auto m = ValueVectorMask::from_vectors(cfg, {{1, 3}, {0, 2}});
    EXPECT_EQ(m.size(), 2u);
    EXPECT_TRUE(m.contains({0, 2}));
    EXPECT_FALSE(m.contains({1, 2}));
    EXPECT_DOUBLE_EQ(m.ratio(), 2.0 / 32.0);
    const auto w = m.weight_indices(cfg);
    EXPECT_EQ(w.size(), 16u);
    EXPECT_EQ(w.front(), 2u * 8u);
}

TEST(ModelTest, MaskGradientsZeroOutside) {
    const auto cfg = tiny_config();
    const auto p = Parameters::init(cfg);
    Gradients g = perturbed(Parameters::zeros_like(p), 1.0, 4);
    const auto mask = ValueVectorMask::from_vectors(cfg, {{1, 5}});
    mask_gradients(g, mask);
    std::size_t nonzero = 0;
    for (std::size_t t = 0; t < g.size(); ++t)
        for (std::size_t i = 0; i < g.tensors()[t].data.size(); ++i)
            if (g.tensors()[t].data[i] != 0.0) {
                ++nonzero;
                EXPECT_EQ(t, p.layer_index(1, Parameters::mlp_value));
                EXPECT_EQ(i / cfg.d_model, 5u);
            }
    EXPECT_EQ(nonzero, cfg.d_model);
}

TEST(ModelTest, ConfigValidation) {
    auto c = tiny_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), ContractError);
    c = tiny_config();
    c.rmu_layer = 2;
    EXPECT_THROW(c.validate(), ContractError);
}
