#include "support.hpp"

#include "loclab/error.hpp"
#include "loclab/objectives.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace loclab;
using namespace loclab::testing;

namespace {

Parameters shifted_logits(const Parameters &p, std::uint64_t seed) {
    // logits = h U with U [d x V]; adding a_i to row i of U shifts every
    // logit of a position by the same amount h . a.
    Parameters out = p;
    auto &u = out.tensors()[out.unembedding_index()];
    const std::size_t d = u.shape[0], V = u.shape[1];
    Rng rng(seed);
    for (std::size_t i = 0; i < d; ++i) {
        const double a = rng.normal();
        for (std::size_t v = 0; v < V; ++v) u.data[i * V + v] += a;
    }
    return out;
}

double nll_by_hand(const Parameters &p, const Batch &b) {
    // Mean over all answer tokens of the negative log-likelihood, from a
    // plain forward pass per sequence.
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        std::vector<int> seq = b.prompts[i];
        seq.insert(seq.end(), b.answers[i].begin(), b.answers[i].end());
        const auto logits = forward(p, seq).logits;
        const std::size_t V = p.config().vocab_size;
        for (std::size_t j = 0; j < b.answers[i].size(); ++j) {
            const std::size_t row = b.prompts[i].size() + j - 1;
            double m = -1e300;
            for (std::size_t v = 0; v < V; ++v) m = std::max(m, logits.at(row, v));
            double z = 0.0;
            for (std::size_t v = 0; v < V; ++v) z += std::exp(logits.at(row, v) - m);
            total -= logits.at(row, static_cast<std::size_t>(b.answers[i][j])) - m - std::log(z);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

} // namespace

TEST(ObjectivesTest, NpoAtReferenceIsFourLnTwo) {
    const auto p = Parameters::init(tiny_config(3));
    Rng rng(1);
    const auto b = random_batch(rng, 16, 5, false);
    EXPECT_NEAR(npo_loss(p, p, b, 0.5), 4.0 * std::log(2.0), 1e-9);
    EXPECT_NEAR(npo_loss(p, p, b, 1.0), 2.0 * std::log(2.0), 1e-9);
}

TEST(ObjectivesTest, DpoAtEqualMarginsIsTwoLnTwo) {
    const auto p = Parameters::init(tiny_config(3));
    Rng rng(2);
    const auto b = random_batch(rng, 16, 5, true);
    EXPECT_NEAR(dpo_loss(p, p, b, 0.5), 2.0 * std::log(2.0), 1e-9);
}

TEST(ObjectivesTest, DpoRequiresPairs) {
    const auto p = Parameters::init(tiny_config(3));
    Rng rng(2);
    const auto b = random_batch(rng, 16, 2, false);
    EXPECT_THROW(dpo_loss(p, p, b, 0.5), ContractError);
}

TEST(ObjectivesTest, NllMatchesHandComputation) {
    const auto p = perturbed(Parameters::init(tiny_config(5)), 0.2, 6);
    Rng rng(3);
    const auto b = random_batch(rng, 16, 4, false);
    EXPECT_NEAR(nll_loss(p, b), nll_by_hand(p, b), 1e-10);
}

TEST(ObjectivesTest, WgaAlphaZeroIsNegativeSequenceLogProb) {
    // With alpha = 0 every weight is 1: minus the mean sequence log-probability.
    const auto p = perturbed(Parameters::init(tiny_config(5)), 0.2, 6);
    Rng rng(4);
    const auto b = random_batch(rng, 16, 4, false);
    const auto seq = sequence_log_probs(p, b.prompts, b.answers);
    double mean = 0.0;
    for (double v : seq) mean += v / static_cast<double>(seq.size());
    EXPECT_NEAR(wga_loss(p, b, 0.0), -mean, 1e-10);
}

TEST(ObjectivesTest, LossesAreShiftInvariant) {
    const auto p = perturbed(Parameters::init(tiny_config(7)), 0.2, 8);
    const auto ref = perturbed(p, 0.05, 9);
    const auto q = shifted_logits(p, 10);
    Rng rng(5);
    const auto b = random_batch(rng, 16, 4, true);
    EXPECT_NEAR(npo_loss(p, ref, b, 0.5), npo_loss(q, ref, b, 0.5), 1e-9);
    EXPECT_NEAR(dpo_loss(p, ref, b, 0.5), dpo_loss(q, ref, b, 0.5), 1e-9);
    EXPECT_NEAR(nll_loss(p, b), nll_loss(q, b), 1e-9);
}

TEST(ObjectivesTest, RmuDirectionIsUnitAndDeterministic) {
    const auto u = sample_rmu_direction(16, 3);
    double n = 0.0;
    for (double v : u) {
        EXPECT_GE(v, 0.0);
        n += v * v;
    }
    EXPECT_NEAR(n, 1.0, 1e-12);
    EXPECT_EQ(u, sample_rmu_direction(16, 3));
}

TEST(ObjectivesTest, DistillLossZeroAgainstItself) {
    const auto p = Parameters::init(tiny_config(2));
    Rng rng(6);
    const auto f = random_batch(rng, 16, 3, false);
    const auto r = random_batch(rng, 16, 3, false);
    EXPECT_EQ(l2_distill_loss(p, p, f, r, 2.0), 0.0);
    for (double v : mlp_output_residuals(p, p, f)) EXPECT_EQ(v, 0.0);
    EXPECT_GT(l2_distill_loss(p, perturbed(p, 0.1, 1), f, r, 2.0), 0.0);
}

TEST(ObjectivesTest, GradientsMatchFiniteDifferences) {
    const auto cfg = tiny_config(21);
    const auto p = Parameters::init(cfg);
    const auto other = perturbed(p, 0.05, 22);
    Rng rng(23);
    const auto b = random_batch(rng, 16, 3, true);
    const auto r = random_batch(rng, 16, 2, false);
    const auto dir = sample_rmu_direction(cfg.d_model, 24);
    const auto ref = sequence_log_probs(other, b.prompts, b.answers);
    const auto rw = sequence_log_probs(other, b.prompts, b.win);
    const auto rl = sequence_log_probs(other, b.prompts, b.lose);
    auto check = [&](auto graph_loss, auto value) {
        ModelGraph g(p, true);
        backward(graph_loss(g));
        return check_gradient(p, g.gradients(), value).rel_error;
    };
    EXPECT_LT(check([&](const ModelGraph &g) { return wga_loss(g, b, 0.1); },
                    [&](const Parameters &q) { return wga_loss(q, b, 0.1); }),
              1e-4);
    EXPECT_LT(check([&](const ModelGraph &g) { return npo_loss(g, b, ref, 0.5); },
                    [&](const Parameters &q) { return npo_loss(q, other, b, 0.5); }),
              1e-4);
    EXPECT_LT(check([&](const ModelGraph &g) { return dpo_loss(g, b, rw, rl, 0.5); },
                    [&](const Parameters &q) { return dpo_loss(q, other, b, 0.5); }),
              1e-4);
    EXPECT_LT(check([&](const ModelGraph &g) { return rmu_loss(g, b, 1, 2.0, dir); },
                    [&](const Parameters &q) { return rmu_loss(q, b, 1, 2.0, dir); }),
              1e-4);
    EXPECT_LT(check([&](const ModelGraph &g) { return l2_distill_loss(g, other, b, r, 2.0); },
                    [&](const Parameters &q) { return l2_distill_loss(q, other, b, r, 2.0); }),
              1e-4);
}

TEST(ObjectivesTest, UnlearningObjectiveAscendsWga) {
    const auto p = perturbed(Parameters::init(tiny_config(2)), 0.1, 3);
    Rng rng(7);
    const auto b = random_batch(rng, 16, 3, false);
    ObjectiveConfig oc;
    oc.rmu_layer = 1;
    ModelGraph g(p, false);
    EXPECT_NEAR(unlearning_objective(Objective::wga, g, b, oc, nullptr).item(), -wga_loss(p, b, oc.wga_alpha), 1e-12);
    EXPECT_THROW(unlearning_objective(Objective::npo, g, b, oc, nullptr), ContractError);
}

TEST(ObjectivesTest, BatchValidation) {
    Batch b;
    b.prompts = {{5}};
    b.answers = {{}};
    EXPECT_THROW(b.validate(), ContractError);
    ObjectiveConfig oc;
    oc.npo_beta = 0.0;
    EXPECT_THROW(oc.validate(), ContractError);
}
