#pragma once

// Training and unlearning losses. Every loss has two entry points: one over a
// ModelGraph (differentiable, used by the optimizers) and one over plain
// Parameters that returns the value.
//
// Sequence log-probabilities are sums over answer tokens only; the question
// part of each sequence never enters a loss.

#include "loclab/data.hpp"
#include "loclab/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace loclab {

struct ObjectiveConfig {
    double wga_alpha = 0.1;
    double npo_beta = 0.5;
    double dpo_beta = 0.5;
    std::size_t rmu_layer = 2;
    double rmu_scale = 2.0;
    // Unit vector of length d_model. Empty means "sample from rmu_seed".
    std::vector<double> rmu_direction;
    std::uint64_t rmu_seed = 0;
    double lambda_retain = 2.0;
    double l2_alpha = 2.0;

    void validate() const;
};

// Uniform draw from [0,1)^d, scaled to unit norm.
std::vector<double> sample_rmu_direction(std::size_t d_model, std::uint64_t seed);

enum class Objective { nll, wga, npo, dpo, rmu };

std::string to_string(Objective objective);
Objective objective_from_string(const std::string &name);

enum class Provenance { forget, retain };

struct Batch {
    std::vector<std::vector<int>> prompts;
    std::vector<std::vector<int>> answers;
    // DPO pairs: win is the refusal, lose the original answer.
    std::vector<std::vector<int>> win;
    std::vector<std::vector<int>> lose;
    Provenance provenance = Provenance::forget;

    std::size_t size() const { return prompts.size(); }
    bool has_pairs() const { return !win.empty(); }

    static Batch from_examples(const std::vector<Example> &examples, Provenance provenance,
                               bool with_pairs = false);
    // Checks shapes; throws ContractError on empty answers or missing pairs.
    void validate(bool need_pairs = false) const;
};

// Token log-probabilities of answers[i] given prompts[i], concatenated in
// batch order, with offsets delimiting each sequence's tokens.
struct AnswerLogProbs {
    Tensor token_logp;
    std::vector<std::size_t> offsets;
};

AnswerLogProbs answer_log_probs(const ModelGraph &graph, const std::vector<std::vector<int>> &prompts,
                                const std::vector<std::vector<int>> &answers);
// Summed per sequence, no gradient.
std::vector<double> sequence_log_probs(const Parameters &params, const std::vector<std::vector<int>> &prompts,
                                       const std::vector<std::vector<int>> &answers);

Tensor nll_loss(const ModelGraph &graph, const Batch &batch);
Tensor wga_loss(const ModelGraph &graph, const Batch &batch, double alpha);
// ref_logp: summed reference log-probabilities of batch.answers.
Tensor npo_loss(const ModelGraph &graph, const Batch &batch, const std::vector<double> &ref_logp, double beta);
Tensor dpo_loss(const ModelGraph &graph, const Batch &batch, const std::vector<double> &ref_win,
                const std::vector<double> &ref_lose, double beta);
Tensor rmu_loss(const ModelGraph &graph, const Batch &batch, std::size_t layer, double scale,
                const std::vector<double> &direction);
// Forget term plus l2_alpha times the retain term (skipped when retain is empty).
Tensor l2_distill_loss(const ModelGraph &graph, const Parameters &gold, const Batch &forget,
                       const Batch &retain, double l2_alpha);

double nll_loss(const Parameters &params, const Batch &batch);
double wga_loss(const Parameters &params, const Batch &batch, double alpha);
double npo_loss(const Parameters &params, const Parameters &reference, const Batch &batch, double beta);
double dpo_loss(const Parameters &params, const Parameters &reference, const Batch &batch, double beta);
double rmu_loss(const Parameters &params, const Batch &batch, std::size_t layer, double scale,
                const std::vector<double> &direction);
double l2_distill_loss(const Parameters &params, const Parameters &gold, const Batch &forget, const Batch &retain,
                       double l2_alpha);

// Per-layer mean over positions of ||M_a - M_b||^2.
std::vector<double> mlp_output_residuals(const MLPTrace &a, const MLPTrace &b);
std::vector<double> mlp_output_residuals(const Parameters &params, const Parameters &gold, const Batch &batch);

// The quantity an unlearning optimizer minimizes for `objective` on a forget
// batch. WGA is ascended: the minimized quantity is -wga_loss. NPO and DPO
// need the reference model.
Tensor unlearning_objective(Objective objective, const ModelGraph &graph, const Batch &batch,
                            const ObjectiveConfig &config, const Parameters *reference);

} // namespace loclab
