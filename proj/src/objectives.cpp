#include "loclab/objectives.hpp"

#include "loclab/error.hpp"
#include "loclab/rng.hpp"

#include <cmath>

namespace loclab {

namespace o = ops;

void ObjectiveConfig::validate() const {
    if (!(npo_beta > 0.0) || !(dpo_beta > 0.0)) throw ContractError("preference betas must be positive");
    if (!(rmu_scale > 0.0)) throw ContractError("rmu scale must be positive");
    if (!(wga_alpha >= 0.0)) throw ContractError("wga alpha must be non-negative");
    if (!(lambda_retain >= 0.0) || !(l2_alpha >= 0.0)) throw ContractError("retain weights must be non-negative");
    if (!rmu_direction.empty()) {
        double n2 = 0.0;
        for (double v : rmu_direction) n2 += v * v;
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-9) throw ContractError("rmu direction must have unit norm");
    }
}

std::vector<double> sample_rmu_direction(std::size_t d_model, std::uint64_t seed) {
    if (d_model == 0) throw ContractError("rmu direction needs d_model > 0");
    Rng rng(seed);
    std::vector<double> u(d_model);
    double n2 = 0.0;
    for (auto &v : u) {
        v = rng.uniform();
        n2 += v * v;
    }
    const double norm = std::sqrt(n2);
    if (norm == 0.0) throw GenerationError("sampled an all-zero rmu direction");
    for (auto &v : u) v /= norm;
    return u;
}

std::string to_string(Objective objective) {
    switch (objective) {
    case Objective::nll:
        return "nll";
    case Objective::wga:
        return "wga";
    case Objective::npo:
        return "npo";
    case Objective::dpo:
        return "dpo";
    case Objective::rmu:
        return "rmu";
    }
    return "?";
}

Objective objective_from_string(const std::string &name) {
    for (auto o : {Objective::nll, Objective::wga, Objective::npo, Objective::dpo, Objective::rmu})
        if (to_string(o) == name) return o;
    throw ParseError("unknown objective '" + name + "'");
}

Batch Batch::from_examples(const std::vector<Example> &examples, Provenance provenance, bool with_pairs) {
    Batch b;
    b.provenance = provenance;
    for (const auto &e : examples) {
        b.prompts.push_back(e.prompt);
        b.answers.push_back(e.answer);
        if (with_pairs) {
            if (e.idk.empty()) throw ContractError("example for '" + e.entity + "' has no refusal answer");
            b.win.push_back(e.idk);
            b.lose.push_back(e.answer);
        }
    }
    return b;
}

void Batch::validate(bool need_pairs) const {
    if (prompts.empty()) throw ContractError("empty batch");
    if (answers.size() != prompts.size()) throw ContractError("batch has mismatched prompt/answer counts");
    for (std::size_t i = 0; i < size(); ++i) {
        if (prompts[i].empty()) throw ContractError("batch item " + std::to_string(i) + " has an empty prompt");
        if (answers[i].empty()) throw ContractError("batch item " + std::to_string(i) + " has an empty answer");
    }
    if (need_pairs) {
        if (win.size() != size() || lose.size() != size())
            throw ContractError("preference loss needs a win/lose pair for every batch item");
        for (std::size_t i = 0; i < size(); ++i)
            if (win[i].empty() || lose[i].empty())
                throw ContractError("batch item " + std::to_string(i) + " has an empty preference answer");
    }
}

namespace {

PackedBatch pack_full(const std::vector<std::vector<int>> &prompts, const std::vector<std::vector<int>> &answers) {
    PackedBatch pb;
    std::vector<int> seq;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        seq = prompts[i];
        seq.insert(seq.end(), answers[i].begin(), answers[i].end());
        pb.add(seq);
    }
    return pb;
}

Tensor constant(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor::from({n}, std::move(values));
}

Tensor sequence_sums(const ModelGraph &graph, const std::vector<std::vector<int>> &prompts,
                     const std::vector<std::vector<int>> &answers) {
    auto lp = answer_log_probs(graph, prompts, answers);
    return o::segment_sum(lp.token_logp, lp.offsets);
}

// Sum over layers of mean-over-rows ||M - M_gold||^2.
Tensor trace_distance(const MLPTrace &trace, const MLPTrace &gold) {
    Tensor total;
    for (std::size_t l = 0; l < trace.layers.size(); ++l) {
        const auto &m = trace.layers[l].mlp_output;
        Tensor term = o::scale(o::sum(o::square(o::sub(m, gold.layers[l].mlp_output))),
                               1.0 / static_cast<double>(m.rows()));
        total = total.defined() ? o::add(total, term) : term;
    }
    return total;
}

std::vector<double> resolved_direction(const ObjectiveConfig &cfg, std::size_t d_model) {
    if (!cfg.rmu_direction.empty()) return cfg.rmu_direction;
    return sample_rmu_direction(d_model, cfg.rmu_seed);
}

} // namespace

AnswerLogProbs answer_log_probs(const ModelGraph &graph, const std::vector<std::vector<int>> &prompts,
                                const std::vector<std::vector<int>> &answers) {
    if (prompts.size() != answers.size()) throw ContractError("mismatched prompt/answer counts");
    AnswerLogProbs out;
    out.offsets.push_back(0);
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    std::size_t start = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (prompts[i].empty()) throw ContractError("answer log-probabilities need a non-empty prompt");
        if (answers[i].empty()) throw ContractError("answer log-probabilities need a non-empty answer");
        const std::size_t p = prompts[i].size();
        for (std::size_t j = 0; j < answers[i].size(); ++j) {
            rows.push_back(start + p - 1 + j);
            targets.push_back(answers[i][j]);
        }
        start += p + answers[i].size();
        out.offsets.push_back(rows.size());
    }
    auto res = graph.forward(pack_full(prompts, answers));
    out.token_logp = o::log_softmax_gather(res.logits, rows, targets);
    return out;
}

std::vector<double> sequence_log_probs(const Parameters &params, const std::vector<std::vector<int>> &prompts,
                                       const std::vector<std::vector<int>> &answers) {
    ModelGraph graph(params, false);
    auto t = sequence_sums(graph, prompts, answers);
    return {t.data().begin(), t.data().end()};
}

Tensor nll_loss(const ModelGraph &graph, const Batch &batch) {
    batch.validate();
    auto lp = answer_log_probs(graph, batch.prompts, batch.answers);
    return o::neg(o::mean(lp.token_logp));
}

Tensor wga_loss(const ModelGraph &graph, const Batch &batch, double alpha) {
    batch.validate();
    auto lp = answer_log_probs(graph, batch.prompts, batch.answers);
    Tensor weighted = o::mul(o::exp(o::scale(lp.token_logp, alpha)), lp.token_logp);
    return o::neg(o::mean(o::segment_sum(weighted, lp.offsets)));
}

Tensor npo_loss(const ModelGraph &graph, const Batch &batch, const std::vector<double> &ref_logp, double beta) {
    batch.validate();
    if (!(beta > 0.0)) throw ContractError("npo beta must be positive");
    if (ref_logp.size() != batch.size()) throw ContractError("reference log-probabilities do not match the batch");
    Tensor ratio = o::sub(sequence_sums(graph, batch.prompts, batch.answers), constant(ref_logp));
    return o::scale(o::mean(o::log_sigmoid(o::scale(ratio, -beta))), -2.0 / beta);
}

Tensor dpo_loss(const ModelGraph &graph, const Batch &batch, const std::vector<double> &ref_win,
                const std::vector<double> &ref_lose, double beta) {
    batch.validate(true);
    if (!(beta > 0.0)) throw ContractError("dpo beta must be positive");
    const std::size_t n = batch.size();
    if (ref_win.size() != n || ref_lose.size() != n)
        throw ContractError("reference log-probabilities do not match the batch");
    // One packed pass: win answers first, then lose answers.
    auto prompts = batch.prompts;
    prompts.insert(prompts.end(), batch.prompts.begin(), batch.prompts.end());
    auto answers = batch.win;
    answers.insert(answers.end(), batch.lose.begin(), batch.lose.end());
    Tensor seq = sequence_sums(graph, prompts, answers);
    std::vector<std::size_t> first(n), second(n);
    for (std::size_t i = 0; i < n; ++i) {
        first[i] = i;
        second[i] = n + i;
    }
    Tensor d_win = o::sub(o::gather(seq, first), constant(ref_win));
    Tensor d_lose = o::sub(o::gather(seq, second), constant(ref_lose));
    return o::scale(o::mean(o::log_sigmoid(o::scale(o::sub(d_win, d_lose), beta))), -1.0 / beta);
}

Tensor rmu_loss(const ModelGraph &graph, const Batch &batch, std::size_t layer, double scale,
                const std::vector<double> &direction) {
    batch.validate();
    const auto &cfg = graph.config();
    if (layer >= cfg.n_layers) throw ContractError("rmu layer " + std::to_string(layer) + " outside the model");
    if (direction.size() != cfg.d_model) throw DimensionError("rmu direction must have d_model entries");
    auto res = graph.forward(pack_full(batch.prompts, batch.answers), true);
    const Tensor &h = res.trace->layers[layer].hidden;
    std::vector<double> target(cfg.d_model);
    for (std::size_t j = 0; j < cfg.d_model; ++j) target[j] = -scale * direction[j];
    Tensor diff = o::add_row(h, Tensor::from({1, cfg.d_model}, std::move(target)));
    return o::scale(o::sum(o::square(diff)), 1.0 / static_cast<double>(h.rows()));
}

Tensor l2_distill_loss(const ModelGraph &graph, const Parameters &gold, const Batch &forget, const Batch &retain,
                       double l2_alpha) {
    if (!(graph.config() == gold.config())) throw ContractError("distillation target has a different configuration");
    forget.validate();
    ModelGraph gold_graph(gold, false);
    auto part = [&](const Batch &b) {
        const auto packed = pack_full(b.prompts, b.answers);
        auto mine = graph.forward(packed, true);
        auto ref = gold_graph.forward(packed, true);
        return trace_distance(*mine.trace, *ref.trace);
    };
    Tensor loss = part(forget);
    if (retain.size() > 0 && l2_alpha > 0.0) {
        retain.validate();
        loss = o::add(loss, o::scale(part(retain), l2_alpha));
    }
    return loss;
}

double nll_loss(const Parameters &params, const Batch &batch) { return nll_loss(ModelGraph(params, false), batch).item(); }

double wga_loss(const Parameters &params, const Batch &batch, double alpha) {
    return wga_loss(ModelGraph(params, false), batch, alpha).item();
}

double npo_loss(const Parameters &params, const Parameters &reference, const Batch &batch, double beta) {
    const auto ref = sequence_log_probs(reference, batch.prompts, batch.answers);
    return npo_loss(ModelGraph(params, false), batch, ref, beta).item();
}

double dpo_loss(const Parameters &params, const Parameters &reference, const Batch &batch, double beta) {
    batch.validate(true);
    const auto ref_win = sequence_log_probs(reference, batch.prompts, batch.win);
    const auto ref_lose = sequence_log_probs(reference, batch.prompts, batch.lose);
    return dpo_loss(ModelGraph(params, false), batch, ref_win, ref_lose, beta).item();
}

double rmu_loss(const Parameters &params, const Batch &batch, std::size_t layer, double scale,
                const std::vector<double> &direction) {
    return rmu_loss(ModelGraph(params, false), batch, layer, scale, direction).item();
}

double l2_distill_loss(const Parameters &params, const Parameters &gold, const Batch &forget, const Batch &retain,
                       double l2_alpha) {
    return l2_distill_loss(ModelGraph(params, false), gold, forget, retain, l2_alpha).item();
}

std::vector<double> mlp_output_residuals(const MLPTrace &a, const MLPTrace &b) {
    if (a.layers.size() != b.layers.size()) throw ContractError("traces have different layer counts");
    std::vector<double> out;
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const auto x = a.layers[l].mlp_output.data();
        const auto y = b.layers[l].mlp_output.data();
        if (x.size() != y.size()) throw DimensionError("traces have different shapes");
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
        out.push_back(s / static_cast<double>(a.layers[l].mlp_output.rows()));
    }
    return out;
}

std::vector<double> mlp_output_residuals(const Parameters &params, const Parameters &gold, const Batch &batch) {
    if (!(params.config() == gold.config())) throw ContractError("distillation target has a different configuration");
    batch.validate();
    const auto packed = pack_full(batch.prompts, batch.answers);
    auto a = ModelGraph(params, false).forward(packed, true);
    auto b = ModelGraph(gold, false).forward(packed, true);
    return mlp_output_residuals(*a.trace, *b.trace);
}

Tensor unlearning_objective(Objective objective, const ModelGraph &graph, const Batch &batch,
                            const ObjectiveConfig &config, const Parameters *reference) {
    auto need_reference = [&]() -> const Parameters & {
        if (!reference) throw ContractError(to_string(objective) + " needs a reference model");
        return *reference;
    };
    switch (objective) {
    case Objective::nll:
        return nll_loss(graph, batch);
    case Objective::wga:
        return o::neg(wga_loss(graph, batch, config.wga_alpha));
    case Objective::npo:
        return npo_loss(graph, batch, sequence_log_probs(need_reference(), batch.prompts, batch.answers),
                        config.npo_beta);
    case Objective::dpo: {
        batch.validate(true);
        const auto &ref = need_reference();
        return dpo_loss(graph, batch, sequence_log_probs(ref, batch.prompts, batch.win),
                        sequence_log_probs(ref, batch.prompts, batch.lose), config.dpo_beta);
    }
    case Objective::rmu:
        return rmu_loss(graph, batch, config.rmu_layer, config.rmu_scale,
                        resolved_direction(config, graph.config().d_model));
    }
    throw ContractError("unknown objective");
}

} // namespace loclab
