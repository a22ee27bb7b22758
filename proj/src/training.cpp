#include "loclab/training.hpp"

#include "loclab/error.hpp"
#include "loclab/evaluation.hpp"
#include "loclab/rng.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace loclab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < n; b += batch_size)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
    return out;
}

std::vector<Example> pick(const std::vector<Example> &examples, const std::vector<std::size_t> &idx) {
    std::vector<Example> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(examples[i]);
    return out;
}

template <typename LossFn> std::pair<double, Gradients> loss_and_grad(const Parameters &params, LossFn &&fn) {
    ModelGraph graph(params, true);
    Tensor loss = fn(graph);
    backward(loss);
    return {loss.item(), graph.gradients()};
}

void check_finite(double loss, const Parameters &params, std::size_t step) {
    if (!std::isfinite(loss))
        throw TrainingError("loss became non-finite at step " + std::to_string(step), static_cast<long>(step));
    if (!params.all_finite())
        throw TrainingError("parameters became non-finite at step " + std::to_string(step), static_cast<long>(step));
}

double mean_es(const Parameters &params, const std::vector<Example> &examples) {
    if (examples.empty()) return kNaN;
    double s = 0.0;
    for (const auto &st : example_stats(params, examples, false)) s += st.es;
    return s / static_cast<double>(examples.size());
}

double sum_of(const std::vector<double> &v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// Cycles through a shuffled copy of the retain set to pair every forget
// batch with a retain batch of the same size.
class RetainStream {
public:
    RetainStream(const std::vector<Example> &retain, std::uint64_t seed) : retain_(retain), rng_(seed) { refill(); }

    std::vector<Example> next(std::size_t n) {
        std::vector<Example> out;
        n = std::min(n, retain_.size());
        while (out.size() < n) {
            if (pos_ == order_.size()) refill();
            out.push_back(retain_[order_[pos_++]]);
        }
        return out;
    }

private:
    void refill() {
        order_.resize(retain_.size());
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(order_);
        pos_ = 0;
    }

    const std::vector<Example> &retain_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

} // namespace

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::adamw ? "adamw" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string &name) {
    if (name == "adamw") return OptimizerKind::adamw;
    if (name == "sgd") return OptimizerKind::sgd;
    throw ParseError("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("learning rate must be positive");
    if (epochs < 1) throw ContractError("training needs at least one epoch");
    if (batch_size < 1) throw ContractError("batch size must be positive");
    if (!(weight_decay >= 0.0)) throw ContractError("weight decay must be non-negative");
    if (!(lambda_retain >= 0.0)) throw ContractError("lambda_retain must be non-negative");
}

void TrainLog::save_csv(const std::filesystem::path &path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "step,loss,fs,rs\n";
    for (const auto &s : steps) out << s.step << ',' << s.loss << ',' << s.fs << ',' << s.rs << '\n';
}

// ---------------------------------------------------------------- optimizer

Optimizer::Optimizer(const Parameters &params, const TrainConfig &config, std::optional<UpdateMask> mask)
    : config_(config), mask_(std::move(mask)) {
    config_.validate();
    if (mask_ && mask_->allowed.size() != params.size()) throw ContractError("update mask does not match parameters");
    for (const auto &t : params.tensors()) {
        m_.emplace_back(t.data.size(), 0.0);
        if (config_.optimizer == OptimizerKind::adamw) v_.emplace_back(t.data.size(), 0.0);
    }
}

void Optimizer::step(Parameters &params, const Gradients &grads) {
    if (grads.size() != params.size()) throw ContractError("gradient layout does not match parameters");
    ++t_;
    const double lr = config_.lr, wd = config_.weight_decay;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto &p = params.tensors()[i].data;
        const auto &g = grads.tensors()[i].data;
        const std::uint8_t *allowed = mask_ ? mask_->allowed[i].data() : nullptr;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (allowed && !allowed[j]) continue;
            if (config_.optimizer == OptimizerKind::sgd) {
                p[j] -= lr * (g[j] + wd * p[j]);
                continue;
            }
            auto &m = m_[i][j];
            auto &v = v_[i][j];
            m = b1 * m + (1.0 - b1) * g[j];
            v = b2 * v + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * ((m / c1) / (std::sqrt(v / c2) + config_.eps) + wd * p[j]);
        }
    }
}

// ---------------------------------------------------------------- pipelines

TrainResult fit_nll(const Parameters &init, const std::vector<Example> &examples, const TrainConfig &cfg,
                    bool early_stop) {
    cfg.validate();
    if (examples.empty()) throw ContractError("training on an empty set");
    const auto start = Clock::now();
    TrainResult res{init, {}};
    Optimizer opt(res.params, cfg);
    const Rng rng(cfg.seed);
    std::size_t step = 0;
    res.log.stop_reason = "epoch budget";
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        const auto batches = epoch_batches(examples.size(), cfg.batch_size, rng.split(epoch));
        for (const auto &idx : batches) {
            const auto batch = Batch::from_examples(pick(examples, idx), Provenance::retain);
            auto [loss, grads] = loss_and_grad(res.params, [&](const ModelGraph &g) { return nll_loss(g, batch); });
            check_finite(loss, res.params, step);
            opt.step(res.params, grads);
            check_finite(loss, res.params, step);
            res.log.steps.push_back({step, epoch, loss, kNaN, kNaN});
            total += loss;
            ++step;
        }
        const double es = mean_es(res.params, examples);
        res.log.epochs.push_back({epoch, total / static_cast<double>(batches.size()), kNaN, es, {}});
        res.log.steps.back().rs = es;
        if (es >= cfg.target_es) {
            res.log.reached_target = true;
            if (early_stop) {
                res.log.stop_reason = "target reached";
                break;
            }
        }
    }
    res.log.wall_seconds = seconds_since(start);
    return res;
}

TrainResult train_full(const Parameters &pretrained, const std::vector<Example> &retain, const TrainConfig &cfg) {
    return fit_nll(pretrained, retain, cfg, true);
}

TrainResult inject_forget(const Parameters &gold, const std::vector<Example> &forget,
                          const std::vector<Example> &retain, const ValueVectorMask &target, const TrainConfig &cfg) {
    cfg.validate();
    if (target.empty()) throw ContractError("injection needs a non-empty target region");
    if (forget.empty()) throw ContractError("injection needs a non-empty forget set");
    const auto start = Clock::now();
    TrainResult res{gold, {}};
    Optimizer opt(res.params, cfg, UpdateMask::from(gold, target));
    const Rng rng(cfg.seed);
    RetainStream stream(retain, Rng::derive_seed(cfg.seed, 0x7265u));
    const bool anchor = cfg.lambda_retain > 0.0 && !retain.empty();
    std::size_t step = 0;
    res.log.stop_reason = "epoch budget";
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        const auto batches = epoch_batches(forget.size(), cfg.batch_size, rng.split(epoch));
        for (const auto &idx : batches) {
            const auto fb = Batch::from_examples(pick(forget, idx), Provenance::forget);
            Batch rb;
            if (anchor) rb = Batch::from_examples(stream.next(idx.size()), Provenance::retain);
            auto [loss, grads] = loss_and_grad(res.params, [&](const ModelGraph &g) {
                Tensor l = nll_loss(g, fb);
                if (anchor) l = ops::add(l, ops::scale(nll_loss(g, rb), cfg.lambda_retain));
                return l;
            });
            check_finite(loss, res.params, step);
            opt.step(res.params, grads);
            check_finite(loss, res.params, step);
            res.log.steps.push_back({step, epoch, loss, kNaN, kNaN});
            total += loss;
            ++step;
        }
        const double es_f = mean_es(res.params, forget);
        res.log.epochs.push_back({epoch, total / static_cast<double>(batches.size()), es_f, kNaN, {}});
        res.log.steps.back().fs = 1.0 - es_f;
        if (es_f >= cfg.target_es) {
            res.log.reached_target = true;
            res.log.stop_reason = "target reached";
            break;
        }
    }
    if (!retain.empty()) {
        res.log.epochs.back().es_retain = mean_es(res.params, retain);
        res.log.steps.back().rs = res.log.epochs.back().es_retain;
    }
    res.log.wall_seconds = seconds_since(start);
    return res;
}

TrainResult unlearn(const Parameters &original, const std::vector<Example> &forget,
                    const std::vector<Example> &retain, const ValueVectorMask &mask, Objective objective,
                    const ObjectiveConfig &ocfg, const TrainConfig &cfg, const Parameters *reference) {
    cfg.validate();
    ocfg.validate();
    if (mask.empty()) throw ContractError("unlearning needs a non-empty mask");
    if (forget.empty()) throw ContractError("unlearning needs a non-empty forget set");
    if (objective == Objective::nll) throw ContractError("nll is a learning objective, not an unlearning one");
    ObjectiveConfig oc = ocfg;
    if (objective == Objective::rmu && oc.rmu_direction.empty())
        oc.rmu_direction = sample_rmu_direction(original.config().d_model, oc.rmu_seed);
    const bool pairs = objective == Objective::dpo;

    const auto start = Clock::now();
    TrainResult res{original, {}};
    Optimizer opt(res.params, cfg, UpdateMask::from(original, mask));
    const Rng rng(cfg.seed);
    std::size_t step = 0;
    double fs = 1.0 - mean_es(res.params, forget);
    res.log.stop_reason = "epoch budget";
    if (fs >= cfg.stop_fs) {
        res.log.reached_target = true;
        res.log.stop_reason = "target reached";
    }
    for (std::size_t epoch = 0; epoch < cfg.epochs && !res.log.reached_target; ++epoch) {
        double total = 0.0;
        std::size_t n_batches = 0;
        for (const auto &idx : epoch_batches(forget.size(), cfg.batch_size, rng.split(epoch))) {
            const auto batch = Batch::from_examples(pick(forget, idx), Provenance::forget, pairs);
            auto [loss, grads] = loss_and_grad(res.params, [&](const ModelGraph &g) {
                return unlearning_objective(objective, g, batch, oc, reference);
            });
            check_finite(loss, res.params, step);
            opt.step(res.params, grads);
            check_finite(loss, res.params, step);
            fs = 1.0 - mean_es(res.params, forget);
            res.log.steps.push_back({step, epoch, loss, fs, kNaN});
            total += loss;
            ++n_batches;
            ++step;
            if (fs >= cfg.stop_fs) {
                res.log.reached_target = true;
                res.log.stop_reason = "target reached";
                break;
            }
        }
        const double rs = mean_es(res.params, retain);
        res.log.epochs.push_back({epoch, total / static_cast<double>(n_batches), 1.0 - fs, rs, {}});
        res.log.steps.back().rs = rs;
    }
    res.log.wall_seconds = seconds_since(start);
    return res;
}

TrainResult distill_unlearn(const Parameters &original, const Parameters &gold, const ValueVectorMask &mask,
                            const std::vector<Example> &forget, const std::vector<Example> &retain,
                            const ObjectiveConfig &ocfg, const TrainConfig &cfg) {
    cfg.validate();
    ocfg.validate();
    if (mask.empty()) throw ContractError("distillation needs a non-empty mask");
    if (forget.empty()) throw ContractError("distillation needs a non-empty forget set");
    if (!(original.config() == gold.config())) throw ContractError("distillation target has a different configuration");
    const auto start = Clock::now();
    TrainResult res{original, {}};
    Optimizer opt(res.params, cfg, UpdateMask::from(original, mask));
    const Rng rng(cfg.seed);
    RetainStream stream(retain, Rng::derive_seed(cfg.seed, 0x7265u));
    const bool anchor = ocfg.l2_alpha > 0.0 && !retain.empty();
    const auto forget_all = Batch::from_examples(forget, Provenance::forget);
    res.log.initial_residuals = mlp_output_residuals(res.params, gold, forget_all);
    std::size_t step = 0;
    res.log.stop_reason = "epoch budget";
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        std::size_t n_batches = 0;
        for (const auto &idx : epoch_batches(forget.size(), cfg.batch_size, rng.split(epoch))) {
            const auto fb = Batch::from_examples(pick(forget, idx), Provenance::forget);
            Batch rb;
            if (anchor) rb = Batch::from_examples(stream.next(idx.size()), Provenance::retain);
            auto [loss, grads] = loss_and_grad(res.params, [&](const ModelGraph &g) {
                return l2_distill_loss(g, gold, fb, rb, anchor ? ocfg.l2_alpha : 0.0);
            });
            check_finite(loss, res.params, step);
            opt.step(res.params, grads);
            check_finite(loss, res.params, step);
            res.log.steps.push_back({step, epoch, loss, kNaN, kNaN});
            total += loss;
            ++n_batches;
            ++step;
        }
        EpochRecord rec{epoch, total / static_cast<double>(n_batches), mean_es(res.params, forget),
                        mean_es(res.params, retain), mlp_output_residuals(res.params, gold, forget_all)};
        res.log.steps.back().fs = 1.0 - rec.es_forget;
        res.log.steps.back().rs = rec.es_retain;
        res.log.epochs.push_back(std::move(rec));
    }
    const double init = sum_of(res.log.initial_residuals);
    res.log.reached_target = init == 0.0 || sum_of(res.log.epochs.back().residuals) <= 0.1 * init;
    res.log.wall_seconds = seconds_since(start);
    return res;
}

bool identical_outside(const Parameters &a, const Parameters &b, const ValueVectorMask &mask) {
    if (a.size() != b.size()) return false;
    const auto allowed = UpdateMask::from(a, mask);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto &x = a.tensors()[i].data;
        const auto &y = b.tensors()[i].data;
        if (x.size() != y.size()) return false;
        for (std::size_t j = 0; j < x.size(); ++j)
            if (!allowed.allowed[i][j] && std::bit_cast<std::uint64_t>(x[j]) != std::bit_cast<std::uint64_t>(y[j]))
                return false;
    }
    return true;
}

} // namespace loclab
