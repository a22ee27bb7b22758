#pragma once

// Optimizers and the masked training pipelines: retain-only fine-tuning,
// forget-fact injection into a region, unlearning and distillation.

#include "loclab/data.hpp"
#include "loclab/model.hpp"
#include "loclab/objectives.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace loclab {

enum class OptimizerKind { adamw, sgd };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_from_string(const std::string &name);

struct TrainConfig {
    double lr = 1e-3;
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    double weight_decay = 0.01;
    OptimizerKind optimizer = OptimizerKind::adamw;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    // Memorization target for train_full / inject_forget (ES on the trained set).
    double target_es = 0.9;
    // Unlearning stops once FS reaches this value.
    double stop_fs = 0.95;
    // Weight of the retain NLL during injection.
    double lambda_retain = 2.0;

    void validate() const;
};

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double loss = 0.0;
    double fs = 0.0; // NaN when not measured at this step
    double rs = 0.0; // NaN when not measured at this step
};

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double es_forget = 0.0; // NaN when there is no forget set
    double es_retain = 0.0; // NaN when there is no retain set
    std::vector<double> residuals; // distillation only: per-layer MLP-output residual
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::vector<double> initial_residuals;
    std::string stop_reason;
    bool reached_target = false;
    double wall_seconds = 0.0;

    // Columns step,loss,fs,rs.
    void save_csv(const std::filesystem::path &path) const;
};

struct TrainResult {
    Parameters params;
    TrainLog log;
};

// Decoupled-weight-decay Adam, or plain SGD with decoupled decay. With an
// update mask, entries outside the mask are never written.
class Optimizer {
public:
    Optimizer(const Parameters &params, const TrainConfig &config, std::optional<UpdateMask> mask = std::nullopt);
    void step(Parameters &params, const Gradients &grads);
    std::size_t steps_taken() const { return t_; }

private:
    TrainConfig config_;
    std::optional<UpdateMask> mask_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::size_t t_ = 0;
};

// NLL fine-tuning on `examples` with every parameter trainable. Stops early
// once ES on `examples` reaches cfg.target_es (checked at epoch ends) when
// early_stop is set.
TrainResult fit_nll(const Parameters &init, const std::vector<Example> &examples, const TrainConfig &cfg,
                    bool early_stop);

// Fine-tunes the pretrained model on the retain set with all parameters.
TrainResult train_full(const Parameters &pretrained, const std::vector<Example> &retain, const TrainConfig &cfg);

// Trains only inside `target` on NLL(forget) + lambda_retain * NLL(retain).
TrainResult inject_forget(const Parameters &gold, const std::vector<Example> &forget,
                          const std::vector<Example> &retain, const ValueVectorMask &target, const TrainConfig &cfg);

// Minimizes the unlearning objective on forget batches, updates confined to
// `mask`. FS is checked after every step; training stops at cfg.stop_fs or
// at the epoch budget. `reference` is the fixed model for NPO/DPO.
TrainResult unlearn(const Parameters &original, const std::vector<Example> &forget,
                    const std::vector<Example> &retain, const ValueVectorMask &mask, Objective objective,
                    const ObjectiveConfig &ocfg, const TrainConfig &cfg, const Parameters *reference);

// Pulls the per-layer MLP outputs toward those of `gold` on forget inputs
// (plus l2_alpha times the same on retain inputs), updates confined to `mask`.
TrainResult distill_unlearn(const Parameters &original, const Parameters &gold, const ValueVectorMask &mask,
                            const std::vector<Example> &forget, const std::vector<Example> &retain,
                            const ObjectiveConfig &ocfg, const TrainConfig &cfg);

// True when every entry outside `mask` is bit-identical in a and b.
bool identical_outside(const Parameters &a, const Parameters &b, const ValueVectorMask &mask);

} // namespace loclab
