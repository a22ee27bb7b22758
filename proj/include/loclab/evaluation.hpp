#pragma once

// Extraction strength, truth-ratio based quality/utility scores, mixing
// sweeps and the curve summaries built on them.

#include "loclab/data.hpp"
#include "loclab/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace loclab {

// ES = 1 - k*/|y|, with k* the shortest answer prefix from which greedy
// decoding reproduces the rest of y. Computed from one teacher-forced pass:
// the continuation from prefix k matches iff every position j >= k predicts
// y_j, so k* is one past the last mispredicted position.
double extraction_strength(const Parameters &params, std::span<const int> x, std::span<const int> y);

// k* itself, in [0, |y|].
std::size_t minimal_prefix(const Parameters &params, std::span<const int> x, std::span<const int> y);

// Per-example statistics gathered in packed passes.
struct ExampleStats {
    double es = 0.0;
    double answer_logp = 0.0; // mean per-token log-probability of the answer
    double truth_ratio = 0.0; // NaN when not requested or unavailable
};

std::vector<ExampleStats> example_stats(const Parameters &params, const std::vector<Example> &examples,
                                        bool want_truth_ratio);

double forget_strength(const Parameters &params, const std::vector<Example> &forget);
double retain_strength(const Parameters &params, const std::vector<Example> &retain);

// geometric mean of length-normalized perturbed-answer probabilities over the
// length-normalized paraphrase probability.
double truth_ratio(const Parameters &params, const Example &example);
// Same from per-token mean log-probabilities.
double truth_ratio_from_logp(double paraphrase_mean_logp, std::span<const double> perturbed_mean_logp);

struct KsResult {
    double statistic = 0.0;
    double log_p = 0.0;
};

double ks_statistic(std::span<const double> a, std::span<const double> b);
// ln Q_KS(lambda), Q_KS(lambda) = 2 sum_{j>=1} (-1)^(j-1) exp(-2 j^2 lambda^2).
double ks_log_q(double lambda);
// Asymptotic p-value with lambda = (sqrt(ne) + 0.12 + 0.11/sqrt(ne)) D.
KsResult ks_test(std::span<const double> a, std::span<const double> b);
// Exact P(D >= d) by lattice-path counting; both samples must have <= 25 values.
KsResult ks_test_exact(std::span<const double> a, std::span<const double> b);

// ln p of the two-sample KS test on forget-set truth ratios. Identical
// samples give 0.
double forget_quality_from_ratios(std::span<const double> candidate, std::span<const double> gold,
                                  bool exact = false);
double forget_quality(const Parameters &params, const Parameters &gold, const std::vector<Example> &forget,
                      bool exact = false);

// Harmonic mean of the two components; 0 if either is 0.
double harmonic_utility(double answer_prob, double inverse_ratio);
double model_utility(const Parameters &params, const std::vector<Example> &retain);
double model_utility_from_stats(const std::vector<ExampleStats> &stats);

struct CurvePoint {
    double alpha = 0.0;
    double fs = 0.0;
    double rs = 0.0;
    double mu = 0.0;
    double fq = 0.0;
    double es_forget = 0.0;
    double es_retain = 0.0;
};

struct MixCurve {
    std::vector<CurvePoint> points;
    std::string label;

    void validate() const;
    // Columns alpha,fs,rs,mu,fq.
    void save_csv(const std::filesystem::path &path) const;
};

struct SweepData {
    std::vector<Example> forget;
    std::vector<Example> retain;
    // Truth ratios of the gold (retain-only) model on `forget`.
    std::vector<double> gold_forget_ratios;
    bool exact_ks = false;
};

SweepData make_sweep_data(const Parameters &gold, std::vector<Example> forget, std::vector<Example> retain);

CurvePoint evaluate_point(const Parameters &params, const SweepData &data, double alpha);

std::vector<double> mixing_grid(double step);

MixCurve mixing_sweep(const Parameters &original, const Parameters &updated, double step, const SweepData &data);

// Trapezoidal area of RS over FS, points sorted by FS (duplicates keep the
// largest RS). With extend the curve runs flat to FS = 0 and FS = 1;
// otherwise only the observed span is integrated.
double aues(const MixCurve &curve, bool extend = true);
double aues(std::vector<std::pair<double, double>> fs_rs, bool extend = true);

// FQ where MU first falls to 0.95 * mu_initial, interpolating linearly
// between the bracketing pair. (mu, fq) pairs are walked in the given order.
double mu95(std::span<const std::pair<double, double>> mu_fq, double mu_initial);
double mu95(const MixCurve &curve, double mu_initial);

} // namespace loclab
