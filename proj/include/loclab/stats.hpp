#pragma once

// Monte-Carlo significance tests comparing two scenarios: a paired
// permutation test on AUES and a pooled resampling test on MU95.
//
// Round r draws from Rng::derive_seed(seed, r), so results do not depend on
// how rounds are scheduled. p-values use add-one smoothing:
// p = (1 + #{null |delta| >= observed}) / (1 + n_rounds).

#include "loclab/evaluation.hpp"

#include <cstdint>
#include <utility>
#include <vector>

namespace loclab {

struct TestResult {
    double observed = 0.0; // |statistic(A) - statistic(B)|
    double p_value = 1.0;
    std::size_t n_rounds = 0;
    std::uint64_t seed = 0;
    std::size_t redraws = 0;
};

// Null-distribution entries within this distance of the observed value
// count as "at least as extreme".
inline constexpr double kStatTolerance = 1e-12;

double smoothed_p_value(std::size_t extreme, std::size_t n_rounds);

// Each round swaps the (FS, RS) points of A and B at every alpha index with
// probability 1/2 and records |AUES(A') - AUES(B')|.
TestResult aues_permutation_test(const MixCurve &a, const MixCurve &b, std::size_t n_rounds = 10000,
                                 std::uint64_t seed = 0, bool extend = true);

// Points are (MU, FQ). Both groups are ordered by MU descending before MU95
// is read off, for the observed statistic and for every resampled group.
// Each round shuffles the pooled points and splits them back into groups of
// the original sizes; a round whose group never crosses its threshold is
// redrawn. More than n_rounds / 2 redraws raises InstabilityError.
TestResult mu95_bootstrap_test(const std::vector<std::pair<double, double>> &a,
                               const std::vector<std::pair<double, double>> &b, std::size_t n_rounds,
                               std::uint64_t seed, double mu_initial_a, double mu_initial_b);

// MU95 of points sorted by MU descending.
double mu95_sorted(std::vector<std::pair<double, double>> mu_fq, double mu_initial);

} // namespace loclab
