#include "loclab/stats.hpp"

#include "loclab/error.hpp"
#include "loclab/rng.hpp"

#include <algorithm>
#include <cmath>

namespace loclab {

double smoothed_p_value(std::size_t extreme, std::size_t n_rounds) {
    return (1.0 + static_cast<double>(extreme)) / (1.0 + static_cast<double>(n_rounds));
}

TestResult aues_permutation_test(const MixCurve &a, const MixCurve &b, std::size_t n_rounds, std::uint64_t seed,
                                 bool extend) {
    if (n_rounds < 100) throw ContractError("permutation test needs at least 100 rounds");
    if (a.points.size() != b.points.size()) throw ContractError("curves have different alpha grids");
    for (std::size_t i = 0; i < a.points.size(); ++i)
        if (std::abs(a.points[i].alpha - b.points[i].alpha) > 1e-12)
            throw ContractError("curves have different alpha grids");
    const std::size_t n = a.points.size();
    std::vector<std::pair<double, double>> pa(n), pb(n);
    for (std::size_t i = 0; i < n; ++i) {
        pa[i] = {a.points[i].fs, a.points[i].rs};
        pb[i] = {b.points[i].fs, b.points[i].rs};
    }
    TestResult r;
    r.n_rounds = n_rounds;
    r.seed = seed;
    r.observed = std::abs(aues(pa, extend) - aues(pb, extend));
    std::size_t extreme = 0;
    std::vector<std::pair<double, double>> xa(n), xb(n);
    for (std::size_t round = 0; round < n_rounds; ++round) {
        Rng rng(Rng::derive_seed(seed, round));
        for (std::size_t i = 0; i < n; ++i) {
            const bool swap = rng.bernoulli(0.5);
            xa[i] = swap ? pb[i] : pa[i];
            xb[i] = swap ? pa[i] : pb[i];
        }
        const double d = std::abs(aues(xa, extend) - aues(xb, extend));
        if (d >= r.observed - kStatTolerance) ++extreme;
    }
    r.p_value = smoothed_p_value(extreme, n_rounds);
    return r;
}

double mu95_sorted(std::vector<std::pair<double, double>> mu_fq, double mu_initial) {
    std::stable_sort(mu_fq.begin(), mu_fq.end(), [](const auto &x, const auto &y) { return x.first > y.first; });
    return mu95(mu_fq, mu_initial);
}

TestResult mu95_bootstrap_test(const std::vector<std::pair<double, double>> &a,
                               const std::vector<std::pair<double, double>> &b, std::size_t n_rounds,
                               std::uint64_t seed, double mu_initial_a, double mu_initial_b) {
    if (n_rounds < 100) throw ContractError("bootstrap test needs at least 100 rounds");
    if (a.empty() || b.empty()) throw ContractError("bootstrap test needs points in both groups");
    TestResult r;
    r.n_rounds = n_rounds;
    r.seed = seed;
    r.observed = std::abs(mu95_sorted(a, mu_initial_a) - mu95_sorted(b, mu_initial_b));
    std::vector<std::pair<double, double>> pool = a;
    pool.insert(pool.end(), b.begin(), b.end());
    const std::size_t cap = n_rounds / 2;
    std::size_t extreme = 0;
    for (std::size_t round = 0; round < n_rounds; ++round) {
        const Rng base(Rng::derive_seed(seed, round));
        for (std::uint64_t attempt = 0;; ++attempt) {
            auto shuffled = pool;
            Rng rng = base.split(attempt);
            rng.shuffle(shuffled);
            const std::vector<std::pair<double, double>> ga(shuffled.begin(),
                                                            shuffled.begin() + static_cast<std::ptrdiff_t>(a.size()));
            const std::vector<std::pair<double, double>> gb(shuffled.begin() + static_cast<std::ptrdiff_t>(a.size()),
                                                            shuffled.end());
            try {
                const double d = std::abs(mu95_sorted(ga, mu_initial_a) - mu95_sorted(gb, mu_initial_b));
                if (d >= r.observed - kStatTolerance) ++extreme;
                break;
            } catch (const InsufficientUnlearningError &) {
                if (++r.redraws > cap)
                    throw InstabilityError("MU95 resampling needed more than " + std::to_string(cap) +
                                           " redraws in " + std::to_string(n_rounds) + " rounds");
            }
        }
    }
    r.p_value = smoothed_p_value(extreme, n_rounds);
    return r;
}

} // namespace loclab
