#include "loclab/evaluation.hpp"

#include "loclab/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace loclab {

namespace {

constexpr std::size_t kRowsPerPass = 2048;

struct SeqJob {
    std::span<const int> prompt;
    std::span<const int> answer;
};

struct SeqResult {
    double sum_logp = 0.0;
    std::size_t k_star = 0;
};

void score_pass(const ModelGraph &graph, const std::vector<SeqJob> &jobs, std::size_t begin, std::size_t end,
                std::vector<SeqResult> &out) {
    PackedBatch packed;
    std::vector<std::size_t> starts;
    std::vector<int> seq;
    for (std::size_t i = begin; i < end; ++i) {
        seq.assign(jobs[i].prompt.begin(), jobs[i].prompt.end());
        seq.insert(seq.end(), jobs[i].answer.begin(), jobs[i].answer.end());
        starts.push_back(packed.add(seq));
    }
    const auto res = graph.forward(packed);
    const auto logits = res.logits.data();
    const std::size_t V = graph.config().vocab_size;
    for (std::size_t i = begin; i < end; ++i) {
        const auto &job = jobs[i];
        SeqResult r;
        for (std::size_t j = 0; j < job.answer.size(); ++j) {
            const std::size_t row = starts[i - begin] + job.prompt.size() - 1 + j;
            const auto z = logits.subspan(row * V, V);
            const double mx = *std::max_element(z.begin(), z.end());
            double se = 0.0;
            for (double v : z) se += std::exp(v - mx);
            const int target = job.answer[j];
            if (target < 0 || static_cast<std::size_t>(target) >= V) throw IndexError("answer token outside vocabulary");
            r.sum_logp += z[static_cast<std::size_t>(target)] - mx - std::log(se);
            if (argmax_lowest(z) != target) r.k_star = j + 1;
        }
        out[i] = r;
    }
}

std::vector<SeqResult> score_sequences(const Parameters &params, const std::vector<SeqJob> &jobs) {
    for (const auto &j : jobs) {
        if (j.prompt.empty()) throw ContractError("scoring needs a non-empty prompt");
        if (j.answer.empty()) throw ContractError("scoring needs a non-empty answer");
    }
    std::vector<SeqResult> out(jobs.size());
    ModelGraph graph(params, false);
    std::size_t begin = 0;
    while (begin < jobs.size()) {
        std::size_t end = begin, rows = 0;
        while (end < jobs.size() && (end == begin || rows + jobs[end].prompt.size() + jobs[end].answer.size() <= kRowsPerPass)) {
            rows += jobs[end].prompt.size() + jobs[end].answer.size();
            ++end;
        }
        score_pass(graph, jobs, begin, end, out);
        begin = end;
    }
    return out;
}

} // namespace

std::size_t minimal_prefix(const Parameters &params, std::span<const int> x, std::span<const int> y) {
    if (y.empty()) throw ContractError("extraction strength needs a non-empty answer");
    return score_sequences(params, {SeqJob{x, y}}).front().k_star;
}

double extraction_strength(const Parameters &params, std::span<const int> x, std::span<const int> y) {
    const auto k = minimal_prefix(params, x, y);
    return 1.0 - static_cast<double>(k) / static_cast<double>(y.size());
}

double truth_ratio_from_logp(double paraphrase_mean_logp, std::span<const double> perturbed_mean_logp) {
    if (perturbed_mean_logp.empty()) throw ContractError("truth ratio needs perturbed answers");
    double m = 0.0;
    for (double v : perturbed_mean_logp) m += v;
    m /= static_cast<double>(perturbed_mean_logp.size());
    return std::exp(m - paraphrase_mean_logp);
}

std::vector<ExampleStats> example_stats(const Parameters &params, const std::vector<Example> &examples,
                                        bool want_truth_ratio) {
    std::vector<SeqJob> jobs;
    std::vector<std::size_t> first(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto &e = examples[i];
        first[i] = jobs.size();
        jobs.push_back({e.prompt, e.answer});
        if (want_truth_ratio && !e.paraphrase.empty() && !e.perturbed.empty()) {
            jobs.push_back({e.prompt, e.paraphrase});
            for (const auto &p : e.perturbed) jobs.push_back({e.prompt, p});
        }
    }
    const auto scored = score_sequences(params, jobs);
    std::vector<ExampleStats> out(examples.size());
    std::vector<double> pert;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto &e = examples[i];
        const auto &a = scored[first[i]];
        out[i].es = 1.0 - static_cast<double>(a.k_star) / static_cast<double>(e.answer.size());
        out[i].answer_logp = a.sum_logp / static_cast<double>(e.answer.size());
        out[i].truth_ratio = std::numeric_limits<double>::quiet_NaN();
        if (want_truth_ratio && !e.paraphrase.empty() && !e.perturbed.empty()) {
            const double para = scored[first[i] + 1].sum_logp / static_cast<double>(e.paraphrase.size());
            pert.clear();
            for (std::size_t k = 0; k < e.perturbed.size(); ++k)
                pert.push_back(scored[first[i] + 2 + k].sum_logp / static_cast<double>(e.perturbed[k].size()));
            out[i].truth_ratio = truth_ratio_from_logp(para, pert);
        }
    }
    return out;
}

double forget_strength(const Parameters &params, const std::vector<Example> &forget) {
    if (forget.empty()) throw ContractError("forget strength needs a non-empty forget set");
    double s = 0.0;
    for (const auto &st : example_stats(params, forget, false)) s += st.es;
    return 1.0 - s / static_cast<double>(forget.size());
}

double retain_strength(const Parameters &params, const std::vector<Example> &retain) {
    if (retain.empty()) throw ContractError("retain strength needs a non-empty retain set");
    double s = 0.0;
    for (const auto &st : example_stats(params, retain, false)) s += st.es;
    return s / static_cast<double>(retain.size());
}

double truth_ratio(const Parameters &params, const Example &example) {
    if (example.paraphrase.empty() || example.perturbed.empty())
        throw ContractError("truth ratio needs a paraphrase and at least one perturbed answer");
    return example_stats(params, {example}, true).front().truth_ratio;
}

// ------------------------------------------------------------------- KS

double ks_statistic(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw ContractError("KS test needs two non-empty samples");
    std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    const double n = static_cast<double>(x.size()), m = static_cast<double>(y.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < x.size() && j < y.size()) {
        const double v = std::min(x[i], y[j]);
        while (i < x.size() && x[i] == v) ++i;
        while (j < y.size() && y[j] == v) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / n - static_cast<double>(j) / m));
    }
    return d;
}

double ks_log_q(double lambda) {
    if (!(lambda > 0.0)) return 0.0;
    if (lambda < 1.18) {
        // Jacobi-theta form, fast for small lambda.
        const double c = std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
        double s = 0.0;
        for (int j = 1; j <= 50; ++j) {
            const double t = std::exp(-static_cast<double>((2 * j - 1) * (2 * j - 1)) * c);
            s += t;
            if (t < 1e-300) break;
        }
        const double cdf = std::sqrt(2.0 * std::numbers::pi) / lambda * s;
        if (cdf <= 0.0) return 0.0;
        return std::min(0.0, std::log1p(-std::min(cdf, 1.0 - 1e-300)));
    }
    // ln Q = ln 2 - 2 lambda^2 + ln(1 + sum_{j>=2} (-1)^(j-1) exp(-2 (j^2 - 1) lambda^2))
    double tail = 0.0;
    for (int j = 2; j <= 100; ++j) {
        const double t = std::exp(-2.0 * static_cast<double>(j * j - 1) * lambda * lambda);
        tail += (j % 2 == 0 ? -t : t);
        if (t < 1e-300) break;
    }
    return std::min(0.0, std::numbers::ln2 - 2.0 * lambda * lambda + std::log1p(tail));
}

KsResult ks_test(std::span<const double> a, std::span<const double> b) {
    KsResult r;
    r.statistic = ks_statistic(a, b);
    const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
    const double ne = n * m / (n + m);
    const double lambda = (std::sqrt(ne) + 0.12 + 0.11 / std::sqrt(ne)) * r.statistic;
    r.log_p = ks_log_q(lambda);
    return r;
}

KsResult ks_test_exact(std::span<const double> a, std::span<const double> b) {
    const std::size_t n = a.size(), m = b.size();
    if (n > 25 || m > 25) throw ContractError("exact KS p-values are limited to samples of at most 25");
    KsResult r;
    r.statistic = ks_statistic(a, b);
    if (r.statistic <= 0.0) return r;
    // Count monotone lattice paths that stay strictly inside |i/n - j/m| < D.
    const double d = r.statistic - 1e-12;
    std::vector<std::vector<double>> paths(n + 1, std::vector<double>(m + 1, 0.0));
    auto inside = [&](std::size_t i, std::size_t j) {
        return std::abs(static_cast<double>(i) / static_cast<double>(n) - static_cast<double>(j) / static_cast<double>(m)) < d;
    };
    for (std::size_t i = 0; i <= n; ++i)
        for (std::size_t j = 0; j <= m; ++j) {
            if (!inside(i, j)) continue;
            if (i == 0 && j == 0) {
                paths[i][j] = 1.0;
                continue;
            }
            paths[i][j] = (i > 0 ? paths[i - 1][j] : 0.0) + (j > 0 ? paths[i][j - 1] : 0.0);
        }
    const double total = std::exp(std::lgamma(static_cast<double>(n + m + 1)) - std::lgamma(static_cast<double>(n + 1)) -
                                  std::lgamma(static_cast<double>(m + 1)));
    const double p = std::clamp(1.0 - paths[n][m] / total, std::numeric_limits<double>::min(), 1.0);
    r.log_p = std::log(p);
    return r;
}

double forget_quality_from_ratios(std::span<const double> candidate, std::span<const double> gold, bool exact) {
    if (candidate.size() < 5 || gold.size() < 5) throw ContractError("forget quality needs at least 5 records per side");
    for (double v : candidate)
        if (!std::isfinite(v)) throw DomainError("non-finite truth ratio");
    for (double v : gold)
        if (!std::isfinite(v)) throw DomainError("non-finite truth ratio");
    return exact ? ks_test_exact(candidate, gold).log_p : ks_test(candidate, gold).log_p;
}

double forget_quality(const Parameters &params, const Parameters &gold, const std::vector<Example> &forget,
                      bool exact) {
    auto ratios = [&](const Parameters &p) {
        std::vector<double> out;
        for (const auto &s : example_stats(p, forget, true)) out.push_back(s.truth_ratio);
        return out;
    };
    return forget_quality_from_ratios(ratios(params), ratios(gold), exact);
}

// --------------------------------------------------------------- utility

double harmonic_utility(double answer_prob, double inverse_ratio) {
    if (answer_prob <= 0.0 || inverse_ratio <= 0.0) return 0.0;
    return 2.0 / (1.0 / answer_prob + 1.0 / inverse_ratio);
}

double model_utility_from_stats(const std::vector<ExampleStats> &stats) {
    if (stats.empty()) throw ContractError("model utility needs a non-empty retain set");
    double prob = 0.0, inv = 0.0;
    std::size_t n_ratio = 0;
    for (const auto &s : stats) {
        prob += std::exp(s.answer_logp);
        if (std::isfinite(s.truth_ratio)) {
            inv += 1.0 / (1.0 + s.truth_ratio);
            ++n_ratio;
        }
    }
    if (n_ratio == 0) throw ContractError("model utility needs records with paraphrased and perturbed answers");
    return harmonic_utility(prob / static_cast<double>(stats.size()), inv / static_cast<double>(n_ratio));
}

double model_utility(const Parameters &params, const std::vector<Example> &retain) {
    return model_utility_from_stats(example_stats(params, retain, true));
}

// ----------------------------------------------------------------- curves

void MixCurve::validate() const {
    if (points.size() < 2) throw ContractError("a mixing curve needs at least two points");
    if (points.front().alpha != 0.0 || points.back().alpha != 1.0)
        throw ContractError("a mixing curve must run from alpha 0 to alpha 1");
    for (std::size_t i = 1; i < points.size(); ++i)
        if (!(points[i].alpha > points[i - 1].alpha)) throw ContractError("mixing coefficients must increase");
}

void MixCurve::save_csv(const std::filesystem::path &path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out.precision(17);
    out << "alpha,fs,rs,mu,fq\n";
    for (const auto &p : points) out << p.alpha << ',' << p.fs << ',' << p.rs << ',' << p.mu << ',' << p.fq << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

SweepData make_sweep_data(const Parameters &gold, std::vector<Example> forget, std::vector<Example> retain) {
    SweepData d;
    d.forget = std::move(forget);
    d.retain = std::move(retain);
    for (const auto &s : example_stats(gold, d.forget, true)) d.gold_forget_ratios.push_back(s.truth_ratio);
    return d;
}

CurvePoint evaluate_point(const Parameters &params, const SweepData &data, double alpha) {
    CurvePoint p;
    p.alpha = alpha;
    const auto fstats = example_stats(params, data.forget, true);
    const auto rstats = example_stats(params, data.retain, true);
    std::vector<double> ratios;
    double es_f = 0.0, es_r = 0.0;
    for (const auto &s : fstats) {
        es_f += s.es;
        ratios.push_back(s.truth_ratio);
    }
    for (const auto &s : rstats) es_r += s.es;
    p.es_forget = es_f / static_cast<double>(fstats.size());
    p.es_retain = es_r / static_cast<double>(rstats.size());
    p.fs = 1.0 - p.es_forget;
    p.rs = p.es_retain;
    p.mu = model_utility_from_stats(rstats);
    p.fq = forget_quality_from_ratios(ratios, data.gold_forget_ratios, data.exact_ks);
    return p;
}

std::vector<double> mixing_grid(double step) {
    if (!(step > 0.0 && step <= 0.5)) throw ContractError("mixing step must lie in (0, 0.5]");
    std::vector<double> grid;
    const double n = std::round(1.0 / step);
    if (std::abs(n * step - 1.0) < 1e-9) {
        const auto k = static_cast<std::size_t>(n);
        for (std::size_t i = 0; i <= k; ++i) grid.push_back(static_cast<double>(i) / n);
    } else {
        for (double a = 0.0; a < 1.0 - 1e-12; a = static_cast<double>(grid.size()) * step) grid.push_back(a);
        grid.push_back(1.0);
    }
    grid.back() = 1.0;
    return grid;
}

MixCurve mixing_sweep(const Parameters &original, const Parameters &updated, double step, const SweepData &data) {
    MixCurve curve;
    for (double a : mixing_grid(step)) curve.points.push_back(evaluate_point(mix(original, updated, a), data, a));
    return curve;
}

double aues(std::vector<std::pair<double, double>> pts, bool extend) {
    if (pts.size() < 2) throw ContractError("AUES needs at least two points");
    for (const auto &[fs, rs] : pts)
        if (!std::isfinite(fs) || !std::isfinite(rs)) throw DomainError("non-finite curve point");
    std::sort(pts.begin(), pts.end(), [](const auto &a, const auto &b) {
        return a.first != b.first ? a.first < b.first : a.second > b.second;
    });
    std::vector<std::pair<double, double>> uniq;
    for (const auto &p : pts)
        if (uniq.empty() || uniq.back().first != p.first) uniq.push_back(p);
    double area = 0.0;
    for (std::size_t i = 1; i < uniq.size(); ++i)
        area += (uniq[i].first - uniq[i - 1].first) * (uniq[i].second + uniq[i - 1].second) / 2.0;
    if (extend) {
        area += uniq.front().first * uniq.front().second;
        area += (1.0 - uniq.back().first) * uniq.back().second;
    }
    return area;
}

double aues(const MixCurve &curve, bool extend) {
    std::vector<std::pair<double, double>> pts;
    for (const auto &p : curve.points) pts.emplace_back(p.fs, p.rs);
    return aues(std::move(pts), extend);
}

double mu95(std::span<const std::pair<double, double>> mu_fq, double mu_initial) {
    if (mu_fq.empty()) throw ContractError("MU95 needs at least one point");
    const double thr = 0.95 * mu_initial;
    for (std::size_t i = 0; i < mu_fq.size(); ++i) {
        const auto [mu_a, fq_a] = mu_fq[i];
        if (mu_a == thr) return fq_a;
        if (i + 1 == mu_fq.size()) break;
        const auto [mu_b, fq_b] = mu_fq[i + 1];
        if ((mu_a - thr) * (mu_b - thr) < 0.0) return fq_a + (thr - mu_a) / (mu_b - mu_a) * (fq_b - fq_a);
    }
    double lo = mu_fq.front().first, hi = lo;
    for (const auto &[mu, fq] : mu_fq) {
        lo = std::min(lo, mu);
        hi = std::max(hi, mu);
    }
    throw InsufficientUnlearningError("MU never reaches 95% of its initial value " + std::to_string(mu_initial) +
                                          " (MU range " + std::to_string(lo) + " to " + std::to_string(hi) + ")",
                                      lo, hi);
}

double mu95(const MixCurve &curve, double mu_initial) {
    std::vector<std::pair<double, double>> pts;
    for (const auto &p : curve.points) pts.emplace_back(p.mu, p.fq);
    return mu95(pts, mu_initial);
}

} // namespace loclab
