#pragma once

// Helpers shared by the unit tests and the acceptance binary: tiny models,
// random batches, a central-difference gradient and brute-force oracles.

#include "loclab/data.hpp"
#include "loclab/model.hpp"
#include "loclab/objectives.hpp"
#include "loclab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <set>
#include <vector>

namespace loclab::testing {

inline ModelConfig tiny_config(std::uint64_t seed = 1, std::size_t vocab = 16) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.vocab_size = vocab;
    c.max_seq_len = 24;
    c.rmu_layer = 1;
    c.seed = seed;
    return c;
}

inline std::vector<int> random_tokens(Rng &rng, std::size_t n, std::size_t vocab) {
    std::vector<int> out(n);
    for (auto &t : out)
        t = Tokenizer::n_special + static_cast<int>(rng.below(vocab - Tokenizer::n_special));
    return out;
}

inline Batch random_batch(Rng &rng, std::size_t vocab, std::size_t n, bool pairs) {
    Batch b;
    for (std::size_t i = 0; i < n; ++i) {
        b.prompts.push_back(random_tokens(rng, 2 + rng.below(3), vocab));
        b.answers.push_back(random_tokens(rng, 1 + rng.below(4), vocab));
        if (pairs) {
            b.win.push_back(random_tokens(rng, 1 + rng.below(4), vocab));
            b.lose.push_back(b.answers.back());
        }
    }
    return b;
}

// Adds Gaussian noise to every parameter; used to build reference/gold models
// that differ from the trained one.
inline Parameters perturbed(const Parameters &p, double sd, std::uint64_t seed) {
    Parameters out = p;
    Rng rng(seed);
    for (auto &t : out.tensors())
        for (auto &v : t.data) v += rng.normal(0.0, sd);
    return out;
}

struct GradCheck {
    double rel_error = 0.0;
    double grad_norm = 0.0;
};

// Compares an analytic gradient with central differences over every entry.
inline GradCheck check_gradient(const Parameters &params, const Gradients &analytic,
                                const std::function<double(const Parameters &)> &loss, double eps = 1e-5) {
    Parameters work = params;
    double diff2 = 0.0, a2 = 0.0, f2 = 0.0;
    for (std::size_t t = 0; t < work.size(); ++t) {
        auto &data = work.tensors()[t].data;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + eps;
            const double up = loss(work);
            data[i] = saved - eps;
            const double down = loss(work);
            data[i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double an = analytic.tensors()[t].data[i];
            diff2 += (fd - an) * (fd - an);
            a2 += an * an;
            f2 += fd * fd;
        }
    }
    const double scale = std::max({std::sqrt(a2), std::sqrt(f2), 1e-12});
    return {std::sqrt(diff2) / scale, std::sqrt(a2)};
}

// k* by trying every prefix length with greedy decoding.
inline std::size_t brute_force_k_star(const Parameters &params, const std::vector<int> &x, const std::vector<int> &y) {
    for (std::size_t k = 0; k < y.size(); ++k) {
        std::vector<int> prefix = x;
        prefix.insert(prefix.end(), y.begin(), y.begin() + static_cast<std::ptrdiff_t>(k));
        const auto cont = greedy_decode(params, prefix, y.size() - k);
        if (std::equal(cont.begin(), cont.end(), y.begin() + static_cast<std::ptrdiff_t>(k))) return k;
    }
    return y.size();
}

inline bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

inline bool bit_identical(const Parameters &a, const Parameters &b) {
    if (a.size() != b.size()) return false;
    for (std::size_t t = 0; t < a.size(); ++t) {
        const auto &x = a.tensors()[t].data;
        const auto &y = b.tensors()[t].data;
        if (x.size() != y.size()) return false;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!same_bits(x[i], y[i])) return false;
    }
    return true;
}

// Exhaustive check, independent of UpdateMask: every entry outside the
// masked W_V rows/weights is bit-identical. Returns the number of violating
// entries; `changed_inside` receives how many masked entries moved.
inline std::size_t outside_mask_violations(const Parameters &before, const Parameters &after,
                                           const ValueVectorMask &mask, std::size_t *changed_inside = nullptr) {
    const auto &cfg = before.config();
    std::set<std::pair<std::size_t, std::size_t>> rows;
    for (const auto &id : mask.vectors()) rows.insert({id.layer, id.index});
    const std::set<std::size_t> weights(mask.weights().begin(), mask.weights().end());
    std::size_t violations = 0, changed = 0;
    for (std::size_t t = 0; t < before.size(); ++t) {
        std::ptrdiff_t layer = -1;
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            if (before.layer_index(l, Parameters::mlp_value) == t) layer = static_cast<std::ptrdiff_t>(l);
        const auto &x = before.tensors()[t].data;
        const auto &y = after.tensors()[t].data;
        for (std::size_t i = 0; i < x.size(); ++i) {
            bool inside = false;
            if (layer >= 0) {
                const auto l = static_cast<std::size_t>(layer);
                if (mask.mode() == MaskMode::value_vector) inside = rows.count({l, i / cfg.d_model}) != 0;
                else inside = weights.count(l * cfg.d_ff * cfg.d_model + i) != 0;
            }
            const bool same = same_bits(x[i], y[i]);
            if (!inside && !same) ++violations;
            if (inside && !same) ++changed;
        }
    }
    if (changed_inside) *changed_inside = changed;
    return violations;
}

} // namespace loclab::testing
