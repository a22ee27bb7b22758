#include "loclab/localization.hpp"

#include "loclab/error.hpp"
#include "loclab/objectives.hpp"
#include "loclab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace loclab {

namespace {

constexpr std::size_t kChunk = 32;

std::size_t answer_tokens(const std::vector<Example> &examples, std::size_t begin, std::size_t end) {
    std::size_t n = 0;
    for (std::size_t i = begin; i < end; ++i) n += examples[i].answer.size();
    return n;
}

std::vector<double> value_gradient(const ModelGraph &graph, const Parameters &params) {
    const auto &cfg = params.config();
    std::vector<double> out;
    out.reserve(cfg.value_weight_count());
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto g = graph.leaves()[params.layer_index(l, Parameters::mlp_value)].grad();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

// Gradient over W_V of the token-mean NLL of `examples`, scaled by `sign`.
std::vector<double> mean_nll_value_gradient(const Parameters &params, const std::vector<Example> &examples,
                                            double sign) {
    if (examples.empty()) throw ContractError("gradient over an empty example set");
    ModelGraph graph(params, true);
    const double total = static_cast<double>(answer_tokens(examples, 0, examples.size()));
    for (std::size_t b = 0; b < examples.size(); b += kChunk) {
        const std::size_t e = std::min(examples.size(), b + kChunk);
        const std::vector<Example> part(examples.begin() + static_cast<std::ptrdiff_t>(b),
                                        examples.begin() + static_cast<std::ptrdiff_t>(e));
        const double weight = sign * static_cast<double>(answer_tokens(examples, b, e)) / total;
        backward(ops::scale(nll_loss(graph, Batch::from_examples(part, Provenance::forget)), weight));
    }
    return value_gradient(graph, params);
}

std::vector<Example> random_labels(const std::vector<Example> &examples, std::size_t vocab, Rng &rng) {
    if (vocab <= static_cast<std::size_t>(Tokenizer::n_special)) throw ContractError("vocabulary has no plain words");
    const std::size_t plain = vocab - Tokenizer::n_special;
    std::vector<Example> out = examples;
    for (auto &e : out)
        for (auto &t : e.answer) t = Tokenizer::n_special + static_cast<int>(rng.below(plain));
    return out;
}

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

} // namespace

std::string to_string(LocalizationMethod method) {
    switch (method) {
    case LocalizationMethod::random:
        return "random";
    case LocalizationMethod::activations:
        return "activations";
    case LocalizationMethod::memflex:
        return "memflex";
    case LocalizationMethod::wagle:
        return "wagle";
    }
    return "?";
}

LocalizationMethod localization_method_from_string(const std::string &name) {
    for (auto m : {LocalizationMethod::random, LocalizationMethod::activations, LocalizationMethod::memflex,
                   LocalizationMethod::wagle})
        if (to_string(m) == name) return m;
    throw ParseError("unknown localization method '" + name + "'");
}

ValueVectorId AttributionMap::id(std::size_t unit, const ModelConfig &config) const {
    if (mode == MaskMode::value_vector) return {unit / config.d_ff, unit % config.d_ff};
    const std::size_t per_layer = config.d_ff * config.d_model;
    return {unit / per_layer, unit % per_layer};
}

void AttributionMap::validate(const ModelConfig &config) const {
    const std::size_t n =
        mode == MaskMode::value_vector ? config.value_vector_count() : config.value_weight_count();
    if (scores.size() != n)
        throw DimensionError("attribution map has " + std::to_string(scores.size()) + " scores, model has " +
                             std::to_string(n) + " units");
    if (!secondary.empty() && secondary.size() != n) throw DimensionError("secondary key has the wrong length");
    for (double s : scores)
        if (!std::isfinite(s)) throw DomainError("attribution map holds a non-finite score");
}

void AttributionMap::save_csv(const std::filesystem::path &path, const ModelConfig &config) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << "layer,index,score,method\n";
    out.precision(17);
    for (std::size_t u = 0; u < scores.size(); ++u) {
        const auto vid = id(u, config);
        out << vid.layer << ',' << vid.index << ',' << scores[u] << ',' << method << '\n';
    }
}

void LocalizationConfig::validate() const {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("localization ratio must lie in (0, 1)");
    if (!(memflex_mu > -1.0 && memflex_mu <= 1.0)) throw ContractError("memflex mu must lie in (-1, 1]");
    if (memflex_rounds == 0) throw ContractError("memflex needs at least one perturbation round");
}

// ------------------------------------------------------------ activations

std::vector<double> activation_layer_scores(std::span<const double> coefficients, std::size_t rows,
                                            std::span<const double> value_norms) {
    const std::size_t d_ff = value_norms.size();
    if (rows == 0 || coefficients.size() != rows * d_ff) throw DimensionError("coefficient block has the wrong shape");
    std::vector<double> out(d_ff, 0.0);
    for (std::size_t t = 0; t < rows; ++t)
        for (std::size_t i = 0; i < d_ff; ++i) out[i] += std::abs(coefficients[t * d_ff + i]);
    for (std::size_t i = 0; i < d_ff; ++i) out[i] = out[i] / static_cast<double>(rows) * value_norms[i];
    return out;
}

void z_normalize_blocks(std::vector<double> &scores, std::size_t block) {
    if (block == 0 || scores.size() % block != 0) throw DimensionError("scores do not split into equal blocks");
    for (std::size_t b = 0; b < scores.size(); b += block) {
        double mean = 0.0;
        for (std::size_t i = b; i < b + block; ++i) mean += scores[i];
        mean /= static_cast<double>(block);
        double var = 0.0;
        for (std::size_t i = b; i < b + block; ++i) var += (scores[i] - mean) * (scores[i] - mean);
        const double sd = std::sqrt(var / static_cast<double>(block));
        for (std::size_t i = b; i < b + block; ++i) scores[i] = sd > 0.0 ? (scores[i] - mean) / sd : 0.0;
    }
}

std::vector<double> raw_activation_scores(const Parameters &params, const std::vector<Example> &forget) {
    if (forget.empty()) throw ContractError("activation scoring needs a non-empty forget set");
    const auto &cfg = params.config();
    std::vector<double> norms(cfg.value_vector_count());
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
        for (std::size_t i = 0; i < cfg.d_ff; ++i) norms[l * cfg.d_ff + i] = norm(params.value_vector(l, i));

    std::vector<double> raw(cfg.value_vector_count(), 0.0);
    ModelGraph graph(params, false);
    for (std::size_t b = 0; b < forget.size(); b += kChunk) {
        const std::size_t e = std::min(forget.size(), b + kChunk);
        PackedBatch packed;
        std::vector<std::pair<std::size_t, std::size_t>> spans; // first answer-predicting row, count
        for (std::size_t k = b; k < e; ++k) {
            if (forget[k].answer.empty() || forget[k].prompt.empty())
                throw ContractError("activation scoring needs prompts and answers");
            const auto start = packed.add(forget[k].full());
            spans.emplace_back(start + forget[k].prompt.size() - 1, forget[k].answer.size());
        }
        const auto res = graph.forward(packed, true);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const auto coeff = res.trace->layers[l].coefficients.data();
            const std::span<const double> layer_norms(norms.data() + l * cfg.d_ff, cfg.d_ff);
            for (const auto &[row, count] : spans) {
                const auto s = activation_layer_scores(coeff.subspan(row * cfg.d_ff, count * cfg.d_ff), count,
                                                       layer_norms);
                for (std::size_t i = 0; i < cfg.d_ff; ++i) raw[l * cfg.d_ff + i] += s[i];
            }
        }
    }
    for (auto &v : raw) v /= static_cast<double>(forget.size());
    return raw;
}

AttributionMap score_activations(const Parameters &params, const std::vector<Example> &forget) {
    AttributionMap map;
    map.method = "activations";
    map.normalization = "layer_z";
    map.scores = raw_activation_scores(params, forget);
    z_normalize_blocks(map.scores, params.config().d_ff);
    return map;
}

// ---------------------------------------------------------------- memflex

MemFlexGradients memflex_gradients(const Parameters &params, const std::vector<Example> &forget,
                                   const std::vector<Example> &retain, std::size_t rounds, std::uint64_t seed) {
    if (forget.empty() || retain.empty()) throw ContractError("memflex needs non-empty forget and retain sets");
    if (rounds == 0) throw ContractError("memflex needs at least one perturbation round");
    const std::size_t vocab = params.config().vocab_size;
    MemFlexGradients out;
    out.unlearn.assign(params.config().value_weight_count(), 0.0);
    out.retain.assign(out.unlearn.size(), 0.0);
    for (std::size_t r = 0; r < rounds; ++r) {
        Rng rng_f = Rng(seed).split(2 * r);
        Rng rng_r = Rng(seed).split(2 * r + 1);
        const auto gf = mean_nll_value_gradient(params, random_labels(forget, vocab, rng_f), 1.0);
        const auto gr = mean_nll_value_gradient(params, random_labels(retain, vocab, rng_r), 1.0);
        for (std::size_t j = 0; j < gf.size(); ++j) {
            out.unlearn[j] += gf[j] / static_cast<double>(rounds);
            out.retain[j] += gr[j] / static_cast<double>(rounds);
        }
    }
    return out;
}

AttributionMap memflex_map(const MemFlexGradients &grads, const ModelConfig &config, double mu, double sigma,
                           double ratio) {
    const std::size_t n = config.value_vector_count();
    const std::size_t d = config.d_model;
    if (grads.unlearn.size() != n * d || grads.retain.size() != n * d)
        throw DimensionError("memflex gradients do not match the model");
    std::vector<double> unl_norm(n);
    std::vector<bool> misaligned(n);
    for (std::size_t u = 0; u < n; ++u) {
        const std::span<const double> a(grads.unlearn.data() + u * d, d);
        const std::span<const double> b(grads.retain.data() + u * d, d);
        const double na = norm(a), nb = norm(b);
        double cosine = 1.0;
        if (na > 0.0 && nb > 0.0) cosine = std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / (na * nb);
        unl_norm[u] = na;
        misaligned[u] = cosine < mu;
    }
    if (sigma < 0.0) {
        // Midway between the k-th and (k+1)-th largest candidate norm.
        std::vector<double> cand;
        for (std::size_t u = 0; u < n; ++u)
            if (misaligned[u]) cand.push_back(unl_norm[u]);
        std::sort(cand.begin(), cand.end(), std::greater<>());
        const std::size_t k = selection_size(n, ratio);
        if (cand.size() <= k) sigma = 0.0;
        else sigma = 0.5 * (cand[k - 1] + cand[k]);
    }
    AttributionMap map;
    map.method = "memflex";
    map.normalization = "binary";
    map.scores.resize(n);
    for (std::size_t u = 0; u < n; ++u) map.scores[u] = (misaligned[u] && unl_norm[u] > sigma) ? 1.0 : 0.0;
    map.secondary = std::move(unl_norm);
    return map;
}

AttributionMap score_memflex(const Parameters &params, const std::vector<Example> &forget,
                             const std::vector<Example> &retain, const LocalizationConfig &cfg) {
    cfg.validate();
    if (cfg.mode != MaskMode::value_vector) throw ContractError("memflex scores value vectors only");
    const auto grads = memflex_gradients(params, forget, retain, cfg.memflex_rounds, cfg.seed);
    return memflex_map(grads, params.config(), cfg.memflex_mu, cfg.memflex_sigma, cfg.ratio);
}

// ------------------------------------------------------------------ wagle

std::vector<double> value_weights(const Parameters &params) {
    const auto &cfg = params.config();
    std::vector<double> out;
    out.reserve(cfg.value_weight_count());
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto &t = params.tensors()[params.layer_index(l, Parameters::mlp_value)].data;
        out.insert(out.end(), t.begin(), t.end());
    }
    return out;
}

WagleGradients wagle_gradients(const Parameters &params, const std::vector<Example> &forget,
                               const std::vector<Example> &retain) {
    WagleGradients g;
    g.forget = mean_nll_value_gradient(params, forget, -1.0);
    g.retain = mean_nll_value_gradient(params, retain, 1.0);
    return g;
}

double estimate_wagle_gamma(const Parameters &params, const std::vector<Example> &retain, std::size_t max_examples) {
    if (retain.empty()) throw ContractError("gamma estimation needs retain examples");
    const std::size_t n = std::min(retain.size(), std::max<std::size_t>(1, max_examples));
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto g = mean_nll_value_gradient(params, {retain[i]}, 1.0);
        for (double v : g) total += v * v;
        count += g.size();
    }
    const double gamma = total / static_cast<double>(count);
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw DomainError("estimated wagle gamma is not positive");
    return gamma;
}

AttributionMap wagle_map(const std::vector<double> &theta, const WagleGradients &grads, const ModelConfig &config,
                         double gamma, MaskMode mode) {
    if (!(gamma > 0.0)) throw ContractError("wagle gamma must be positive");
    const std::size_t w = config.value_weight_count();
    if (theta.size() != w || grads.forget.size() != w || grads.retain.size() != w)
        throw DimensionError("wagle inputs do not match the model");
    std::vector<double> per_weight(w);
    for (std::size_t j = 0; j < w; ++j)
        per_weight[j] = theta[j] * grads.forget[j] - grads.retain[j] * grads.forget[j] / gamma;
    AttributionMap map;
    map.method = "wagle";
    map.mode = mode;
    if (mode == MaskMode::individual_weight) {
        map.scores = std::move(per_weight);
        return map;
    }
    const std::size_t d = config.d_model;
    map.scores.assign(config.value_vector_count(), 0.0);
    for (std::size_t u = 0; u < map.scores.size(); ++u) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += per_weight[u * d + j];
        map.scores[u] = s / static_cast<double>(d);
    }
    return map;
}

AttributionMap score_wagle(const Parameters &params, const std::vector<Example> &forget,
                           const std::vector<Example> &retain, const LocalizationConfig &cfg) {
    cfg.validate();
    const double gamma =
        cfg.wagle_gamma > 0.0 ? cfg.wagle_gamma : estimate_wagle_gamma(params, retain, cfg.wagle_gamma_examples);
    return wagle_map(value_weights(params), wagle_gradients(params, forget, retain), params.config(), gamma,
                     cfg.mode);
}

// -------------------------------------------------------------- selection

std::size_t selection_size(std::size_t total, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("selection ratio must lie in (0, 1)");
    const double raw = ratio * static_cast<double>(total);
    // Absorb representation error so e.g. 0.1 * 520 selects 52, not 53.
    auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
    return std::clamp<std::size_t>(k, 1, total);
}

ValueVectorMask select_top_p(const AttributionMap &map, const ModelConfig &config, double ratio) {
    map.validate(config);
    const std::size_t n = map.scores.size();
    const std::size_t k = selection_size(n, ratio);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const bool has_secondary = !map.secondary.empty();
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (map.scores[a] != map.scores[b]) return map.scores[a] > map.scores[b];
        if (has_secondary && map.secondary[a] != map.secondary[b]) return map.secondary[a] > map.secondary[b];
        return a < b;
    });
    order.resize(k);
    if (map.mode == MaskMode::individual_weight) return ValueVectorMask::from_weights(config, order);
    std::vector<ValueVectorId> ids;
    for (auto u : order) ids.push_back(map.id(u, config));
    return ValueVectorMask::from_vectors(config, std::move(ids));
}

ValueVectorMask select_random(const ModelConfig &config, double ratio, std::uint64_t seed,
                              const ValueVectorMask *exclude, MaskMode mode) {
    const std::size_t n = mode == MaskMode::value_vector ? config.value_vector_count() : config.value_weight_count();
    const std::size_t k = selection_size(n, ratio);
    std::vector<std::uint8_t> taken(n, 0);
    if (exclude) {
        if (exclude->mode() == MaskMode::value_vector && mode == MaskMode::value_vector) {
            for (const auto &id : exclude->vectors()) taken[id.layer * config.d_ff + id.index] = 1;
        } else {
            if (mode == MaskMode::value_vector) throw ContractError("cannot exclude weights from a vector sample");
            for (auto w : exclude->weight_indices(config)) taken[w] = 1;
        }
    }
    std::vector<std::size_t> free;
    for (std::size_t u = 0; u < n; ++u)
        if (!taken[u]) free.push_back(u);
    if (free.size() < k)
        throw ContractError("only " + std::to_string(free.size()) + " free units for a region of " +
                            std::to_string(k));
    Rng rng(seed);
    // Partial Fisher-Yates: the first k slots are a uniform sample.
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(free.size() - i));
        std::swap(free[i], free[j]);
    }
    free.resize(k);
    if (mode == MaskMode::individual_weight) return ValueVectorMask::from_weights(config, free);
    std::vector<ValueVectorId> ids;
    for (auto u : free) ids.push_back({u / config.d_ff, u % config.d_ff});
    return ValueVectorMask::from_vectors(config, std::move(ids));
}

Region draw_region(const ModelConfig &config, double ratio, std::uint64_t target_seed, std::uint64_t random_seed) {
    Region r;
    r.target = select_random(config, ratio, target_seed);
    r.random = select_random(config, ratio, random_seed, &r.target);
    if (r.target.intersects(r.random)) throw ContractError("target and random regions overlap");
    return r;
}

ValueVectorMask localize(LocalizationMethod method, const Parameters &params, const std::vector<Example> &forget,
                         const std::vector<Example> &retain, const LocalizationConfig &cfg) {
    cfg.validate();
    const auto &mc = params.config();
    switch (method) {
    case LocalizationMethod::random:
        return select_random(mc, cfg.ratio, cfg.seed, nullptr, cfg.mode);
    case LocalizationMethod::activations:
        if (cfg.mode != MaskMode::value_vector) throw ContractError("activation scoring covers value vectors only");
        return select_top_p(score_activations(params, forget), mc, cfg.ratio);
    case LocalizationMethod::memflex:
        return select_top_p(score_memflex(params, forget, retain, cfg), mc, cfg.ratio);
    case LocalizationMethod::wagle:
        return select_top_p(score_wagle(params, forget, retain, cfg), mc, cfg.ratio);
    }
    throw ContractError("unknown localization method");
}

} // namespace loclab
