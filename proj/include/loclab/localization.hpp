#pragma once

// Attribution scores over value vectors and region selection.

#include "loclab/data.hpp"
#include "loclab/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace loclab {

enum class LocalizationMethod { random, activations, memflex, wagle };

std::string to_string(LocalizationMethod method);
LocalizationMethod localization_method_from_string(const std::string &name);

// One score per unit. In value-vector mode unit u is (u / d_ff, u % d_ff);
// in individual-weight mode u is a flat index over the concatenated W_V
// matrices. `secondary` breaks ties during ranking (MemFlex: ||g_unl||);
// it is empty for the other methods.
struct AttributionMap {
    MaskMode mode = MaskMode::value_vector;
    std::vector<double> scores;
    std::vector<double> secondary;
    std::string method;
    std::string normalization = "none";

    ValueVectorId id(std::size_t unit, const ModelConfig &config) const;
    void validate(const ModelConfig &config) const;
    // Columns layer,index,score,method; in weight mode `index` is the flat
    // offset within the layer's W_V.
    void save_csv(const std::filesystem::path &path, const ModelConfig &config) const;
};

struct LocalizationConfig {
    double ratio = 0.10;
    double memflex_mu = 0.95;
    // Negative means calibrate sigma so that about `ratio` of units pass.
    double memflex_sigma = -1.0;
    std::size_t memflex_rounds = 5;
    // Non-positive means estimate gamma from retain gradients.
    double wagle_gamma = -1.0;
    std::size_t wagle_gamma_examples = 64;
    MaskMode mode = MaskMode::value_vector;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Region {
    ValueVectorMask target;
    ValueVectorMask random;
};

AttributionMap score_activations(const Parameters &params, const std::vector<Example> &forget);

// Raw (unnormalized) activation scores, before per-layer z-normalization.
std::vector<double> raw_activation_scores(const Parameters &params, const std::vector<Example> &forget);

// One layer, one example: mean over the T rows of |m_i| times ||v_i||.
// coefficients is [T x d_ff] row-major.
std::vector<double> activation_layer_scores(std::span<const double> coefficients, std::size_t rows,
                                            std::span<const double> value_norms);

// In-place (x - mean) / sd over each consecutive block of `block` entries;
// constant blocks become zeros.
void z_normalize_blocks(std::vector<double> &scores, std::size_t block);

struct MemFlexGradients {
    std::vector<double> unlearn; // [n_layers * d_ff * d_model]
    std::vector<double> retain;
};

// Mean gradient of the NLL on random-label copies of each set, `rounds`
// resamplings per example.
MemFlexGradients memflex_gradients(const Parameters &params, const std::vector<Example> &forget,
                                   const std::vector<Example> &retain, std::size_t rounds, std::uint64_t seed);

// Binary map from per-vector gradients. Zero-norm pairs count as aligned
// (cosine 1). sigma < 0 calibrates sigma from `ratio`.
AttributionMap memflex_map(const MemFlexGradients &grads, const ModelConfig &config, double mu, double sigma,
                           double ratio);

AttributionMap score_memflex(const Parameters &params, const std::vector<Example> &forget,
                             const std::vector<Example> &retain, const LocalizationConfig &cfg);

// Full W_V gradient of L_f = -NLL(forget) and L_r = NLL(retain).
struct WagleGradients {
    std::vector<double> forget;
    std::vector<double> retain;
};

WagleGradients wagle_gradients(const Parameters &params, const std::vector<Example> &forget,
                               const std::vector<Example> &retain);

// Mean over retain examples (at most max_examples) of the squared
// per-example W_V gradient.
double estimate_wagle_gamma(const Parameters &params, const std::vector<Example> &retain, std::size_t max_examples);

// theta * g_f - g_r * g_f / gamma per weight; averaged per vector in
// value-vector mode.
AttributionMap wagle_map(const std::vector<double> &theta, const WagleGradients &grads, const ModelConfig &config,
                         double gamma, MaskMode mode);

AttributionMap score_wagle(const Parameters &params, const std::vector<Example> &forget,
                           const std::vector<Example> &retain, const LocalizationConfig &cfg);

// Concatenated W_V weights of every layer.
std::vector<double> value_weights(const Parameters &params);

std::size_t selection_size(std::size_t total, double ratio);

// The ceil(ratio * N) best units: higher score first, then higher secondary
// key, then lower (layer, index).
ValueVectorMask select_top_p(const AttributionMap &map, const ModelConfig &config, double ratio);

// Uniform sample of ceil(ratio * N) units outside `exclude`.
ValueVectorMask select_random(const ModelConfig &config, double ratio, std::uint64_t seed,
                              const ValueVectorMask *exclude = nullptr, MaskMode mode = MaskMode::value_vector);

// Target region from `target_seed`, random region disjoint from it.
Region draw_region(const ModelConfig &config, double ratio, std::uint64_t target_seed, std::uint64_t random_seed);

ValueVectorMask localize(LocalizationMethod method, const Parameters &params, const std::vector<Example> &forget,
                         const std::vector<Example> &retain, const LocalizationConfig &cfg);

} // namespace loclab
