#pragma once

// Decoder-only transformer whose MLPs are explicit key-value memories.
//
// For layer l with MLP input x (after the pre-MLP layer norm):
//   m = f(x W_K^T)        memory coefficients, one per value vector
//   M = m W_V = sum_i m_i v_i
// where v_i, row i of W_V, is the unit of localization.

#include "loclab/tensor.hpp"

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace loclab {

enum class Nonlinearity { gelu };

std::string to_string(Nonlinearity f);
Nonlinearity nonlinearity_from_string(const std::string &name);

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t d_model = 64;
    std::size_t d_ff = 128;
    std::size_t n_heads = 4;
    std::size_t vocab_size = 0;
    std::size_t max_seq_len = 64;
    Nonlinearity nonlinearity = Nonlinearity::gelu;
    std::size_t rmu_layer = 2;
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t value_vector_count() const { return n_layers * d_ff; }
    std::size_t value_weight_count() const { return n_layers * d_ff * d_model; }

    bool operator==(const ModelConfig &) const = default;
};

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
    bool operator==(const NamedTensor &) const = default;
};

// Plain-value weight storage. Copies are deep; a snapshot never aliases the
// storage of another.
class Parameters {
public:
    // Per-layer tensor slots, in storage order.
    enum Slot : std::size_t { ln1_gain, ln1_bias, w_query, w_key_attn, w_value_attn, w_out, ln2_gain, ln2_bias, mlp_key, mlp_value, slots_per_layer };

    Parameters() = default;
    // Random initialization drawn from config.seed.
    static Parameters init(const ModelConfig &config);
    // Same layout, all zeros; used for gradient buffers.
    static Parameters zeros_like(const Parameters &other);
    // Wraps existing tensors; they must follow the layout init() produces.
    static Parameters assemble(const ModelConfig &config, std::vector<NamedTensor> tensors);

    const ModelConfig &config() const { return config_; }
    std::vector<NamedTensor> &tensors() { return tensors_; }
    const std::vector<NamedTensor> &tensors() const { return tensors_; }
    std::size_t size() const { return tensors_.size(); }
    std::size_t total_elements() const;

    std::size_t token_embedding_index() const { return 0; }
    std::size_t position_embedding_index() const { return 1; }
    std::size_t layer_index(std::size_t layer, Slot slot) const { return 2 + layer * slots_per_layer + slot; }
    std::size_t final_gain_index() const { return 2 + config_.n_layers * slots_per_layer; }
    std::size_t final_bias_index() const { return final_gain_index() + 1; }
    std::size_t unembedding_index() const { return final_gain_index() + 2; }

    // Row i of W_V in `layer`.
    std::span<double> value_vector(std::size_t layer, std::size_t index);
    std::span<const double> value_vector(std::size_t layer, std::size_t index) const;

    bool all_finite() const;
    bool operator==(const Parameters &) const = default;

    void save(const std::filesystem::path &path) const;
    static Parameters load(const std::filesystem::path &path);

private:
    ModelConfig config_;
    std::vector<NamedTensor> tensors_;
};

using Gradients = Parameters;

struct ValueVectorId {
    std::size_t layer = 0;
    std::size_t index = 0;
    auto operator<=>(const ValueVectorId &) const = default;
};

enum class MaskMode { value_vector, individual_weight };

// A region of the model that updates are confined to. In value-vector mode
// the members are (layer, row) pairs of W_V; in individual-weight mode they
// are flat indices into the concatenation of every layer's W_V.
class ValueVectorMask {
public:
    ValueVectorMask() = default;
    static ValueVectorMask from_vectors(const ModelConfig &config, std::vector<ValueVectorId> ids);
    static ValueVectorMask from_weights(const ModelConfig &config, std::vector<std::size_t> flat_indices);
    static ValueVectorMask full(const ModelConfig &config, MaskMode mode = MaskMode::value_vector);

    MaskMode mode() const { return mode_; }
    const std::vector<ValueVectorId> &vectors() const { return vectors_; }
    const std::vector<std::size_t> &weights() const { return weights_; }
    std::size_t size() const { return mode_ == MaskMode::value_vector ? vectors_.size() : weights_.size(); }
    bool empty() const { return size() == 0; }
    // Number of units the mode ranges over (value vectors or W_V weights).
    std::size_t total() const { return total_; }
    double ratio() const { return total_ == 0 ? 0.0 : static_cast<double>(size()) / static_cast<double>(total_); }

    bool contains(const ValueVectorId &id) const;
    bool intersects(const ValueVectorMask &other) const;

    // Flat W_V weight indices covered by this mask (both modes).
    std::vector<std::size_t> weight_indices(const ModelConfig &config) const;

    bool operator==(const ValueVectorMask &) const = default;

private:
    MaskMode mode_ = MaskMode::value_vector;
    std::vector<ValueVectorId> vectors_;
    std::vector<std::size_t> weights_;
    std::size_t total_ = 0;
};

// Per-element update permission for every parameter tensor.
struct UpdateMask {
    std::vector<std::vector<std::uint8_t>> allowed;

    static UpdateMask from(const Parameters &params, const ValueVectorMask &mask);
};

// Sequences packed row-wise. Attention never crosses a sequence boundary and
// positions restart at 0 for each sequence.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<int> positions;
    std::vector<std::size_t> offsets{0};

    // Returns the row of the sequence's first token.
    std::size_t add(std::span<const int> sequence);
    std::size_t n_sequences() const { return offsets.size() - 1; }
    std::size_t n_rows() const { return tokens.size(); }
};

struct LayerTrace {
    Tensor mlp_input;    // x^l          [T x d_model]
    Tensor coefficients; // m^l          [T x d_ff]
    Tensor mlp_output;   // M^l          [T x d_model]
    Tensor hidden;       // h^(l), residual stream after layer l
};

struct MLPTrace {
    std::vector<LayerTrace> layers;
};

struct ForwardResult {
    Tensor logits; // [T x vocab]
    std::optional<MLPTrace> trace;
};

// Parameters bound into a computation graph. With requires_grad the leaves
// collect gradients from backward().
class ModelGraph {
public:
    ModelGraph(const Parameters &params, bool requires_grad);

    const ModelConfig &config() const { return config_; }
    ForwardResult forward(const PackedBatch &batch, bool want_trace = false) const;
    Gradients gradients() const;
    const std::vector<Tensor> &leaves() const { return leaves_; }

private:
    ModelConfig config_;
    std::vector<std::string> names_;
    std::vector<Tensor> leaves_;
};

ForwardResult forward(const Parameters &params, std::span<const int> tokens, bool want_trace = false);

// Argmax continuation; ties go to the lowest token id.
std::vector<int> greedy_decode(const Parameters &params, std::span<const int> prefix, std::size_t n_steps);

// Lowest-id argmax over a row of logits.
int argmax_lowest(std::span<const double> row);

// (1 - alpha) * original + alpha * updated, element-wise. Endpoints are exact copies.
Parameters mix(const Parameters &original, const Parameters &updated, double alpha);

// Zeros every gradient entry outside the mask.
void mask_gradients(Gradients &grads, const ValueVectorMask &mask);
void mask_gradients(Gradients &grads, const UpdateMask &mask);

} // namespace loclab
