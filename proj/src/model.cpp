#include "loclab/model.hpp"

#include "loclab/error.hpp"
#include "loclab/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace loclab {

namespace {

constexpr char kMagic[8] = {'L', 'C', 'L', 'B', 'P', 'A', 'R', '1'};

nlohmann::json config_to_json(const ModelConfig &c) {
    return {{"n_layers", c.n_layers},       {"d_model", c.d_model},   {"d_ff", c.d_ff},
            {"n_heads", c.n_heads},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
            {"nonlinearity", to_string(c.nonlinearity)}, {"rmu_layer", c.rmu_layer}, {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json &j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers");
    c.d_model = j.at("d_model");
    c.d_ff = j.at("d_ff");
    c.n_heads = j.at("n_heads");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.nonlinearity = nonlinearity_from_string(j.at("nonlinearity"));
    c.rmu_layer = j.at("rmu_layer");
    c.seed = j.at("seed");
    return c;
}

template <typename T> void write_le(std::ostream &out, T value) {
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char *>(bytes), sizeof(T));
}

template <typename T> T read_le(std::istream &in) {
    unsigned char bytes[sizeof(T)];
    in.read(reinterpret_cast<char *>(bytes), sizeof(T));
    if (!in) throw IoError("unexpected end of parameter file");
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
    return value;
}

std::vector<double> normal_fill(Rng &rng, std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (auto &x : v) x = rng.normal(0.0, stddev);
    return v;
}

} // namespace

std::string to_string(Nonlinearity f) {
    switch (f) {
    case Nonlinearity::gelu:
        return "gelu";
    }
    return "?";
}

Nonlinearity nonlinearity_from_string(const std::string &name) {
    if (name == "gelu") return Nonlinearity::gelu;
    throw ContractError("unsupported nonlinearity '" + name + "'");
}

void ModelConfig::validate() const {
    if (n_layers == 0 || d_model == 0 || d_ff == 0 || n_heads == 0 || max_seq_len == 0)
        throw ContractError("model dimensions must be positive");
    if (vocab_size == 0) throw ContractError("model vocab_size must be set");
    if (d_model % n_heads != 0) throw ContractError("d_model must be divisible by n_heads");
    if (rmu_layer >= n_layers) throw ContractError("rmu_layer must be below n_layers");
}

Parameters Parameters::init(const ModelConfig &config) {
    config.validate();
    Parameters p;
    p.config_ = config;
    Rng rng(config.seed);
    const auto d = config.d_model, ff = config.d_ff, V = config.vocab_size;
    const double base = 0.02;
    const double resid = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    p.tensors_.push_back({"token_embedding", {V, d}, normal_fill(rng, V * d, base)});
    p.tensors_.push_back({"position_embedding", {config.max_seq_len, d}, normal_fill(rng, config.max_seq_len * d, base)});
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        p.tensors_.push_back({pre + "ln1.gain", {d}, std::vector<double>(d, 1.0)});
        p.tensors_.push_back({pre + "ln1.bias", {d}, std::vector<double>(d, 0.0)});
        p.tensors_.push_back({pre + "attn.w_query", {d, d}, normal_fill(rng, d * d, base)});
        p.tensors_.push_back({pre + "attn.w_key", {d, d}, normal_fill(rng, d * d, base)});
        p.tensors_.push_back({pre + "attn.w_value", {d, d}, normal_fill(rng, d * d, base)});
        p.tensors_.push_back({pre + "attn.w_out", {d, d}, normal_fill(rng, d * d, resid)});
        p.tensors_.push_back({pre + "ln2.gain", {d}, std::vector<double>(d, 1.0)});
        p.tensors_.push_back({pre + "ln2.bias", {d}, std::vector<double>(d, 0.0)});
        p.tensors_.push_back({pre + "mlp.w_key", {ff, d}, normal_fill(rng, ff * d, base)});
        p.tensors_.push_back({pre + "mlp.w_value", {ff, d}, normal_fill(rng, ff * d, resid)});
    }
    p.tensors_.push_back({"final_ln.gain", {d}, std::vector<double>(d, 1.0)});
    p.tensors_.push_back({"final_ln.bias", {d}, std::vector<double>(d, 0.0)});
    p.tensors_.push_back({"unembedding", {d, V}, normal_fill(rng, d * V, base)});
    return p;
}

Parameters Parameters::zeros_like(const Parameters &other) {
    Parameters p = other;
    for (auto &t : p.tensors_) std::fill(t.data.begin(), t.data.end(), 0.0);
    return p;
}

Parameters Parameters::assemble(const ModelConfig &config, std::vector<NamedTensor> tensors) {
    config.validate();
    Parameters p;
    p.config_ = config;
    p.tensors_ = std::move(tensors);
    if (p.tensors_.size() != 5 + config.n_layers * slots_per_layer)
        throw ContractError("parameter tensor count does not match the configuration");
    for (const auto &t : p.tensors_)
        if (shape_numel(t.shape) != t.data.size()) throw DimensionError("tensor " + t.name + " has inconsistent shape");
    return p;
}

std::size_t Parameters::total_elements() const {
    std::size_t n = 0;
    for (const auto &t : tensors_) n += t.data.size();
    return n;
}

std::span<double> Parameters::value_vector(std::size_t layer, std::size_t index) {
    auto &t = tensors_.at(layer_index(layer, mlp_value));
    const auto d = config_.d_model;
    return std::span<double>(t.data).subspan(index * d, d);
}

std::span<const double> Parameters::value_vector(std::size_t layer, std::size_t index) const {
    const auto &t = tensors_.at(layer_index(layer, mlp_value));
    const auto d = config_.d_model;
    return std::span<const double>(t.data).subspan(index * d, d);
}

bool Parameters::all_finite() const {
    for (const auto &t : tensors_)
        for (double v : t.data)
            if (!std::isfinite(v)) return false;
    return true;
}

void Parameters::save(const std::filesystem::path &path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof kMagic);
    const std::string cfg = config_to_json(config_).dump();
    write_le<std::uint64_t>(out, cfg.size());
    out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    write_le<std::uint64_t>(out, tensors_.size());
    for (const auto &t : tensors_) {
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto dim : t.shape) write_le<std::uint64_t>(out, dim);
        for (double v : t.data) write_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
    if (!out) throw IoError("failed writing " + path.string());
}

Parameters Parameters::load(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError(path.string() + " is not a parameter file");
    Parameters p;
    const auto cfg_len = read_le<std::uint64_t>(in);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    p.config_ = config_from_json(nlohmann::json::parse(cfg));
    const auto n = read_le<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < n; ++i) {
        NamedTensor t;
        t.name.resize(read_le<std::uint32_t>(in));
        in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        const auto ndim = read_le<std::uint32_t>(in);
        for (std::uint32_t k = 0; k < ndim; ++k) t.shape.push_back(read_le<std::uint64_t>(in));
        t.data.resize(shape_numel(t.shape));
        for (auto &v : t.data) v = std::bit_cast<double>(read_le<std::uint64_t>(in));
        p.tensors_.push_back(std::move(t));
    }
    const auto expected = Parameters::init(p.config_);
    if (expected.tensors_.size() != p.tensors_.size()) throw IoError(path.string() + ": tensor count mismatch");
    for (std::size_t i = 0; i < p.tensors_.size(); ++i)
        if (expected.tensors_[i].name != p.tensors_[i].name || expected.tensors_[i].shape != p.tensors_[i].shape)
            throw IoError(path.string() + ": unexpected tensor " + p.tensors_[i].name);
    return p;
}

ValueVectorMask ValueVectorMask::from_vectors(const ModelConfig &config, std::vector<ValueVectorId> ids) {
    ValueVectorMask m;
    m.mode_ = MaskMode::value_vector;
    m.total_ = config.value_vector_count();
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ContractError("mask members must be unique");
    for (const auto &id : ids)
        if (id.layer >= config.n_layers || id.index >= config.d_ff)
            throw ContractError("value vector (" + std::to_string(id.layer) + ", " + std::to_string(id.index) +
                                ") outside the model");
    m.vectors_ = std::move(ids);
    return m;
}

ValueVectorMask ValueVectorMask::from_weights(const ModelConfig &config, std::vector<std::size_t> flat) {
    ValueVectorMask m;
    m.mode_ = MaskMode::individual_weight;
    m.total_ = config.value_weight_count();
    std::sort(flat.begin(), flat.end());
    if (std::adjacent_find(flat.begin(), flat.end()) != flat.end()) throw ContractError("mask members must be unique");
    if (!flat.empty() && flat.back() >= m.total_) throw ContractError("weight index outside the model");
    m.weights_ = std::move(flat);
    return m;
}

ValueVectorMask ValueVectorMask::full(const ModelConfig &config, MaskMode mode) {
    if (mode == MaskMode::value_vector) {
        std::vector<ValueVectorId> ids;
        for (std::size_t l = 0; l < config.n_layers; ++l)
            for (std::size_t i = 0; i < config.d_ff; ++i) ids.push_back({l, i});
        return from_vectors(config, std::move(ids));
    }
    std::vector<std::size_t> idx(config.value_weight_count());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return from_weights(config, std::move(idx));
}

bool ValueVectorMask::contains(const ValueVectorId &id) const {
    return std::binary_search(vectors_.begin(), vectors_.end(), id);
}

bool ValueVectorMask::intersects(const ValueVectorMask &other) const {
    if (mode_ != other.mode_) throw ContractError("cannot intersect masks of different modes");
    if (mode_ == MaskMode::value_vector) {
        std::vector<ValueVectorId> common;
        std::set_intersection(vectors_.begin(), vectors_.end(), other.vectors_.begin(), other.vectors_.end(),
                              std::back_inserter(common));
        return !common.empty();
    }
    std::vector<std::size_t> common;
    std::set_intersection(weights_.begin(), weights_.end(), other.weights_.begin(), other.weights_.end(),
                          std::back_inserter(common));
    return !common.empty();
}

std::vector<std::size_t> ValueVectorMask::weight_indices(const ModelConfig &config) const {
    if (mode_ == MaskMode::individual_weight) return weights_;
    std::vector<std::size_t> out;
    out.reserve(vectors_.size() * config.d_model);
    for (const auto &id : vectors_) {
        const std::size_t base = (id.layer * config.d_ff + id.index) * config.d_model;
        for (std::size_t j = 0; j < config.d_model; ++j) out.push_back(base + j);
    }
    return out;
}

UpdateMask UpdateMask::from(const Parameters &params, const ValueVectorMask &mask) {
    UpdateMask u;
    for (const auto &t : params.tensors()) u.allowed.emplace_back(t.data.size(), 0);
    const auto &cfg = params.config();
    const std::size_t per_layer = cfg.d_ff * cfg.d_model;
    for (std::size_t flat : mask.weight_indices(cfg)) {
        const std::size_t layer = flat / per_layer;
        u.allowed[params.layer_index(layer, Parameters::mlp_value)][flat % per_layer] = 1;
    }
    return u;
}

std::size_t PackedBatch::add(std::span<const int> sequence) {
    const std::size_t start = tokens.size();
    for (std::size_t i = 0; i < sequence.size(); ++i) {
        tokens.push_back(sequence[i]);
        positions.push_back(static_cast<int>(i));
    }
    offsets.push_back(tokens.size());
    return start;
}

ModelGraph::ModelGraph(const Parameters &params, bool requires_grad) : config_(params.config()) {
    leaves_.reserve(params.size());
    for (const auto &t : params.tensors()) {
        names_.push_back(t.name);
        leaves_.push_back(Tensor::from(t.shape, t.data, requires_grad));
    }
}

ForwardResult ModelGraph::forward(const PackedBatch &batch, bool want_trace) const {
    namespace o = ops;
    const auto &c = config_;
    if (batch.n_sequences() == 0) throw ContractError("forward on an empty batch");
    for (std::size_t s = 0; s < batch.n_sequences(); ++s) {
        const auto len = batch.offsets[s + 1] - batch.offsets[s];
        if (len == 0) throw ContractError("forward on an empty sequence");
        if (len > c.max_seq_len)
            throw ContractError("sequence of " + std::to_string(len) + " tokens exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
    }
    auto slot = [&](std::size_t l, Parameters::Slot s) -> const Tensor & {
        return leaves_[2 + l * Parameters::slots_per_layer + s];
    };
    Tensor x = o::add(o::embedding(leaves_[0], batch.tokens), o::embedding(leaves_[1], batch.positions));
    ForwardResult result;
    if (want_trace) result.trace.emplace();
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        Tensor a = o::layer_norm(x, slot(l, Parameters::ln1_gain), slot(l, Parameters::ln1_bias));
        Tensor q = o::matmul(a, slot(l, Parameters::w_query));
        Tensor k = o::matmul(a, slot(l, Parameters::w_key_attn));
        Tensor v = o::matmul(a, slot(l, Parameters::w_value_attn));
        Tensor att = o::causal_attention(q, k, v, c.n_heads, batch.offsets);
        x = o::add(x, o::matmul(att, slot(l, Parameters::w_out)));

        Tensor mlp_in = o::layer_norm(x, slot(l, Parameters::ln2_gain), slot(l, Parameters::ln2_bias));
        Tensor coeff = o::gelu(o::matmul(mlp_in, o::transpose(slot(l, Parameters::mlp_key))));
        Tensor mlp_out = o::matmul(coeff, slot(l, Parameters::mlp_value));
        x = o::add(x, mlp_out);
        if (want_trace) result.trace->layers.push_back({mlp_in, coeff, mlp_out, x});
    }
    const std::size_t fg = 2 + c.n_layers * Parameters::slots_per_layer;
    Tensor h = o::layer_norm(x, leaves_[fg], leaves_[fg + 1]);
    result.logits = o::matmul(h, leaves_[fg + 2]);
    return result;
}

Gradients ModelGraph::gradients() const {
    std::vector<NamedTensor> ts;
    ts.reserve(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) ts.push_back({names_[i], leaves_[i].shape(), leaves_[i].grad()});
    return Parameters::assemble(config_, std::move(ts));
}

ForwardResult forward(const Parameters &params, std::span<const int> tokens, bool want_trace) {
    ModelGraph graph(params, false);
    PackedBatch batch;
    batch.add(tokens);
    return graph.forward(batch, want_trace);
}

int argmax_lowest(std::span<const double> row) {
    int best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    return best;
}

std::vector<int> greedy_decode(const Parameters &params, std::span<const int> prefix, std::size_t n_steps) {
    std::vector<int> seq(prefix.begin(), prefix.end());
    std::vector<int> out;
    if (n_steps == 0) return out;
    if (seq.empty()) throw ContractError("greedy_decode needs a non-empty prefix");
    ModelGraph graph(params, false);
    const std::size_t V = params.config().vocab_size;
    for (std::size_t s = 0; s < n_steps; ++s) {
        PackedBatch batch;
        batch.add(seq);
        auto res = graph.forward(batch);
        const auto logits = res.logits.data();
        const int next = argmax_lowest(logits.subspan((seq.size() - 1) * V, V));
        seq.push_back(next);
        out.push_back(next);
    }
    return out;
}

Parameters mix(const Parameters &original, const Parameters &updated, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("mixing coefficient must lie in [0, 1]");
    if (!(original.config() == updated.config()) || original.size() != updated.size())
        throw ContractError("cannot mix parameters of different configurations");
    for (std::size_t i = 0; i < original.size(); ++i)
        if (original.tensors()[i].shape != updated.tensors()[i].shape)
            throw ContractError("cannot mix tensors of different shapes: " + original.tensors()[i].name);
    if (alpha == 0.0) return original;
    if (alpha == 1.0) return updated;
    Parameters out = original;
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto &dst = out.tensors()[i].data;
        const auto &b = updated.tensors()[i].data;
        for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = (1.0 - alpha) * dst[j] + alpha * b[j];
    }
    return out;
}

void mask_gradients(Gradients &grads, const UpdateMask &mask) {
    auto &ts = grads.tensors();
    if (mask.allowed.size() != ts.size()) throw ContractError("update mask does not match gradient layout");
    for (std::size_t i = 0; i < ts.size(); ++i) {
        auto &d = ts[i].data;
        const auto &a = mask.allowed[i];
        for (std::size_t j = 0; j < d.size(); ++j)
            if (!a[j]) d[j] = 0.0;
    }
}

void mask_gradients(Gradients &grads, const ValueVectorMask &mask) {
    mask_gradients(grads, UpdateMask::from(grads, mask));
}

} // namespace loclab
