#include "loclab/experiments.hpp"

#include "loclab/error.hpp"
#include "loclab/rng.hpp"
#include "loclab/stats.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace loclab {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// Seed-derivation tags, one per consumer.
constexpr std::uint64_t kTargetTag = 101;
constexpr std::uint64_t kRandomTag = 202;
constexpr std::uint64_t kInjectTag = 303;
constexpr std::uint64_t kUnlearnTag = 404;
constexpr std::uint64_t kDistillTag = 505;
constexpr std::uint64_t kLocalizeTag = 606;
constexpr std::uint64_t kModelTag = 707;

// ------------------------------------------------------------ json helpers

void check_keys(const json &j, const std::set<std::string> &allowed, const std::string &where) {
    if (!j.is_object()) throw ParseError(where + ": expected an object");
    for (const auto &[key, _] : j.items())
        if (!allowed.count(key)) throw ParseError(where + ": unknown key '" + key + "'");
}

template <typename T> void read(const json &j, const char *key, T &out, const std::string &where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception &e) {
        throw ParseError(where + "." + key + ": " + e.what());
    }
}

ojson train_to_json(const TrainConfig &c) {
    ojson j;
    j["lr"] = c.lr;
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["weight_decay"] = c.weight_decay;
    j["optimizer"] = to_string(c.optimizer);
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["eps"] = c.eps;
    j["seed"] = c.seed;
    j["target_es"] = c.target_es;
    j["stop_fs"] = c.stop_fs;
    j["lambda_retain"] = c.lambda_retain;
    return j;
}

TrainConfig train_from_json(const json &j, TrainConfig c, const std::string &where) {
    check_keys(j, {"lr", "epochs", "batch_size", "weight_decay", "optimizer", "beta1", "beta2", "eps", "seed",
                   "target_es", "stop_fs", "lambda_retain"},
               where);
    read(j, "lr", c.lr, where);
    read(j, "epochs", c.epochs, where);
    read(j, "batch_size", c.batch_size, where);
    read(j, "weight_decay", c.weight_decay, where);
    std::string opt = to_string(c.optimizer);
    read(j, "optimizer", opt, where);
    c.optimizer = optimizer_from_string(opt);
    read(j, "beta1", c.beta1, where);
    read(j, "beta2", c.beta2, where);
    read(j, "eps", c.eps, where);
    read(j, "seed", c.seed, where);
    read(j, "target_es", c.target_es, where);
    read(j, "stop_fs", c.stop_fs, where);
    read(j, "lambda_retain", c.lambda_retain, where);
    return c;
}

ojson model_to_json(const ModelConfig &m) {
    ojson j;
    j["n_layers"] = m.n_layers;
    j["d_model"] = m.d_model;
    j["d_ff"] = m.d_ff;
    j["n_heads"] = m.n_heads;
    j["max_seq_len"] = m.max_seq_len;
    j["nonlinearity"] = to_string(m.nonlinearity);
    j["rmu_layer"] = m.rmu_layer;
    j["seed"] = m.seed;
    return j;
}

ojson data_to_json(const DataSpec &d) {
    ojson j;
    j["source"] = d.source;
    j["path"] = d.path;
    j["n_entities"] = d.n_entities;
    j["attrs_per_entity"] = d.attrs_per_entity;
    j["n_records"] = d.n_records;
    j["k_perturbed"] = d.k_perturbed;
    j["forget_ratio"] = d.forget_ratio;
    j["seed"] = d.seed;
    j["split_seed"] = d.split_seed;
    j["pretrain_examples"] = d.pretrain_examples;
    j["pretrain_seed"] = d.pretrain_seed;
    return j;
}

ojson objective_to_json(const ObjectiveConfig &o) {
    ojson j;
    j["wga_alpha"] = o.wga_alpha;
    j["npo_beta"] = o.npo_beta;
    j["dpo_beta"] = o.dpo_beta;
    j["rmu_scale"] = o.rmu_scale;
    j["rmu_direction"] = o.rmu_direction;
    j["rmu_seed"] = o.rmu_seed;
    j["l2_alpha"] = o.l2_alpha;
    return j;
}

std::string mode_name(MaskMode mode) { return mode == MaskMode::value_vector ? "value_vector" : "individual_weight"; }

MaskMode mode_from_name(const std::string &name) {
    if (name == "value_vector") return MaskMode::value_vector;
    if (name == "individual_weight") return MaskMode::individual_weight;
    throw ParseError("unknown mask mode '" + name + "'");
}

ojson localization_to_json(const LocalizationConfig &l) {
    ojson j;
    j["ratio"] = l.ratio;
    j["mode"] = mode_name(l.mode);
    j["memflex_mu"] = l.memflex_mu;
    j["memflex_sigma"] = l.memflex_sigma;
    j["memflex_rounds"] = l.memflex_rounds;
    j["wagle_gamma"] = l.wagle_gamma;
    j["wagle_gamma_examples"] = l.wagle_gamma_examples;
    j["seed"] = l.seed;
    return j;
}

ojson lr_map_to_json(const std::map<Objective, double> &m) {
    ojson j = ojson::object();
    for (const auto &[obj, lr] : m) j[to_string(obj)] = lr;
    return j;
}

std::map<Objective, double> lr_map_from_json(const json &j, const std::string &where) {
    if (!j.is_object()) throw ParseError(where + ": expected an object");
    std::map<Objective, double> out;
    for (const auto &[key, value] : j.items()) {
        Objective obj;
        try {
            obj = objective_from_string(key);
        } catch (const Error &) {
            throw ParseError(where + ": unknown key '" + key + "'");
        }
        if (!value.is_number()) throw ParseError(where + "." + key + ": expected a number");
        out[obj] = value.get<double>();
    }
    return out;
}

std::uint64_t fnv1a(const std::string &text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hex16(std::uint64_t v) {
    static const char *digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

ojson number_or_null(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

ojson aggregate_json(const Aggregate &a) {
    ojson j;
    j["values"] = a.values;
    j["mean"] = number_or_null(a.mean);
    if (a.sd) j["sd"] = number_or_null(*a.sd);
    return j;
}

// ----------------------------------------------------------------- logging

class Progress {
public:
    explicit Progress(std::ostream *out) : out_(out) {}
    void operator()(const std::string &line) {
        if (!out_) return;
        std::lock_guard<std::mutex> lock(mu_);
        *out_ << line << std::endl;
    }

private:
    std::ostream *out_;
    std::mutex mu_;
};

// ------------------------------------------------------------------ setup

struct Setup {
    Corpus corpus;
    std::vector<Example> forget;
    std::vector<Example> retain;
    ModelConfig model;
    ObjectiveConfig objective;
    Parameters theta_r;
    SweepData sweep;
    std::string theta_r_key;
    ojson info;
};

std::filesystem::path cache_dir(const ExperimentSpec &spec) { return std::filesystem::path(spec.output) / "cache"; }

void save_atomic(const Parameters &params, const std::filesystem::path &path) {
    std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    params.save(tmp);
    std::filesystem::rename(tmp, path);
}

Corpus build_corpus(const DataSpec &d) {
    if (d.source == "author")
        return split(generate_author_corpus(d.seed, d.n_entities, d.attrs_per_entity, d.k_perturbed), d.forget_ratio,
                     d.split_seed);
    if (d.source == "pii")
        return split(generate_pii_corpus(d.seed, d.n_records, d.k_perturbed), d.forget_ratio, d.split_seed);
    Corpus c = load_tofu_json(d.path);
    if (c.forget_ids.empty()) c = split(std::move(c), d.forget_ratio, d.split_seed);
    return c;
}

Setup prepare(const ExperimentSpec &spec, Progress &log, ojson &timings) {
    const auto start = Clock::now();
    Setup s;
    s.corpus = build_corpus(spec.data);
    s.forget = encode_records(s.corpus, s.corpus.forget_ids);
    s.retain = encode_records(s.corpus, s.corpus.retain_ids);
    s.model = spec.model;
    s.model.vocab_size = s.corpus.tokenizer.vocab_size();
    s.model.validate();
    s.objective = spec.objective;
    s.objective.rmu_layer = s.model.rmu_layer;
    s.objective.lambda_retain = spec.training.inject.lambda_retain;

    ojson key;
    key["version"] = kVersion;
    key["model"] = model_to_json(s.model);
    key["data"] = data_to_json(spec.data);
    key["pretrain"] = train_to_json(spec.training.pretrain);
    key["full"] = train_to_json(spec.training.full);
    s.theta_r_key = hex16(fnv1a(key.dump()));
    const auto path = cache_dir(spec) / ("theta_r_" + s.theta_r_key + ".bin");
    if (spec.cache && std::filesystem::exists(path)) {
        s.theta_r = Parameters::load(path);
        log("theta_r: loaded " + path.string());
    } else {
        Parameters init = Parameters::init(s.model);
        const auto pre = generate_pretraining_examples(s.corpus, spec.data.pretrain_seed, spec.data.pretrain_examples);
        if (!pre.empty()) {
            log("pretraining on " + std::to_string(pre.size()) + " template examples");
            init = fit_nll(init, pre, spec.training.pretrain, false).params;
        }
        log("fine-tuning theta_r on " + std::to_string(s.retain.size()) + " retain records");
        s.theta_r = train_full(init, s.retain, spec.training.full).params;
        if (spec.cache) save_atomic(s.theta_r, path);
    }
    s.sweep = make_sweep_data(s.theta_r, s.forget, s.retain);
    const auto p = evaluate_point(s.theta_r, s.sweep, 0.0);
    ojson info;
    info["n_forget"] = s.forget.size();
    info["n_retain"] = s.retain.size();
    info["vocab_size"] = s.model.vocab_size;
    info["value_vectors"] = s.model.value_vector_count();
    info["theta_r"] = ojson{{"fs", p.fs}, {"rs", p.rs}, {"mu", p.mu}, {"fq", number_or_null(p.fq)}};
    s.info = info;
    timings["setup"] = seconds_since(start);
    return s;
}

// Injected model for one seed, with the region it was injected into.
struct Injected {
    std::uint64_t seed = 0;
    Region region;
    Parameters theta_o;
    ojson info;
};

Injected inject_for_seed(const ExperimentSpec &spec, const Setup &s, std::uint64_t seed, Progress &log) {
    Injected out;
    out.seed = seed;
    out.region = draw_region(s.model, spec.localization.ratio, Rng::derive_seed(seed, kTargetTag),
                             Rng::derive_seed(seed, kRandomTag));
    if (out.region.target.intersects(out.region.random))
        throw ContractError("target and random regions overlap for seed " + std::to_string(seed));
    TrainConfig cfg = spec.training.inject;
    cfg.seed = Rng::derive_seed(seed, kInjectTag);
    ojson key;
    key["theta_r"] = s.theta_r_key;
    key["inject"] = train_to_json(cfg);
    key["ratio"] = spec.localization.ratio;
    key["seed"] = seed;
    const std::string hash = hex16(fnv1a(key.dump()));
    const auto path = cache_dir(spec) / ("theta_o_" + hash + ".bin");
    std::size_t epochs = 0;
    bool cached = false;
    if (spec.cache && std::filesystem::exists(path)) {
        out.theta_o = Parameters::load(path);
        cached = true;
    } else {
        auto res = inject_forget(s.theta_r, s.forget, s.retain, out.region.target, cfg);
        out.theta_o = std::move(res.params);
        epochs = res.log.epochs.size();
        if (spec.cache) save_atomic(out.theta_o, path);
    }
    if (!identical_outside(s.theta_r, out.theta_o, out.region.target))
        throw ContractError("injection changed parameters outside the target region");
    const auto p = evaluate_point(out.theta_o, s.sweep, 0.0);
    const double rs_before = s.info["theta_r"]["rs"].get<double>();
    ojson info;
    info["seed"] = seed;
    info["target_units"] = out.region.target.size();
    info["random_units"] = out.region.random.size();
    info["disjoint"] = !out.region.target.intersects(out.region.random);
    info["es_forget"] = p.es_forget;
    info["rs_before"] = rs_before;
    info["rs_after"] = p.rs;
    info["rs_drop"] = rs_before - p.rs;
    info["reached_target"] = p.es_forget >= spec.training.inject.target_es;
    info["mu_initial"] = p.mu;
    info["fq_initial"] = number_or_null(p.fq);
    out.info = info;
    log("seed " + std::to_string(seed) + ": injected, ES_forget " + format_double(p.es_forget) + ", RS " +
        format_double(p.rs) + (cached ? " (cached)" : " after " + std::to_string(epochs) + " epochs"));
    return out;
}

std::vector<Injected> inject_all(const ExperimentSpec &spec, const Setup &s, std::size_t jobs, Progress &log,
                                 ojson &timings) {
    const auto start = Clock::now();
    std::vector<Injected> out(spec.seeds.size());
    parallel_for(spec.seeds.size(), jobs, [&](std::size_t i) { out[i] = inject_for_seed(spec, s, spec.seeds[i], log); });
    timings["injection"] = seconds_since(start);
    return out;
}

// -------------------------------------------------------------- cells

struct CellResult {
    bool ok = false;
    std::string error;
    double lr = 0.0;
    std::size_t steps = 0;
    std::string stop_reason;
    double final_fs = 0.0;
    double fs_span = 0.0;
    double aues = std::nan("");
    std::optional<double> mu95;
    std::string mu95_error;
    MixCurve curve;
    // l2 only
    double residual_initial = 0.0;
    double residual_final = 0.0;
};

double fs_span(const MixCurve &c) {
    double lo = 1.0, hi = 0.0;
    for (const auto &p : c.points) {
        lo = std::min(lo, p.fs);
        hi = std::max(hi, p.fs);
    }
    return c.points.empty() ? 0.0 : hi - lo;
}

void finish_cell(CellResult &cell, const Parameters &theta_o, const Parameters &updated, const ExperimentSpec &spec,
                 const Setup &s, bool want_mu95) {
    cell.curve = mixing_sweep(theta_o, updated, spec.mix_step, s.sweep);
    cell.fs_span = fs_span(cell.curve);
    cell.aues = aues(cell.curve);
    if (want_mu95) {
        try {
            cell.mu95 = mu95(cell.curve, cell.curve.points.front().mu);
        } catch (const InsufficientUnlearningError &e) {
            cell.mu95_error = e.what();
        }
    }
    cell.ok = true;
}

CellResult run_unlearn_cell(const ExperimentSpec &spec, const Setup &s, const Parameters &theta_o,
                            const ValueVectorMask &mask, Objective objective, double lr, std::uint64_t seed,
                            bool want_mu95, bool sweep) {
    CellResult cell;
    cell.lr = lr;
    try {
        TrainConfig cfg = spec.training.unlearn;
        cfg.lr = lr;
        cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, kUnlearnTag), static_cast<std::uint64_t>(objective));
        auto res = unlearn(theta_o, s.forget, s.retain, mask, objective, s.objective, cfg, &theta_o);
        if (!identical_outside(theta_o, res.params, mask))
            throw ContractError("unlearning changed parameters outside the mask");
        cell.steps = res.log.steps.size();
        cell.stop_reason = res.log.stop_reason;
        cell.final_fs = res.log.steps.empty() ? 1.0 - forget_strength(theta_o, s.forget) : res.log.steps.back().fs;
        if (sweep) finish_cell(cell, theta_o, res.params, spec, s, want_mu95);
        else cell.ok = true;
    } catch (const std::exception &e) {
        cell.ok = false;
        cell.error = e.what();
    }
    return cell;
}

ojson cell_json(const CellResult &c, bool want_mu95) {
    ojson j;
    j["status"] = c.ok ? "ok" : "error";
    if (!c.ok) {
        j["error"] = c.error;
        return j;
    }
    if (c.lr > 0.0) j["lr"] = c.lr;
    j["steps"] = c.steps;
    if (!c.stop_reason.empty()) j["stop_reason"] = c.stop_reason;
    j["final_fs"] = c.final_fs;
    j["fs_span"] = c.fs_span;
    j["aues"] = number_or_null(c.aues);
    if (want_mu95) {
        j["mu95"] = c.mu95 ? ojson(*c.mu95) : ojson(nullptr);
        if (!c.mu95_error.empty()) j["mu95_error"] = c.mu95_error;
    }
    return j;
}

// ---------------------------------------------------------- lr search

struct LrChoice {
    double lr = 0.0;
    ojson info;
};

std::vector<double> lr_grid(double center, double factor) { return {center / factor, center, center * factor}; }

// Smallest grid rate at which every scenario reaches stop_fs on the first
// seed; the largest rate when none does.
LrChoice choose_lr(const ExperimentSpec &spec, const Setup &s, const Parameters &theta_o,
                   const std::vector<std::pair<std::string, ValueVectorMask>> &scenarios, Objective objective,
                   std::uint64_t seed, std::size_t jobs, Progress &log) {
    LrChoice out;
    const double center = spec.learning_rates.count(objective) ? spec.learning_rates.at(objective)
                                                               : default_learning_rate(objective);
    out.info["objective"] = to_string(objective);
    if (spec.lr_overrides.count(objective)) {
        out.lr = spec.lr_overrides.at(objective);
        out.info["lr"] = out.lr;
        out.info["source"] = "override";
        return out;
    }
    if (!spec.lr_search) {
        out.lr = center;
        out.info["lr"] = out.lr;
        out.info["source"] = "default";
        return out;
    }
    const auto grid = lr_grid(center, spec.lr_grid_factor);
    std::vector<CellResult> runs(grid.size() * scenarios.size());
    parallel_for(runs.size(), jobs, [&](std::size_t i) {
        const auto &[name, mask] = scenarios[i % scenarios.size()];
        runs[i] = run_unlearn_cell(spec, s, theta_o, mask, objective, grid[i / scenarios.size()], seed, false, false);
    });
    ojson trials = ojson::array();
    std::optional<double> chosen;
    for (std::size_t g = 0; g < grid.size(); ++g) {
        ojson t;
        t["lr"] = grid[g];
        bool all = true;
        ojson fs = ojson::object();
        for (std::size_t k = 0; k < scenarios.size(); ++k) {
            const auto &r = runs[g * scenarios.size() + k];
            fs[scenarios[k].first] = r.ok ? ojson(r.final_fs) : ojson(nullptr);
            all = all && r.ok && r.final_fs >= spec.training.unlearn.stop_fs;
        }
        t["final_fs"] = fs;
        t["reached"] = all;
        trials.push_back(t);
        if (all && !chosen) chosen = grid[g];
    }
    out.lr = chosen.value_or(grid.back());
    out.info["lr"] = out.lr;
    out.info["source"] = chosen ? "search" : "search (no grid rate reached stop_fs; largest used)";
    out.info["grid"] = trials;
    log("lr search " + to_string(objective) + ": " + format_double(out.lr));
    return out;
}

// ---------------------------------------------------------- comparisons

ojson compare_curves(const MixCurve &a, const MixCurve &b, const std::string &name_a, const std::string &name_b,
                     double delta_aues, std::optional<double> delta_mu95, bool want_mu95, const ExperimentSpec &spec,
                     std::uint64_t index) {
    ojson out = ojson::array();
    {
        ojson j;
        j["metric"] = "aues";
        j["a"] = name_a;
        j["b"] = name_b;
        j["abs_delta"] = number_or_null(delta_aues);
        try {
            const auto r = aues_permutation_test(a, b, spec.permutation_rounds,
                                                 Rng::derive_seed(spec.stats_seed, 2 * index));
            j["test"] = "permutation";
            j["observed"] = r.observed;
            j["p_value"] = r.p_value;
            j["n_rounds"] = r.n_rounds;
            j["seed"] = r.seed;
        } catch (const Error &e) {
            j["p_value"] = nullptr;
            j["error"] = e.what();
        }
        out.push_back(j);
    }
    if (want_mu95) {
        ojson j;
        j["metric"] = "mu95";
        j["a"] = name_a;
        j["b"] = name_b;
        j["abs_delta"] = delta_mu95 ? ojson(*delta_mu95) : ojson(nullptr);
        std::vector<std::pair<double, double>> pa, pb;
        for (const auto &p : a.points) pa.emplace_back(p.mu, p.fq);
        for (const auto &p : b.points) pb.emplace_back(p.mu, p.fq);
        try {
            const auto r = mu95_bootstrap_test(pa, pb, spec.bootstrap_rounds,
                                               Rng::derive_seed(spec.stats_seed, 2 * index + 1), a.points.front().mu,
                                               b.points.front().mu);
            j["test"] = "bootstrap";
            j["observed"] = r.observed;
            j["p_value"] = r.p_value;
            j["n_rounds"] = r.n_rounds;
            j["seed"] = r.seed;
            j["redraws"] = r.redraws;
        } catch (const Error &e) {
            j["p_value"] = nullptr;
            j["error"] = e.what();
        }
        out.push_back(j);
    }
    return out;
}

struct Group {
    std::string objective;
    std::string method;
    std::vector<const CellResult *> cells;

    std::vector<double> aues_values() const {
        std::vector<double> v;
        for (auto *c : cells)
            if (c->ok) v.push_back(c->aues);
        return v;
    }
    std::vector<double> mu95_values() const {
        std::vector<double> v;
        for (auto *c : cells)
            if (c->ok && c->mu95) v.push_back(*c->mu95);
        return v;
    }
    std::vector<MixCurve> curves() const {
        std::vector<MixCurve> v;
        for (auto *c : cells)
            if (c->ok) v.push_back(c->curve);
        return v;
    }
};

ojson group_summary(const Group &g, bool want_mu95) {
    ojson j;
    j["objective"] = g.objective;
    j["method"] = g.method;
    j["n_cells"] = g.cells.size();
    j["aues"] = aggregate_json(aggregate(g.aues_values()));
    if (want_mu95) j["mu95"] = aggregate_json(aggregate(g.mu95_values()));
    return j;
}

std::optional<double> abs_mean_delta(const std::vector<double> &a, const std::vector<double> &b) {
    if (a.empty() || b.empty()) return std::nullopt;
    return std::abs(aggregate(a).mean - aggregate(b).mean);
}

ojson compare_groups(const Group &a, const Group &b, bool want_mu95, const ExperimentSpec &spec, std::uint64_t index) {
    const auto ca = a.curves(), cb = b.curves();
    if (ca.empty() || cb.empty()) {
        ojson j;
        j["a"] = a.method;
        j["b"] = b.method;
        j["error"] = "no successful cells to compare";
        return ojson::array({j});
    }
    const auto da = abs_mean_delta(a.aues_values(), b.aues_values());
    auto out = compare_curves(average_curves(ca, a.method), average_curves(cb, b.method), a.method, b.method,
                              da.value_or(std::nan("")), abs_mean_delta(a.mu95_values(), b.mu95_values()), want_mu95,
                              spec, index);
    for (auto &j : out) j["objective"] = a.objective;
    return out;
}

std::vector<std::string> summary_row(const std::string &experiment, const std::string &objective,
                                     const std::string &method, const std::string &seed, const CellResult &c,
                                     bool want_mu95) {
    return {experiment,
            objective,
            method,
            seed,
            c.ok ? format_double(c.aues) : "",
            c.ok && want_mu95 && c.mu95 ? format_double(*c.mu95) : "",
            c.ok ? "ok" : "error"};
}

ojson report_header(const ExperimentSpec &spec) {
    ojson j;
    j["experiment"] = to_string(spec.kind);
    ojson fp;
    fp["version"] = kVersion;
    fp["config_hash"] = config_hash(spec);
    fp["seeds"] = spec.seeds;
    fp["data_seed"] = spec.data.seed;
    fp["stats_seed"] = spec.stats_seed;
    j["fingerprint"] = fp;
    return j;
}

std::string seed_label(std::uint64_t s) { return std::to_string(s); }

std::string curve_path(const std::string &stem) { return "curves/" + stem + ".csv"; }

const std::vector<std::string> kSummaryHeader = {"experiment", "objective", "method", "seed", "aues", "mu95", "status"};

std::string random_label(std::size_t i) {
    if (i < 26) return std::string("random_") + static_cast<char>('a' + i);
    return "random_" + std::to_string(i);
}

} // namespace

// ================================================================ public

std::string to_string(ExperimentKind kind) {
    switch (kind) {
    case ExperimentKind::revisit: return "revisit";
    case ExperimentKind::controlled: return "controlled";
    case ExperimentKind::l2_distill: return "l2_distill";
    case ExperimentKind::pii_controlled: return "pii_controlled";
    }
    return "controlled";
}

ExperimentKind experiment_kind_from_string(const std::string &name) {
    if (name == "revisit") return ExperimentKind::revisit;
    if (name == "controlled") return ExperimentKind::controlled;
    if (name == "l2_distill" || name == "l2") return ExperimentKind::l2_distill;
    if (name == "pii_controlled" || name == "pii") return ExperimentKind::pii_controlled;
    throw ParseError("unknown experiment kind '" + name + "'");
}

StageConfigs default_stages() {
    StageConfigs st;
    st.pretrain.lr = 1e-3;
    st.pretrain.epochs = 3;
    st.full.lr = 1e-3;
    st.full.epochs = 60;
    st.full.target_es = 0.97;
    st.inject.lr = 1e-2;
    st.inject.epochs = 800;
    st.inject.target_es = 0.95;
    st.inject.lambda_retain = 2.0;
    st.unlearn.epochs = 20;
    st.unlearn.stop_fs = 0.95;
    st.distill.lr = 1e-2;
    st.distill.epochs = 30;
    return st;
}

double default_learning_rate(Objective objective) {
    switch (objective) {
    case Objective::npo: return 3e-3;
    case Objective::wga:
    case Objective::dpo:
    case Objective::rmu:
    case Objective::nll: return 1e-2;
    }
    return 1e-2;
}

void ExperimentSpec::validate() const {
    if (seeds.empty()) throw ContractError("seed list is empty");
    if (!(localization.ratio > 0.0 && localization.ratio < 1.0)) throw ContractError("ratio must lie in (0, 1)");
    localization.validate();
    objective.validate();
    for (const auto *t : {&training.pretrain, &training.full, &training.inject, &training.unlearn, &training.distill})
        t->validate();
    if (data.source != "author" && data.source != "pii" && data.source != "file")
        throw ContractError("data.source must be author, pii or file");
    if (data.source == "file" && data.path.empty()) throw ContractError("data.source 'file' needs data.path");
    if (!(data.forget_ratio > 0.0 && data.forget_ratio < 1.0)) throw ContractError("forget_ratio must lie in (0, 1)");
    if (!(mix_step > 0.0 && mix_step <= 1.0)) throw ContractError("mix_step must lie in (0, 1]");
    if (permutation_rounds < 100 || bootstrap_rounds < 100) throw ContractError("tests need at least 100 rounds");
    if (!(lr_grid_factor > 1.0)) throw ContractError("lr_grid_factor must exceed 1");
    for (const auto &[obj, lr] : learning_rates)
        if (!(lr > 0.0)) throw ContractError("learning rate for " + to_string(obj) + " must be positive");
    for (const auto &[obj, lr] : lr_overrides)
        if (!(lr > 0.0)) throw ContractError("learning rate for " + to_string(obj) + " must be positive");
    switch (kind) {
    case ExperimentKind::controlled:
    case ExperimentKind::pii_controlled:
        if (seeds.size() < 3) throw ContractError("controlled runs need at least 3 seeds");
        [[fallthrough]];
    case ExperimentKind::revisit:
        if (objectives.empty()) throw ContractError("objective set is empty");
        for (auto o : objectives)
            if (o == Objective::nll) throw ContractError("nll is not an unlearning objective");
        break;
    case ExperimentKind::l2_distill: break;
    }
    if (kind == ExperimentKind::revisit && methods.empty()) throw ContractError("method set is empty");
    if ((kind == ExperimentKind::l2_distill || kind == ExperimentKind::revisit) && random_seeds.empty())
        throw ContractError("random_seeds is empty");
    if (kind != ExperimentKind::revisit && localization.mode != MaskMode::value_vector)
        throw ContractError("only revisit runs support individual-weight regions");
}

ExperimentSpec default_spec(ExperimentKind kind) {
    ExperimentSpec s;
    s.kind = kind;
    switch (kind) {
    case ExperimentKind::revisit:
        s.objectives = {Objective::npo};
        s.methods = {LocalizationMethod::random, LocalizationMethod::activations, LocalizationMethod::memflex,
                     LocalizationMethod::wagle};
        s.seeds = {0};
        break;
    case ExperimentKind::controlled:
        s.objectives = {Objective::wga, Objective::npo, Objective::dpo, Objective::rmu};
        s.seeds = {0, 1, 2, 3, 4};
        break;
    case ExperimentKind::pii_controlled:
        s.data.source = "pii";
        s.objectives = {Objective::wga, Objective::npo, Objective::dpo, Objective::rmu};
        s.seeds = {0, 1, 2, 3, 4};
        break;
    case ExperimentKind::l2_distill: s.seeds = {0}; break;
    }
    s.model.seed = 5;
    return s;
}

ExperimentSpec spec_from_json(const json &j) {
    check_keys(j, {"kind", "model", "data", "objectives", "objective", "methods", "localization", "seeds",
                   "random_seeds", "training", "learning_rates", "lr_overrides", "lr_search", "lr_grid_factor",
                   "mix_step", "permutation_rounds", "bootstrap_rounds", "stats_seed", "cache", "output"},
               "spec");
    if (!j.contains("kind")) throw ParseError("spec: missing 'kind'");
    ExperimentSpec s = default_spec(experiment_kind_from_string(j.at("kind").get<std::string>()));
    if (j.contains("model")) {
        const auto &m = j.at("model");
        check_keys(m, {"n_layers", "d_model", "d_ff", "n_heads", "max_seq_len", "nonlinearity", "rmu_layer", "seed"},
                   "model");
        read(m, "n_layers", s.model.n_layers, "model");
        read(m, "d_model", s.model.d_model, "model");
        read(m, "d_ff", s.model.d_ff, "model");
        read(m, "n_heads", s.model.n_heads, "model");
        read(m, "max_seq_len", s.model.max_seq_len, "model");
        std::string f = to_string(s.model.nonlinearity);
        read(m, "nonlinearity", f, "model");
        s.model.nonlinearity = nonlinearity_from_string(f);
        read(m, "rmu_layer", s.model.rmu_layer, "model");
        read(m, "seed", s.model.seed, "model");
    }
    if (j.contains("data")) {
        const auto &d = j.at("data");
        check_keys(d, {"source", "path", "n_entities", "attrs_per_entity", "n_records", "k_perturbed", "forget_ratio",
                       "seed", "split_seed", "pretrain_examples", "pretrain_seed"},
                   "data");
        read(d, "source", s.data.source, "data");
        read(d, "path", s.data.path, "data");
        read(d, "n_entities", s.data.n_entities, "data");
        read(d, "attrs_per_entity", s.data.attrs_per_entity, "data");
        read(d, "n_records", s.data.n_records, "data");
        read(d, "k_perturbed", s.data.k_perturbed, "data");
        read(d, "forget_ratio", s.data.forget_ratio, "data");
        read(d, "seed", s.data.seed, "data");
        read(d, "split_seed", s.data.split_seed, "data");
        read(d, "pretrain_examples", s.data.pretrain_examples, "data");
        read(d, "pretrain_seed", s.data.pretrain_seed, "data");
    }
    if (j.contains("objectives")) {
        s.objectives.clear();
        for (const auto &o : j.at("objectives")) s.objectives.push_back(objective_from_string(o.get<std::string>()));
    }
    if (j.contains("objective")) {
        const auto &o = j.at("objective");
        check_keys(o, {"wga_alpha", "npo_beta", "dpo_beta", "rmu_scale", "rmu_direction", "rmu_seed", "l2_alpha"},
                   "objective");
        read(o, "wga_alpha", s.objective.wga_alpha, "objective");
        read(o, "npo_beta", s.objective.npo_beta, "objective");
        read(o, "dpo_beta", s.objective.dpo_beta, "objective");
        read(o, "rmu_scale", s.objective.rmu_scale, "objective");
        read(o, "rmu_direction", s.objective.rmu_direction, "objective");
        read(o, "rmu_seed", s.objective.rmu_seed, "objective");
        read(o, "l2_alpha", s.objective.l2_alpha, "objective");
    }
    if (j.contains("methods")) {
        s.methods.clear();
        for (const auto &m : j.at("methods"))
            s.methods.push_back(localization_method_from_string(m.get<std::string>()));
    }
    if (j.contains("localization")) {
        const auto &l = j.at("localization");
        check_keys(l, {"ratio", "mode", "memflex_mu", "memflex_sigma", "memflex_rounds", "wagle_gamma",
                       "wagle_gamma_examples", "seed"},
                   "localization");
        read(l, "ratio", s.localization.ratio, "localization");
        std::string mode = mode_name(s.localization.mode);
        read(l, "mode", mode, "localization");
        s.localization.mode = mode_from_name(mode);
        read(l, "memflex_mu", s.localization.memflex_mu, "localization");
        read(l, "memflex_sigma", s.localization.memflex_sigma, "localization");
        read(l, "memflex_rounds", s.localization.memflex_rounds, "localization");
        read(l, "wagle_gamma", s.localization.wagle_gamma, "localization");
        read(l, "wagle_gamma_examples", s.localization.wagle_gamma_examples, "localization");
        read(l, "seed", s.localization.seed, "localization");
    }
    read(j, "seeds", s.seeds, "spec");
    read(j, "random_seeds", s.random_seeds, "spec");
    if (j.contains("training")) {
        const auto &t = j.at("training");
        check_keys(t, {"pretrain", "full", "inject", "unlearn", "distill"}, "training");
        if (t.contains("pretrain")) s.training.pretrain = train_from_json(t.at("pretrain"), s.training.pretrain, "training.pretrain");
        if (t.contains("full")) s.training.full = train_from_json(t.at("full"), s.training.full, "training.full");
        if (t.contains("inject")) s.training.inject = train_from_json(t.at("inject"), s.training.inject, "training.inject");
        if (t.contains("unlearn")) s.training.unlearn = train_from_json(t.at("unlearn"), s.training.unlearn, "training.unlearn");
        if (t.contains("distill")) s.training.distill = train_from_json(t.at("distill"), s.training.distill, "training.distill");
    }
    if (j.contains("learning_rates")) s.learning_rates = lr_map_from_json(j.at("learning_rates"), "learning_rates");
    if (j.contains("lr_overrides")) s.lr_overrides = lr_map_from_json(j.at("lr_overrides"), "lr_overrides");
    read(j, "lr_search", s.lr_search, "spec");
    read(j, "lr_grid_factor", s.lr_grid_factor, "spec");
    read(j, "mix_step", s.mix_step, "spec");
    read(j, "permutation_rounds", s.permutation_rounds, "spec");
    read(j, "bootstrap_rounds", s.bootstrap_rounds, "spec");
    read(j, "stats_seed", s.stats_seed, "spec");
    read(j, "cache", s.cache, "spec");
    read(j, "output", s.output, "spec");
    s.validate();
    return s;
}

ExperimentSpec load_spec(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error &e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return spec_from_json(j);
}

ojson spec_to_json(const ExperimentSpec &spec, bool include_output) {
    ojson j;
    j["kind"] = to_string(spec.kind);
    j["model"] = model_to_json(spec.model);
    j["data"] = data_to_json(spec.data);
    ojson objs = ojson::array();
    for (auto o : spec.objectives) objs.push_back(to_string(o));
    j["objectives"] = objs;
    j["objective"] = objective_to_json(spec.objective);
    ojson methods = ojson::array();
    for (auto m : spec.methods) methods.push_back(to_string(m));
    j["methods"] = methods;
    j["localization"] = localization_to_json(spec.localization);
    j["seeds"] = spec.seeds;
    j["random_seeds"] = spec.random_seeds;
    ojson t;
    t["pretrain"] = train_to_json(spec.training.pretrain);
    t["full"] = train_to_json(spec.training.full);
    t["inject"] = train_to_json(spec.training.inject);
    t["unlearn"] = train_to_json(spec.training.unlearn);
    t["distill"] = train_to_json(spec.training.distill);
    j["training"] = t;
    j["learning_rates"] = lr_map_to_json(spec.learning_rates);
    j["lr_overrides"] = lr_map_to_json(spec.lr_overrides);
    j["lr_search"] = spec.lr_search;
    j["lr_grid_factor"] = spec.lr_grid_factor;
    j["mix_step"] = spec.mix_step;
    j["permutation_rounds"] = spec.permutation_rounds;
    j["bootstrap_rounds"] = spec.bootstrap_rounds;
    j["stats_seed"] = spec.stats_seed;
    j["cache"] = spec.cache;
    if (include_output) j["output"] = spec.output;
    return j;
}

std::string config_hash(const ExperimentSpec &spec) { return hex16(fnv1a(spec_to_json(spec).dump())); }

Aggregate aggregate(std::vector<double> values) {
    Aggregate a;
    a.values = std::move(values);
    if (a.values.empty()) {
        a.mean = std::nan("");
        return a;
    }
    const double n = static_cast<double>(a.values.size());
    a.mean = std::accumulate(a.values.begin(), a.values.end(), 0.0) / n;
    if (a.values.size() >= 2) {
        double ss = 0.0;
        for (double v : a.values) ss += (v - a.mean) * (v - a.mean);
        a.sd = std::sqrt(ss / (n - 1.0));
    }
    return a;
}

MixCurve average_curves(const std::vector<MixCurve> &curves, const std::string &label) {
    if (curves.empty()) throw ContractError("no curves to average");
    MixCurve out;
    out.label = label;
    out.points.resize(curves.front().points.size());
    for (const auto &c : curves) {
        if (c.points.size() != out.points.size()) throw ContractError("curves have different alpha grids");
        for (std::size_t i = 0; i < c.points.size(); ++i) {
            if (std::abs(c.points[i].alpha - curves.front().points[i].alpha) > 1e-12)
                throw ContractError("curves have different alpha grids");
            auto &p = out.points[i];
            p.alpha = c.points[i].alpha;
            p.fs += c.points[i].fs;
            p.rs += c.points[i].rs;
            p.mu += c.points[i].mu;
            p.fq += c.points[i].fq;
            p.es_forget += c.points[i].es_forget;
            p.es_retain += c.points[i].es_retain;
        }
    }
    const double n = static_cast<double>(curves.size());
    for (auto &p : out.points) {
        p.fs /= n;
        p.rs /= n;
        p.mu /= n;
        p.fq /= n;
        p.es_forget /= n;
        p.es_retain /= n;
    }
    return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)> &task) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first;
    std::mutex mu;
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < jobs; ++w)
        workers.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    task(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first) first = std::current_exception();
                }
            }
        });
    for (auto &t : workers) t.join();
    if (first) std::rethrow_exception(first);
}

// ------------------------------------------------------------ controlled

ExperimentReport run_controlled(const ExperimentSpec &spec, const RunOptions &options) {
    spec.validate();
    if (spec.kind != ExperimentKind::controlled && spec.kind != ExperimentKind::pii_controlled)
        throw ContractError("run_controlled needs a controlled or pii_controlled spec");
    const bool want_mu95 = spec.kind == ExperimentKind::controlled;
    const std::string kind = to_string(spec.kind);
    Progress log(options.log);
    ExperimentReport report;
    const auto t0 = Clock::now();
    Setup s = prepare(spec, log, report.timings);
    auto injected = inject_all(spec, s, options.jobs, log, report.timings);

    const auto t_lr = Clock::now();
    std::map<Objective, double> rates;
    ojson lr_info = ojson::array();
    for (auto obj : spec.objectives) {
        const auto &first = injected.front();
        auto choice = choose_lr(spec, s, first.theta_o,
                                {{"oracle", first.region.target}, {"random", first.region.random}}, obj, first.seed,
                                options.jobs, log);
        rates[obj] = choice.lr;
        lr_info.push_back(choice.info);
    }
    report.timings["lr_search"] = seconds_since(t_lr);

    // Cell order: objective, scenario, seed.
    const std::vector<std::string> scenarios = {"oracle", "random"};
    const std::size_t n_seeds = spec.seeds.size();
    const std::size_t n_cells = spec.objectives.size() * scenarios.size() * n_seeds;
    std::vector<CellResult> cells(n_cells);
    const auto t_cells = Clock::now();
    parallel_for(n_cells, options.jobs, [&](std::size_t i) {
        const std::size_t o = i / (2 * n_seeds), sc = (i / n_seeds) % 2, k = i % n_seeds;
        const auto obj = spec.objectives[o];
        const auto &inj = injected[k];
        cells[i] = run_unlearn_cell(spec, s, inj.theta_o, sc == 0 ? inj.region.target : inj.region.random, obj,
                                    rates[obj], inj.seed, want_mu95, true);
        log(to_string(obj) + "/" + scenarios[sc] + "/seed " + seed_label(inj.seed) + ": " +
            (cells[i].ok ? "AUES " + format_double(cells[i].aues) : "error: " + cells[i].error));
    });
    report.timings["cells"] = seconds_since(t_cells);

    ojson j = report_header(spec);
    ojson setup = s.info;
    ojson inj_info = ojson::array();
    for (const auto &inj : injected) inj_info.push_back(inj.info);
    setup["injection"] = inj_info;
    j["setup"] = setup;
    j["learning_rates"] = lr_info;

    ojson cell_list = ojson::array();
    report.summary_header = kSummaryHeader;
    for (std::size_t i = 0; i < n_cells; ++i) {
        const std::size_t o = i / (2 * n_seeds), sc = (i / n_seeds) % 2, k = i % n_seeds;
        const std::string obj = to_string(spec.objectives[o]);
        const std::string stem = obj + "_" + scenarios[sc] + "_seed" + seed_label(spec.seeds[k]);
        ojson c;
        c["objective"] = obj;
        c["scenario"] = scenarios[sc];
        c["seed"] = spec.seeds[k];
        c.update(cell_json(cells[i], want_mu95));
        if (cells[i].ok) {
            c["curve"] = curve_path(stem);
            report.curves.emplace_back(curve_path(stem), cells[i].curve);
        }
        cell_list.push_back(c);
        report.summary_rows.push_back(
            summary_row(kind, obj, scenarios[sc], seed_label(spec.seeds[k]), cells[i], want_mu95));
    }
    j["cells"] = cell_list;

    ojson summary = ojson::array();
    ojson comparisons = ojson::array();
    for (std::size_t o = 0; o < spec.objectives.size(); ++o) {
        Group g[2];
        for (std::size_t sc = 0; sc < 2; ++sc) {
            g[sc].objective = to_string(spec.objectives[o]);
            g[sc].method = scenarios[sc];
            for (std::size_t k = 0; k < n_seeds; ++k) g[sc].cells.push_back(&cells[(o * 2 + sc) * n_seeds + k]);
            summary.push_back(group_summary(g[sc], want_mu95));
        }
        for (auto &c : compare_groups(g[0], g[1], want_mu95, spec, o)) comparisons.push_back(c);
    }
    j["summary"] = summary;
    j["comparisons"] = comparisons;
    report.json = std::move(j);
    report.timings["total"] = seconds_since(t0);
    return report;
}

// --------------------------------------------------------------- revisit

ExperimentReport run_revisit(const ExperimentSpec &spec, const RunOptions &options) {
    spec.validate();
    if (spec.kind != ExperimentKind::revisit) throw ContractError("run_revisit needs a revisit spec");
    Progress log(options.log);
    ExperimentReport report;
    const auto t0 = Clock::now();
    Setup s = prepare(spec, log, report.timings);
    auto injected = inject_all(spec, s, options.jobs, log, report.timings);
    const MaskMode mode = spec.localization.mode;

    // Regions per seed: the full-model baseline, then each method (random
    // expands to one region per random seed).
    struct RegionSpec {
        std::string method;
        std::optional<std::uint64_t> random_seed;
    };
    std::vector<RegionSpec> regions{{"original", std::nullopt}};
    for (auto m : spec.methods) {
        if (m == LocalizationMethod::random)
            for (auto r : spec.random_seeds) regions.push_back({"random", r});
        else
            regions.push_back({to_string(m), std::nullopt});
    }
    const std::size_t n_seeds = spec.seeds.size(), n_regions = regions.size();
    std::vector<ValueVectorMask> masks(n_seeds * n_regions);
    std::vector<std::string> mask_errors(masks.size());
    const auto t_loc = Clock::now();
    parallel_for(masks.size(), options.jobs, [&](std::size_t i) {
        const auto &inj = injected[i / n_regions];
        const auto &rg = regions[i % n_regions];
        try {
            if (rg.method == "original") masks[i] = ValueVectorMask::full(s.model, mode);
            else if (rg.random_seed) masks[i] = select_random(s.model, spec.localization.ratio, *rg.random_seed, nullptr, mode);
            else {
                LocalizationConfig cfg = spec.localization;
                cfg.seed = Rng::derive_seed(Rng::derive_seed(inj.seed, kLocalizeTag), cfg.seed);
                masks[i] = localize(localization_method_from_string(rg.method), inj.theta_o, s.forget, s.retain, cfg);
            }
        } catch (const std::exception &e) {
            mask_errors[i] = e.what();
        }
    });
    report.timings["localization"] = seconds_since(t_loc);

    const auto t_lr = Clock::now();
    std::map<Objective, double> rates;
    ojson lr_info = ojson::array();
    for (auto obj : spec.objectives) {
        std::vector<std::pair<std::string, ValueVectorMask>> scen;
        for (std::size_t r = 1; r < n_regions; ++r) {
            if (!mask_errors[r].empty()) continue;
            std::string name = regions[r].method;
            if (regions[r].random_seed) name += "_" + std::to_string(*regions[r].random_seed);
            scen.emplace_back(name, masks[r]);
        }
        if (scen.empty()) scen.emplace_back("original", masks[0]);
        auto choice = choose_lr(spec, s, injected.front().theta_o, scen, obj, injected.front().seed, options.jobs, log);
        rates[obj] = choice.lr;
        lr_info.push_back(choice.info);
    }
    report.timings["lr_search"] = seconds_since(t_lr);

    // Cell order: objective, region, seed.
    const std::size_t n_cells = spec.objectives.size() * n_regions * n_seeds;
    std::vector<CellResult> cells(n_cells);
    const auto t_cells = Clock::now();
    parallel_for(n_cells, options.jobs, [&](std::size_t i) {
        const std::size_t o = i / (n_regions * n_seeds), r = (i / n_seeds) % n_regions, k = i % n_seeds;
        const auto obj = spec.objectives[o];
        const auto &inj = injected[k];
        const std::size_t m = k * n_regions + r;
        if (!mask_errors[m].empty()) {
            cells[i].error = "localization failed: " + mask_errors[m];
            return;
        }
        cells[i] = run_unlearn_cell(spec, s, inj.theta_o, masks[m], obj, rates[obj], inj.seed, true, true);
        log(to_string(obj) + "/" + regions[r].method + "/seed " + seed_label(inj.seed) + ": " +
            (cells[i].ok ? "AUES " + format_double(cells[i].aues) : "error: " + cells[i].error));
    });
    report.timings["cells"] = seconds_since(t_cells);

    ojson j = report_header(spec);
    j["notes"] = ojson::array(
        {"Unlearning starts from a model whose forget facts were injected into a hidden target region, since no "
         "pre-memorized checkpoint exists at this scale.",
         "The 'original' row unlearns with every unit of the selected mode trainable (no localization)."});
    ojson setup = s.info;
    ojson inj_info = ojson::array();
    for (const auto &inj : injected) inj_info.push_back(inj.info);
    setup["injection"] = inj_info;
    ojson region_info = ojson::array();
    for (std::size_t k = 0; k < n_seeds; ++k)
        for (std::size_t r = 0; r < n_regions; ++r) {
            const auto &mask = masks[k * n_regions + r];
            ojson ri;
            ri["seed"] = spec.seeds[k];
            ri["method"] = regions[r].method;
            if (regions[r].random_seed) ri["random_seed"] = *regions[r].random_seed;
            if (!mask_errors[k * n_regions + r].empty()) {
                ri["error"] = mask_errors[k * n_regions + r];
            } else {
                ri["units"] = mask.size();
                // Fraction of the region's W_V weights that lie in the injected target.
                const auto target = injected[k].region.target.weight_indices(s.model);
                const std::set<std::size_t> tset(target.begin(), target.end());
                const auto w = mask.weight_indices(s.model);
                std::size_t hit = 0;
                for (auto x : w) hit += tset.count(x);
                ri["target_overlap"] = w.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(w.size());
            }
            region_info.push_back(ri);
        }
    setup["regions"] = region_info;
    setup["mode"] = mode_name(mode);
    setup["ratio"] = spec.localization.ratio;
    j["setup"] = setup;
    j["learning_rates"] = lr_info;

    ojson cell_list = ojson::array();
    report.summary_header = kSummaryHeader;
    for (std::size_t i = 0; i < n_cells; ++i) {
        const std::size_t o = i / (n_regions * n_seeds), r = (i / n_seeds) % n_regions, k = i % n_seeds;
        const std::string obj = to_string(spec.objectives[o]);
        std::string stem = obj + "_" + regions[r].method;
        if (regions[r].random_seed) stem += "_r" + std::to_string(*regions[r].random_seed);
        stem += "_seed" + seed_label(spec.seeds[k]);
        ojson c;
        c["objective"] = obj;
        c["method"] = regions[r].method;
        if (regions[r].random_seed) c["random_seed"] = *regions[r].random_seed;
        c["seed"] = spec.seeds[k];
        c.update(cell_json(cells[i], true));
        if (cells[i].ok) {
            c["curve"] = curve_path(stem);
            report.curves.emplace_back(curve_path(stem), cells[i].curve);
        }
        cell_list.push_back(c);
        std::string seed = seed_label(spec.seeds[k]);
        if (regions[r].random_seed) seed += "/" + std::to_string(*regions[r].random_seed);
        report.summary_rows.push_back(summary_row("revisit", obj, regions[r].method, seed, cells[i], true));
    }
    j["cells"] = cell_list;

    ojson summary = ojson::array();
    ojson comparisons = ojson::array();
    std::uint64_t index = 0;
    for (std::size_t o = 0; o < spec.objectives.size(); ++o) {
        std::vector<std::string> names;
        std::map<std::string, Group> groups;
        for (std::size_t r = 0; r < n_regions; ++r) {
            auto &g = groups[regions[r].method];
            if (g.cells.empty()) names.push_back(regions[r].method);
            g.objective = to_string(spec.objectives[o]);
            g.method = regions[r].method;
            for (std::size_t k = 0; k < n_seeds; ++k) g.cells.push_back(&cells[(o * n_regions + r) * n_seeds + k]);
        }
        for (const auto &n : names) summary.push_back(group_summary(groups[n], true));
        if (groups.count("random"))
            for (const auto &n : names)
                if (n != "random")
                    for (auto &c : compare_groups(groups[n], groups["random"], true, spec, index++))
                        comparisons.push_back(c);
    }
    j["summary"] = summary;
    j["comparisons"] = comparisons;
    report.json = std::move(j);
    report.timings["total"] = seconds_since(t0);
    return report;
}

// -------------------------------------------------------------------- l2

ExperimentReport run_l2_distill(const ExperimentSpec &spec, const RunOptions &options) {
    spec.validate();
    if (spec.kind != ExperimentKind::l2_distill) throw ContractError("run_l2_distill needs an l2_distill spec");
    Progress log(options.log);
    ExperimentReport report;
    const auto t0 = Clock::now();
    Setup s = prepare(spec, log, report.timings);
    auto injected = inject_all(spec, s, options.jobs, log, report.timings);

    std::vector<std::string> names{"oracle"};
    for (std::size_t r = 0; r < spec.random_seeds.size(); ++r) names.push_back(random_label(r));
    const std::size_t n_seeds = spec.seeds.size(), n_sc = names.size();
    std::vector<CellResult> cells(n_seeds * n_sc);
    std::vector<std::size_t> units(cells.size(), 0);
    const auto t_cells = Clock::now();
    parallel_for(cells.size(), options.jobs, [&](std::size_t i) {
        const std::size_t k = i / n_sc, r = i % n_sc;
        const auto &inj = injected[k];
        CellResult &cell = cells[i];
        try {
            const ValueVectorMask mask =
                r == 0 ? inj.region.target
                       : select_random(s.model, spec.localization.ratio, spec.random_seeds[r - 1], &inj.region.target);
            units[i] = mask.size();
            TrainConfig cfg = spec.training.distill;
            cfg.seed = Rng::derive_seed(inj.seed, kDistillTag);
            cell.lr = cfg.lr;
            auto res = distill_unlearn(inj.theta_o, s.theta_r, mask, s.forget, s.retain, s.objective, cfg);
            if (!identical_outside(inj.theta_o, res.params, mask))
                throw ContractError("distillation changed parameters outside the mask");
            const auto &init = res.log.initial_residuals;
            const auto &last = res.log.epochs.back().residuals;
            cell.residual_initial = std::accumulate(init.begin(), init.end(), 0.0);
            cell.residual_final = std::accumulate(last.begin(), last.end(), 0.0);
            cell.steps = res.log.steps.size();
            cell.stop_reason = res.log.stop_reason;
            cell.final_fs = 1.0 - res.log.epochs.back().es_forget;
            finish_cell(cell, inj.theta_o, res.params, spec, s, true);
        } catch (const std::exception &e) {
            cell.ok = false;
            cell.error = e.what();
        }
        log(names[r] + "/seed " + seed_label(inj.seed) + ": " +
            (cell.ok ? "residual " + format_double(cell.residual_initial) + " -> " + format_double(cell.residual_final)
                     : "error: " + cell.error));
    });
    report.timings["cells"] = seconds_since(t_cells);

    ojson j = report_header(spec);
    ojson setup = s.info;
    ojson inj_info = ojson::array();
    for (const auto &inj : injected) inj_info.push_back(inj.info);
    setup["injection"] = inj_info;
    ojson rs = ojson::object();
    rs["oracle"] = "target";
    for (std::size_t r = 0; r < spec.random_seeds.size(); ++r) rs[random_label(r)] = spec.random_seeds[r];
    setup["region_seeds"] = rs;
    j["setup"] = setup;

    const double theta_r_fs = s.info["theta_r"]["fs"].get<double>();
    ojson cell_list = ojson::array();
    report.summary_header = kSummaryHeader;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const std::size_t k = i / n_sc, r = i % n_sc;
        const auto &c = cells[i];
        const std::string stem = names[r] + "_seed" + seed_label(spec.seeds[k]);
        ojson cj;
        cj["scenario"] = names[r];
        cj["seed"] = spec.seeds[k];
        if (r > 0) cj["region_seed"] = spec.random_seeds[r - 1];
        cj["units"] = units[i];
        cj.update(cell_json(c, true));
        if (c.ok) {
            cj["residual_initial"] = c.residual_initial;
            cj["residual_final"] = c.residual_final;
            const double ratio = c.residual_initial > 0.0 ? c.residual_final / c.residual_initial : 0.0;
            cj["residual_ratio"] = ratio;
            cj["residual_reduction"] = 1.0 - ratio;
            cj["end_fs"] = c.curve.points.back().fs;
            cj["theta_r_fs"] = theta_r_fs;
            cj["curve"] = curve_path(stem);
            report.curves.emplace_back(curve_path(stem), c.curve);
        }
        cell_list.push_back(cj);
        report.summary_rows.push_back(summary_row("l2_distill", "l2", names[r], seed_label(spec.seeds[k]), c, true));
    }
    j["cells"] = cell_list;

    ojson summary = ojson::array();
    ojson comparisons = ojson::array();
    std::vector<Group> groups(n_sc);
    for (std::size_t r = 0; r < n_sc; ++r) {
        groups[r].objective = "l2";
        groups[r].method = names[r];
        for (std::size_t k = 0; k < n_seeds; ++k) groups[r].cells.push_back(&cells[k * n_sc + r]);
        summary.push_back(group_summary(groups[r], true));
    }
    for (std::size_t r = 1; r < n_sc; ++r)
        for (auto &c : compare_groups(groups[0], groups[r], true, spec, r - 1)) comparisons.push_back(c);
    j["summary"] = summary;
    j["comparisons"] = comparisons;
    report.json = std::move(j);
    report.timings["total"] = seconds_since(t0);
    return report;
}

ExperimentReport run_experiment(const ExperimentSpec &spec, const RunOptions &options) {
    switch (spec.kind) {
    case ExperimentKind::revisit: return run_revisit(spec, options);
    case ExperimentKind::controlled:
    case ExperimentKind::pii_controlled: return run_controlled(spec, options);
    case ExperimentKind::l2_distill: return run_l2_distill(spec, options);
    }
    throw ContractError("unknown experiment kind");
}

// ------------------------------------------------------------------ output

namespace {

void write_text(const std::filesystem::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("failed writing " + path.string());
}

std::string csv_field(const std::string &s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

} // namespace

std::vector<std::filesystem::path> emit_report(const ExperimentReport &report, const std::filesystem::path &dir) {
    std::vector<std::filesystem::path> written;
    std::error_code ec;
    std::filesystem::create_directories(dir / "curves", ec);
    if (ec) throw IoError("cannot create " + (dir / "curves").string() + ": " + ec.message());

    const auto report_path = dir / "report.json";
    write_text(report_path, report.json.dump(2) + "\n");
    written.push_back(report_path);

    std::ostringstream csv;
    for (std::size_t i = 0; i < report.summary_header.size(); ++i)
        csv << (i ? "," : "") << csv_field(report.summary_header[i]);
    csv << '\n';
    for (const auto &row : report.summary_rows) {
        for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << csv_field(row[i]);
        csv << '\n';
    }
    const auto summary_path = dir / "summary.csv";
    write_text(summary_path, csv.str());
    written.push_back(summary_path);

    const auto timing_path = dir / "timings.json";
    write_text(timing_path, report.timings.dump(2) + "\n");
    written.push_back(timing_path);

    for (const auto &[rel, curve] : report.curves) {
        const auto path = dir / rel;
        curve.save_csv(path);
        written.push_back(path);
    }
    return written;
}

ojson load_report(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    try {
        return ojson::parse(in);
    } catch (const json::parse_error &e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

} // namespace loclab
