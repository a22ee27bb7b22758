// Python module loclab._core: corpus generation, the model, losses, metrics,
// the significance tests and whole experiment runs.

#include "loclab/data.hpp"
#include "loclab/error.hpp"
#include "loclab/evaluation.hpp"
#include "loclab/experiments.hpp"
#include "loclab/localization.hpp"
#include "loclab/model.hpp"
#include "loclab/objectives.hpp"
#include "loclab/stats.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace loclab;

namespace {

using Points = std::vector<std::pair<double, double>>;

MixCurve curve_from(const std::vector<std::tuple<double, double, double>> &points) {
    MixCurve c;
    for (const auto &[alpha, fs, rs] : points) c.points.push_back({alpha, fs, rs, 0.0, 0.0, 0.0, 0.0});
    c.validate();
    return c;
}

py::dict result_dict(const TestResult &r) {
    py::dict d;
    d["observed"] = r.observed;
    d["p_value"] = r.p_value;
    d["n_rounds"] = r.n_rounds;
    d["seed"] = r.seed;
    d["redraws"] = r.redraws;
    return d;
}

Batch make_batch(const std::vector<std::vector<int>> &prompts, const std::vector<std::vector<int>> &answers) {
    Batch b;
    b.prompts = prompts;
    b.answers = answers;
    b.validate();
    return b;
}

ModelConfig model_config(std::size_t vocab_size, std::size_t n_layers, std::size_t d_model, std::size_t d_ff,
                         std::size_t n_heads, std::size_t max_seq_len, std::size_t rmu_layer, std::uint64_t seed) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.d_ff = d_ff;
    c.n_heads = n_heads;
    c.max_seq_len = max_seq_len;
    c.rmu_layer = rmu_layer;
    c.seed = seed;
    c.validate();
    return c;
}

std::vector<std::pair<std::size_t, std::size_t>> vector_ids(const ValueVectorMask &mask) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto &id : mask.vectors()) out.emplace_back(id.layer, id.index);
    return out;
}

ExperimentSpec parse_spec(const std::string &text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception &e) {
        throw ParseError(std::string("spec is not valid JSON: ") + e.what());
    }
    return spec_from_json(j);
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Localized unlearning lab: native core";
    m.attr("__version__") = kVersion;

    auto base = py::register_exception<Error>(m, "LoclabError");
    py::register_exception<ParseError>(m, "ParseError", base);
    py::register_exception<ContractError>(m, "ContractError", base);
    py::register_exception<DimensionError>(m, "DimensionError", base);
    py::register_exception<IoError>(m, "IoError", base);
    py::register_exception<TrainingError>(m, "TrainingError", base);
    py::register_exception<InsufficientUnlearningError>(m, "InsufficientUnlearningError", base);
    py::register_exception<InstabilityError>(m, "InstabilityError", base);

    // ------------------------------------------------------------------ data
    m.def(
        "author_corpus_json",
        [](std::uint64_t seed, std::size_t n_entities, std::size_t attrs, std::size_t k_perturbed,
           double forget_ratio, std::uint64_t split_seed) {
            auto c = generate_author_corpus(seed, n_entities, attrs, k_perturbed);
            if (forget_ratio > 0.0) c = split(std::move(c), forget_ratio, split_seed);
            return corpus_to_json(c);
        },
        py::arg("seed"), py::arg("n_entities"), py::arg("attrs_per_entity") = 4, py::arg("k_perturbed") = 3,
        py::arg("forget_ratio") = 0.0, py::arg("split_seed") = 0);
    m.def(
        "pii_corpus_json",
        [](std::uint64_t seed, std::size_t n_records, std::size_t k_perturbed) {
            return corpus_to_json(generate_pii_corpus(seed, n_records, k_perturbed));
        },
        py::arg("seed"), py::arg("n_records"), py::arg("k_perturbed") = 3);

    // ----------------------------------------------------------------- model
    py::class_<Parameters>(m, "Model")
        .def(py::init([](std::size_t vocab_size, std::size_t n_layers, std::size_t d_model, std::size_t d_ff,
                         std::size_t n_heads, std::size_t max_seq_len, std::size_t rmu_layer, std::uint64_t seed) {
                 return Parameters::init(
                     model_config(vocab_size, n_layers, d_model, d_ff, n_heads, max_seq_len, rmu_layer, seed));
             }),
             py::arg("vocab_size"), py::arg("n_layers") = 4, py::arg("d_model") = 64, py::arg("d_ff") = 128,
             py::arg("n_heads") = 4, py::arg("max_seq_len") = 64, py::arg("rmu_layer") = 2, py::arg("seed") = 0)
        .def_static("load", &Parameters::load, py::arg("path"))
        .def("save", &Parameters::save, py::arg("path"))
        .def_property_readonly("value_vector_count", [](const Parameters &p) { return p.config().value_vector_count(); })
        .def_property_readonly("vocab_size", [](const Parameters &p) { return p.config().vocab_size; })
        .def(
            "forward",
            [](const Parameters &p, const std::vector<int> &tokens) {
                const auto res = forward(p, tokens);
                const std::size_t rows = res.logits.rows(), cols = res.logits.cols();
                py::array_t<double> out({rows, cols});
                const auto data = res.logits.data();
                std::copy(data.begin(), data.end(), out.mutable_data());
                return out;
            },
            py::arg("tokens"), "Logits, one row per position.")
        .def(
            "greedy_decode",
            [](const Parameters &p, const std::vector<int> &prefix, std::size_t n) { return greedy_decode(p, prefix, n); },
            py::arg("prefix"), py::arg("n_steps"))
        .def(
            "extraction_strength",
            [](const Parameters &p, const std::vector<int> &x, const std::vector<int> &y) {
                return extraction_strength(p, x, y);
            },
            py::arg("prompt"), py::arg("answer"))
        .def(
            "sequence_log_probs",
            [](const Parameters &p, const std::vector<std::vector<int>> &prompts,
               const std::vector<std::vector<int>> &answers) { return sequence_log_probs(p, prompts, answers); },
            py::arg("prompts"), py::arg("answers"))
        .def(
            "nll_loss",
            [](const Parameters &p, const std::vector<std::vector<int>> &prompts,
               const std::vector<std::vector<int>> &answers) { return nll_loss(p, make_batch(prompts, answers)); },
            py::arg("prompts"), py::arg("answers"))
        .def(
            "wga_loss",
            [](const Parameters &p, const std::vector<std::vector<int>> &prompts,
               const std::vector<std::vector<int>> &answers,
               double alpha) { return wga_loss(p, make_batch(prompts, answers), alpha); },
            py::arg("prompts"), py::arg("answers"), py::arg("alpha"))
        .def(
            "npo_loss",
            [](const Parameters &p, const Parameters &reference, const std::vector<std::vector<int>> &prompts,
               const std::vector<std::vector<int>> &answers,
               double beta) { return npo_loss(p, reference, make_batch(prompts, answers), beta); },
            py::arg("reference"), py::arg("prompts"), py::arg("answers"), py::arg("beta"))
        .def("mix", [](const Parameters &original, const Parameters &updated, double alpha) {
            return mix(original, updated, alpha);
        });

    // -------------------------------------------------------------- regions
    m.def("selection_size", &selection_size, py::arg("total"), py::arg("ratio"));
    m.def(
        "random_region",
        [](std::size_t n_layers, std::size_t d_ff, double ratio, std::uint64_t seed) {
            ModelConfig c;
            c.n_layers = n_layers;
            c.d_ff = d_ff;
            return vector_ids(select_random(c, ratio, seed));
        },
        py::arg("n_layers"), py::arg("d_ff"), py::arg("ratio"), py::arg("seed"),
        "Uniform sample of (layer, index) value vectors.");
    m.def(
        "draw_region",
        [](std::size_t n_layers, std::size_t d_ff, double ratio, std::uint64_t target_seed, std::uint64_t random_seed) {
            ModelConfig c;
            c.n_layers = n_layers;
            c.d_ff = d_ff;
            const auto r = draw_region(c, ratio, target_seed, random_seed);
            return py::make_tuple(vector_ids(r.target), vector_ids(r.random));
        },
        py::arg("n_layers"), py::arg("d_ff"), py::arg("ratio"), py::arg("target_seed"), py::arg("random_seed"));

    // -------------------------------------------------------------- metrics
    m.def(
        "aues", [](Points fs_rs, bool extend) { return aues(std::move(fs_rs), extend); }, py::arg("fs_rs"),
        py::arg("extend") = true);
    m.def(
        "mu95", [](const Points &mu_fq, double mu_initial) { return mu95(mu_fq, mu_initial); }, py::arg("mu_fq"),
        py::arg("mu_initial"));
    m.def(
        "ks_test",
        [](const std::vector<double> &a, const std::vector<double> &b, bool exact) {
            const auto r = exact ? ks_test_exact(a, b) : ks_test(a, b);
            return py::make_tuple(r.statistic, r.log_p);
        },
        py::arg("a"), py::arg("b"), py::arg("exact") = false, "Returns (statistic, ln p).");

    // ---------------------------------------------------------------- stats
    m.def(
        "aues_permutation_test",
        [](const std::vector<std::tuple<double, double, double>> &a,
           const std::vector<std::tuple<double, double, double>> &b, std::size_t n_rounds, std::uint64_t seed,
           bool extend) { return result_dict(aues_permutation_test(curve_from(a), curve_from(b), n_rounds, seed, extend)); },
        py::arg("a"), py::arg("b"), py::arg("n_rounds") = 10000, py::arg("seed") = 0, py::arg("extend") = true,
        "Curves are lists of (alpha, fs, rs).");
    m.def(
        "mu95_bootstrap_test",
        [](const Points &a, const Points &b, std::size_t n_rounds, std::uint64_t seed, double mu_initial_a,
           double mu_initial_b) {
            return result_dict(mu95_bootstrap_test(a, b, n_rounds, seed, mu_initial_a, mu_initial_b));
        },
        py::arg("a"), py::arg("b"), py::arg("n_rounds"), py::arg("seed"), py::arg("mu_initial_a"),
        py::arg("mu_initial_b"), "Points are lists of (mu, fq).");

    // ---------------------------------------------------------- experiments
    m.def(
        "default_spec_json", [](const std::string &kind) {
            return spec_to_json(default_spec(experiment_kind_from_string(kind)), true).dump();
        },
        py::arg("kind"));
    m.def(
        "config_hash", [](const std::string &spec_json) {
            return config_hash(parse_spec(spec_json));
        },
        py::arg("spec_json"));
    m.def(
        "run_experiment_json",
        [](const std::string &spec_json, std::size_t jobs, const std::string &out_dir) {
            const auto spec = parse_spec(spec_json);
            py::gil_scoped_release release;
            RunOptions opts;
            opts.jobs = jobs;
            const auto report = run_experiment(spec, opts);
            if (!out_dir.empty()) emit_report(report, out_dir);
            return report.json.dump();
        },
        py::arg("spec_json"), py::arg("jobs") = 1, py::arg("out_dir") = "",
        "Runs an experiment and returns report.json as text; writes every output file when out_dir is set.");
}
