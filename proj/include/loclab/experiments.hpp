#pragma once

// Experiment orchestration: spec files, the revisit / controlled / l2 / pii
// runs, on-disk model caching and report emission.

#include "loclab/data.hpp"
#include "loclab/evaluation.hpp"
#include "loclab/localization.hpp"
#include "loclab/model.hpp"
#include "loclab/objectives.hpp"
#include "loclab/training.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace loclab {

inline constexpr const char *kVersion = "0.1.0";

enum class ExperimentKind { revisit, controlled, l2_distill, pii_controlled };

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string &name);

struct DataSpec {
    // "author" or "pii" generate a corpus; "file" loads `path`.
    std::string source = "author";
    std::string path;
    std::size_t n_entities = 50;
    std::size_t attrs_per_entity = 4;
    std::size_t n_records = 200; // pii only
    std::size_t k_perturbed = 3;
    double forget_ratio = 0.10;
    std::uint64_t seed = 1;
    std::uint64_t split_seed = 2;
    std::size_t pretrain_examples = 2000;
    std::uint64_t pretrain_seed = 3;
};

struct StageConfigs {
    TrainConfig pretrain;
    TrainConfig full;
    TrainConfig inject;
    TrainConfig unlearn;
    TrainConfig distill;
};

StageConfigs default_stages();
double default_learning_rate(Objective objective);

struct ExperimentSpec {
    ExperimentKind kind = ExperimentKind::controlled;
    ModelConfig model; // vocab_size is taken from the corpus
    DataSpec data;
    std::vector<Objective> objectives;
    ObjectiveConfig objective;
    std::vector<LocalizationMethod> methods; // revisit only
    LocalizationConfig localization;
    std::vector<std::uint64_t> seeds;
    // Random-region seeds: the revisit random baseline and the l2 random regions.
    std::vector<std::uint64_t> random_seeds{7, 11, 49};
    StageConfigs training = default_stages();
    // Per-objective learning rates. Missing entries use default_learning_rate.
    std::map<Objective, double> learning_rates;
    // Fixed learning rates that bypass the search.
    std::map<Objective, double> lr_overrides;
    bool lr_search = true;
    double lr_grid_factor = 3.0;
    double mix_step = 0.05;
    std::size_t permutation_rounds = 10000;
    std::size_t bootstrap_rounds = 10000;
    std::uint64_t stats_seed = 0;
    bool cache = true;
    std::string output = "out";

    void validate() const;
};

ExperimentSpec default_spec(ExperimentKind kind);

// Unknown keys are rejected at every level; missing keys take the defaults
// of default_spec(kind).
ExperimentSpec spec_from_json(const nlohmann::json &j);
ExperimentSpec load_spec(const std::filesystem::path &path);
// Canonical form with every field present. `output` is left out unless
// include_output is set.
nlohmann::ordered_json spec_to_json(const ExperimentSpec &spec, bool include_output = false);
// 16 hex digits of FNV-1a over the canonical JSON (without `output`).
std::string config_hash(const ExperimentSpec &spec);

struct ExperimentReport {
    nlohmann::ordered_json json;
    // Paths relative to the output directory.
    std::vector<std::pair<std::string, MixCurve>> curves;
    std::vector<std::string> summary_header;
    std::vector<std::vector<std::string>> summary_rows;
    // Wall-clock seconds per stage; written to timings.json, never to report.json.
    nlohmann::ordered_json timings = nlohmann::ordered_json::object();
};

struct RunOptions {
    std::size_t jobs = 1;
    // Progress lines; null silences them.
    std::ostream *log = nullptr;
};

ExperimentReport run_revisit(const ExperimentSpec &spec, const RunOptions &options = {});
ExperimentReport run_controlled(const ExperimentSpec &spec, const RunOptions &options = {});
ExperimentReport run_l2_distill(const ExperimentSpec &spec, const RunOptions &options = {});
ExperimentReport run_experiment(const ExperimentSpec &spec, const RunOptions &options = {});

// Writes report.json, summary.csv, timings.json and curves/*.csv under dir
// and returns the written paths in order. Throws IoError naming the path.
std::vector<std::filesystem::path> emit_report(const ExperimentReport &report, const std::filesystem::path &dir);
nlohmann::ordered_json load_report(const std::filesystem::path &path);

// Runs task(i) for i in [0, n) on up to `jobs` threads. The first exception
// is rethrown after all workers finish.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)> &task);

// Mean and sample sd (n - 1); sd is absent for fewer than two values.
struct Aggregate {
    std::vector<double> values;
    double mean = 0.0;
    std::optional<double> sd;
};
Aggregate aggregate(std::vector<double> values);

// Pointwise mean of curves sharing one alpha grid.
MixCurve average_curves(const std::vector<MixCurve> &curves, const std::string &label);

} // namespace loclab
