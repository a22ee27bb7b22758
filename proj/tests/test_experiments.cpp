#include "loclab/error.hpp"
#include "loclab/experiments.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace loclab;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path &p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string &name) {
    const auto dir = fs::temp_directory_path() / ("loclab_test_" + name);
    fs::remove_all(dir);
    return dir;
}

// A spec small enough to run end to end in seconds.
ExperimentSpec tiny_spec(ExperimentKind kind) {
    auto s = default_spec(kind);
    s.model.n_layers = 2;
    s.model.d_model = 16;
    s.model.d_ff = 32;
    s.model.n_heads = 2;
    s.model.rmu_layer = 1;
    s.data.n_entities = 10;
    s.data.attrs_per_entity = 2;
    s.data.forget_ratio = 0.3;
    s.data.pretrain_examples = 60;
    s.training.pretrain.epochs = 1;
    s.training.full.epochs = 4;
    s.training.full.lr = 1e-2;
    s.training.inject.epochs = 20;
    s.training.unlearn.epochs = 2;
    s.training.distill.epochs = 3;
    s.mix_step = 0.25;
    s.permutation_rounds = 100;
    s.bootstrap_rounds = 100;
    s.lr_search = false;
    s.cache = false;
    s.random_seeds = {7};
    return s;
}

std::size_t csv_rows(const fs::path &p) {
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    return n == 0 ? 0 : n - 1;
}

} // namespace

TEST(SpecTest, RejectsUnknownKeysAtEveryLevel) {
    auto j = nlohmann::json::parse(R"({"kind": "controlled", "seedz": [1]})");
    EXPECT_THROW(spec_from_json(j), ParseError);
    j = nlohmann::json::parse(R"({"kind": "controlled", "model": {"d_modl": 8}})");
    try {
        spec_from_json(j);
        FAIL() << "expected ParseError";
    } catch (const ParseError &e) {
        EXPECT_NE(std::string(e.what()).find("unknown key 'd_modl'"), std::string::npos);
    }
    EXPECT_THROW(spec_from_json(nlohmann::json::parse(R"({"seeds": [1]})")), ParseError);
}

TEST(SpecTest, RoundTripsThroughJson) {
    for (auto kind : {ExperimentKind::revisit, ExperimentKind::controlled, ExperimentKind::l2_distill,
                      ExperimentKind::pii_controlled}) {
        auto s = tiny_spec(kind);
        s.lr_overrides[Objective::npo] = 4e-3;
        s.output = "elsewhere";
        const auto j = spec_to_json(s, true);
        const auto back = spec_from_json(nlohmann::json::parse(j.dump()));
        EXPECT_EQ(spec_to_json(back, true).dump(), j.dump()) << to_string(kind);
        EXPECT_EQ(config_hash(back), config_hash(s));
    }
}

TEST(SpecTest, HashIgnoresOutputButTracksSettings) {
    auto a = tiny_spec(ExperimentKind::controlled);
    auto b = a;
    b.output = "other";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seeds.push_back(99);
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(SpecTest, LoadsFileAndValidates) {
    const auto dir = scratch("spec");
    fs::create_directories(dir);
    {
        std::ofstream(dir / "s.json") << R"({"kind": "l2_distill", "seeds": [3], "mix_step": 0.1})";
    }
    const auto s = load_spec(dir / "s.json");
    EXPECT_EQ(s.kind, ExperimentKind::l2_distill);
    EXPECT_EQ(s.seeds, (std::vector<std::uint64_t>{3}));
    EXPECT_THROW(load_spec(dir / "missing.json"), IoError);
    auto bad = default_spec(ExperimentKind::controlled);
    bad.seeds = {1, 2};
    EXPECT_THROW(bad.validate(), ContractError);
    bad = default_spec(ExperimentKind::controlled);
    bad.localization.mode = MaskMode::individual_weight;
    EXPECT_THROW(bad.validate(), ContractError);
    fs::remove_all(dir);
}

TEST(AggregateTest, SampleStandardDeviation) {
    const auto a = aggregate({1.0, 2.0, 3.0, 6.0});
    EXPECT_DOUBLE_EQ(a.mean, 3.0);
    ASSERT_TRUE(a.sd.has_value());
    EXPECT_DOUBLE_EQ(*a.sd, std::sqrt(14.0 / 3.0));
    EXPECT_FALSE(aggregate({2.0}).sd.has_value());
}

TEST(AggregateTest, AverageCurves) {
    MixCurve a, b;
    a.points = {{0.0, 0.2, 1.0, 0, 0, 0, 0}, {1.0, 0.8, 0.5, 0, 0, 0, 0}};
    b.points = {{0.0, 0.4, 0.8, 0, 0, 0, 0}, {1.0, 1.0, 0.1, 0, 0, 0, 0}};
    const auto m = average_curves({a, b}, "mean");
    EXPECT_DOUBLE_EQ(m.points[0].fs, 0.3);
    EXPECT_DOUBLE_EQ(m.points[1].rs, 0.3);
    b.points.pop_back();
    EXPECT_THROW(average_curves({a, b}, "x"), ContractError);
}

TEST(ParallelTest, RunsEveryTaskAndRethrows) {
    std::vector<std::atomic<int>> hits(50);
    parallel_for(50, 4, [&](std::size_t i) { hits[i]++; });
    for (auto &h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_THROW(parallel_for(10, 3,
                              [](std::size_t i) {
                                  if (i == 7) throw ContractError("boom");
                              }),
                 ContractError);
}

TEST(EndToEndTest, ControlledRunSchemaAndDeterminism) {
    auto spec = tiny_spec(ExperimentKind::controlled);
    spec.objectives = {Objective::wga, Objective::npo};
    spec.seeds = {1, 2, 3};
    const auto dir_a = scratch("ctl_a"), dir_b = scratch("ctl_b");
    const auto paths = emit_report(run_experiment(spec, {2, nullptr}), dir_a);
    emit_report(run_experiment(spec, {1, nullptr}), dir_b);

    ASSERT_GE(paths.size(), 3u);
    EXPECT_EQ(read_file(dir_a / "report.json"), read_file(dir_b / "report.json"));
    EXPECT_EQ(read_file(dir_a / "summary.csv"), read_file(dir_b / "summary.csv"));

    const auto j = load_report(dir_a / "report.json");
    EXPECT_EQ(j.at("experiment"), "controlled");
    EXPECT_EQ(j.at("fingerprint").at("config_hash"), config_hash(spec));
    EXPECT_EQ(j.at("fingerprint").at("version"), kVersion);
    EXPECT_EQ(j.at("cells").size(), 12u);
    EXPECT_EQ(j.at("summary").size(), 4u);
    EXPECT_FALSE(j.contains("timings"));
    for (const auto &inj : j.at("setup").at("injection")) EXPECT_TRUE(inj.at("disjoint").get<bool>());
    for (const auto &c : j.at("cells")) {
        if (c.at("status") != "ok") continue;
        const auto curve = dir_a / c.at("curve").get<std::string>();
        ASSERT_TRUE(fs::exists(curve));
        EXPECT_EQ(csv_rows(curve), 5u);
    }
    EXPECT_EQ(csv_rows(dir_a / "summary.csv"), 12u);
    std::ifstream in(dir_a / "summary.csv");
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "experiment,objective,method,seed,aues,mu95,status");
    EXPECT_TRUE(fs::exists(dir_a / "timings.json"));
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST(EndToEndTest, RevisitRowsCoverEveryRegion) {
    auto spec = tiny_spec(ExperimentKind::revisit);
    spec.objectives = {Objective::wga};
    spec.methods = {LocalizationMethod::activations, LocalizationMethod::random};
    spec.seeds = {1};
    const auto report = run_experiment(spec);
    EXPECT_EQ(report.summary_rows.size(), 3u);
    EXPECT_EQ(report.summary_rows[0][2], "original");
}

TEST(EndToEndTest, L2DistillReportsResiduals) {
    auto spec = tiny_spec(ExperimentKind::l2_distill);
    spec.seeds = {1};
    spec.random_seeds = {7, 11, 49};
    const auto report = run_experiment(spec);
    EXPECT_EQ(report.summary_rows.size(), 4u);
    EXPECT_EQ(report.curves.size(), 4u);
    ASSERT_TRUE(report.json.contains("cells"));
    for (const auto &c : report.json.at("cells")) EXPECT_TRUE(c.contains("residual_ratio"));
}

TEST(CacheTest, SecondRunReusesTrainedModels) {
    auto spec = tiny_spec(ExperimentKind::l2_distill);
    spec.seeds = {1};
    spec.cache = true;
    const auto dir = scratch("cache");
    spec.output = dir.string();
    const auto first = run_experiment(spec);
    std::size_t cached = 0;
    for (const auto &e : fs::directory_iterator(dir / "cache")) cached += e.path().extension() == ".bin";
    EXPECT_GE(cached, 1u);
    const auto second = run_experiment(spec);
    EXPECT_EQ(first.json.dump(), second.json.dump());
    fs::remove_all(dir);
}
