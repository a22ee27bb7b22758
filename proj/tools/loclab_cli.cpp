#include "loclab/error.hpp"
#include "loclab/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string &text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        const auto v = std::stoull(item, &used);
        if (used != item.size()) throw loclab::ParseError("bad seed '" + item + "'");
        seeds.push_back(v);
    }
    if (seeds.empty()) throw loclab::ParseError("empty seed list");
    return seeds;
}

struct Flags {
    std::string config;
    std::string seeds;
    std::string out;
    std::size_t jobs = 1;
    bool lr_search = true;
    bool lr_search_set = false;
    bool quiet = false;
};

int run(loclab::ExperimentKind kind, const Flags &f) {
    loclab::ExperimentSpec spec = f.config.empty() ? loclab::default_spec(kind) : loclab::load_spec(f.config);
    if (!f.config.empty() && spec.kind != kind)
        throw loclab::ContractError("config describes a '" + loclab::to_string(spec.kind) + "' run, not '" +
                                    loclab::to_string(kind) + "'");
    if (!f.seeds.empty()) spec.seeds = parse_seed_list(f.seeds);
    if (!f.out.empty()) spec.output = f.out;
    if (f.lr_search_set) spec.lr_search = f.lr_search;
    spec.validate();
    loclab::RunOptions options;
    options.jobs = f.jobs;
    options.log = f.quiet ? nullptr : &std::cerr;
    const auto report = loclab::run_experiment(spec, options);
    for (const auto &path : loclab::emit_report(report, spec.output)) std::cout << path.string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Localized unlearning experiments on a toy transformer"};
    app.require_subcommand(1);
    Flags flags;
    const std::vector<std::pair<std::string, loclab::ExperimentKind>> commands = {
        {"revisit", loclab::ExperimentKind::revisit},
        {"controlled", loclab::ExperimentKind::controlled},
        {"l2", loclab::ExperimentKind::l2_distill},
        {"pii", loclab::ExperimentKind::pii_controlled},
    };
    std::vector<CLI::App *> subs;
    for (const auto &[name, kind] : commands) {
        auto *sub = app.add_subcommand(name, "run the " + loclab::to_string(kind) + " experiment");
        sub->add_option("--config", flags.config, "JSON spec file")->check(CLI::ExistingFile);
        sub->add_option("--seed", flags.seeds, "comma-separated seed list");
        sub->add_option("--out", flags.out, "output directory");
        sub->add_option("--jobs", flags.jobs, "worker threads")->check(CLI::PositiveNumber);
        sub->add_flag(
               "--lr-search,!--no-lr-search", [&](std::int64_t n) {
                   flags.lr_search = n > 0;
                   flags.lr_search_set = true;
               },
               "run the per-objective learning-rate search");
        sub->add_flag("--quiet", flags.quiet, "suppress progress lines");
        subs.push_back(sub);
    }
    CLI11_PARSE(app, argc, argv);
    try {
        for (std::size_t i = 0; i < subs.size(); ++i)
            if (subs[i]->parsed()) return run(commands[i].second, flags);
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
