#include "rdarts/log.hpp"
#include "rdarts/runner.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <optional>
#include <thread>
#include <vector>

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::size_t seeds = 1;
    std::string out;
    std::optional<bool> inject;
    std::optional<std::string> order;
    std::optional<double> beta;
    std::string log_level = "warn";
};

rdarts::LogLevel parse_level(const std::string& s)
{
    if (s == "debug") return rdarts::LogLevel::debug;
    if (s == "info") return rdarts::LogLevel::info;
    if (s == "warn") return rdarts::LogLevel::warn;
    if (s == "error") return rdarts::LogLevel::error;
    return rdarts::LogLevel::off;
}

rdarts::ExperimentConfig resolve(const Options& o)
{
    rdarts::ExperimentConfig cfg = o.config.empty() ? rdarts::ExperimentConfig{} : rdarts::load_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.output = o.out;
    if (o.inject) {
        if (!*o.inject)
            cfg.model.toy.injection = rdarts::Injection::none;
        else if (cfg.model.toy.injection == rdarts::Injection::none)
            cfg.model.toy.injection = rdarts::Injection::learned;
    }
    if (o.order) cfg.optimizer.search.order = *o.order == "first" ? rdarts::ArchOrder::first : rdarts::ArchOrder::second;
    if (o.beta) {
        if (*o.beta < 0.0) throw rdarts::ConfigError("--beta: must be non-negative");
        cfg.objective.beta = *o.beta;
    }
    return cfg;
}

int execute(rdarts::Subcommand sub, const Options& o)
{
    const auto base = resolve(o);
    if (o.seeds <= 1) {
        auto m = rdarts::run(sub, base, base.output);
        std::printf("%s: wrote %zu files to %s\n", m.subcommand.c_str(), m.files.size(), base.output.c_str());
        return 0;
    }
    std::vector<std::thread> workers;
    std::vector<std::string> errors(o.seeds);
    for (std::size_t k = 0; k < o.seeds; ++k) {
        workers.emplace_back([&, k] {
            auto cfg = base;
            cfg.seed = base.seed + k;
            const auto dir = std::filesystem::path(base.output) / ("seed_" + std::to_string(cfg.seed));
            try {
                rdarts::run(sub, cfg, dir);
            } catch (const std::exception& e) {
                errors[k] = "seed " + std::to_string(cfg.seed) + ": " + e.what();
            }
        });
    }
    for (auto& w : workers) w.join();
    int status = 0;
    for (const auto& e : errors)
        if (!e.empty()) {
            std::fprintf(stderr, "error: %s\n", e.c_str());
            status = 1;
        }
    if (!status) std::printf("%zu runs written under %s\n", o.seeds, base.output.c_str());
    return status;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Noise-robust differentiable architecture search"};
    app.set_version_flag("--version", std::string(rdarts::version()));
    app.require_subcommand(1);
    Options o;

    auto add_common = [&](CLI::App* sc) {
        sc->add_option("--config", o.config, "JSON experiment configuration")->check(CLI::ExistingFile);
        sc->add_option("--seed", o.seed, "Base seed");
        sc->add_option("--seeds", o.seeds, "Number of concurrent runs with consecutive seeds")->check(CLI::PositiveNumber);
        sc->add_option("--out", o.out, "Output directory");
        sc->add_flag("--inject,!--no-inject", o.inject, "Enable or disable noise injection in the toy network");
        sc->add_option("--order", o.order, "Architecture gradient order")->check(CLI::IsMember({"first", "second"}));
        sc->add_option("--beta", o.beta, "Weight of the KL term");
        sc->add_option("--log-level", o.log_level, "debug, info, warn, error or off")
            ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));
    };

    std::vector<std::pair<CLI::App*, rdarts::Subcommand>> subs;
    auto add = [&](const char* name, const char* help, rdarts::Subcommand s) {
        auto* sc = app.add_subcommand(name, help);
        add_common(sc);
        subs.emplace_back(sc, s);
    };
    add("search", "Search a cell architecture; writes the genotype, metrics and alpha trajectory",
        rdarts::Subcommand::search);
    add("evaluate", "Train a network built from model.genotype", rdarts::Subcommand::evaluate);
    add("toy-mi", "Train the toy MLP and record mutual-information trajectories", rdarts::Subcommand::toy_mi);
    add("ablate-sigma", "Grid over constant injected noise mean and deviation", rdarts::Subcommand::ablate_sigma);
    add("histogram", "Operator histogram over searched or given genotypes", rdarts::Subcommand::histogram);

    CLI11_PARSE(app, argc, argv);
    rdarts::set_log_level(parse_level(o.log_level));
    try {
        for (auto& [sc, s] : subs)
            if (sc->parsed()) return execute(s, o);
    } catch (const rdarts::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const rdarts::NonFiniteLoss& e) {
        std::fprintf(stderr, "training diverged: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
