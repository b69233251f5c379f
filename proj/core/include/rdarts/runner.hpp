#pragma once

#include "rdarts/config.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rdarts {

std::string_view version();

struct RunManifest {
    std::string subcommand;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string tool_version;
    std::string started;  ///< UTC, ISO 8601
    std::string finished;
    std::vector<std::string> files; ///< relative to the run directory
    std::map<std::string, double> summary;
};

std::string manifest_to_json(const RunManifest& m);

/// Run directory that records every file written into it.
class RunDir {
public:
    explicit RunDir(std::filesystem::path root);

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path path(const std::string& name) const { return root_ / name; }
    void csv(const std::string& name, const CsvTable& table);
    void text(const std::string& name, const std::string& content);
    void genotype(const std::string& name, const Genotype& g);
    /// Records a file written by someone else (a nested run).
    void adopt(const std::string& name);
    const std::vector<std::string>& files() const { return files_; }

private:
    std::filesystem::path root_;
    std::vector<std::string> files_;
};

/// Dataset parts named by the split section; `val` and `test` may be empty.
struct DataParts {
    NoisyDataset train;
    NoisyDataset val;
    NoisyDataset test;
};
DataParts prepare_data(const ExperimentConfig& cfg);

struct SearchRun {
    SearchResult result;
    std::vector<MIRecord> mi;
};
SearchRun run_search(const ExperimentConfig& cfg, RunDir& dir);

struct EvaluateRun {
    std::vector<EpochMetrics> metrics;
    double test_acc = 0.0;
    std::size_t weight_count = 0;
};
EvaluateRun run_evaluate(const ExperimentConfig& cfg, RunDir& dir);

ToyRunResult run_toy_mi(const ExperimentConfig& cfg, RunDir& dir);

struct AblationCell {
    double sigma = 0.0;
    double mu = 0.0;
    std::vector<double> accuracy; ///< final clean validation accuracy per seed
    double mean() const;
};
struct AblationRun {
    std::vector<AblationCell> cells;
    const AblationCell& at(double sigma, double mu) const;
};
AblationRun run_ablate_sigma(const ExperimentConfig& cfg, RunDir& dir);

struct HistogramRun {
    std::vector<Genotype> genotypes;
    OpHistogram histogram;
};
HistogramRun run_histogram(const ExperimentConfig& cfg, RunDir& dir);

enum class Subcommand { search, evaluate, toy_mi, ablate_sigma, histogram };
std::string_view to_string(Subcommand s);
/// Throws std::invalid_argument for unknown names.
Subcommand subcommand_from_string(std::string_view name);

/// Runs `sub` into `out` (created if needed) and writes the config copy and
/// the manifest. Returns the manifest.
RunManifest run(Subcommand sub, const ExperimentConfig& cfg, const std::filesystem::path& out);

} // namespace rdarts
