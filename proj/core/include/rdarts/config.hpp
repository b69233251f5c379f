#pragma once

#include "rdarts/io.hpp"
#include "rdarts/toy.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rdarts {

/// Invalid configuration; the message carries line:column or the field path.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DatasetSection {
    std::string kind = "toy"; ///< toy | image | file
    std::string path;         ///< kind == file
    std::size_t toy_bits = 12;
    std::size_t toy_samples = 0; ///< 0 = every pattern
    std::size_t image_classes = 4;
    std::size_t image_per_class = 96;
    std::size_t image_hw = 8;
    double pixel_noise = 0.6;
    /// Stratified split fractions; a zero fraction drops the part.
    double train = 0.2;
    double val = 0.8;
    double test = 0.0;
};

struct NoiseSection {
    NoiseKind kind = NoiseKind::symmetric;
    double rate = 0.2;
    std::vector<std::pair<int, int>> mapping;
    /// Parts whose labels are corrupted: any of train, val, test.
    std::vector<std::string> parts{"train"};
};

struct ModelSection {
    ToyMlpConfig toy{};
    /// Supernet / discrete network shape.
    NetworkConfig network{};
    std::string genotype; ///< evaluate: genotype file
};

struct OptimizerSection {
    SearchConfig search{};
    EvalConfig eval{};
    ToyTrainConfig toy{};
};

struct AnalysisSection {
    std::size_t mi_every = 1;
    std::size_t mi_from = 0;
    MIOptions mi{};
    std::size_t gradnorm_every = 0;
};

struct AblationSection {
    /// Hidden layers given the constant injector; empty means all.
    std::vector<std::size_t> inject_layers;
    std::vector<double> sigmas{0.0, 0.01, 0.05, 0.2, 0.3};
    std::vector<double> mus{0.0, 0.1, 0.2, 0.3};
    std::size_t seeds = 1;
};

struct HistogramSection {
    /// Existing genotype files to tally; when empty, searches are run.
    std::vector<std::string> genotypes;
    std::size_t seeds = 1;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output = "runs";
    DatasetSection dataset{};
    NoiseSection noise{};
    ModelSection model{};
    LossOptions objective{};
    OptimizerSection optimizer{};
    AnalysisSection analysis{};
    AblationSection ablation{};
    HistogramSection histogram{};
};

/// Strict JSON parsing over the defaults: unknown keys, wrong types and
/// out-of-range values raise ConfigError.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<string>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON (keys sorted) of the fully resolved configuration.
std::string canonical_config(const ExperimentConfig& cfg);
/// FNV-1a of the canonical form; independent of key order in the source.
std::string config_hash(const ExperimentConfig& cfg);

std::string_view to_string(NoiseKind k);
std::string_view to_string(Injection k);

} // namespace rdarts
