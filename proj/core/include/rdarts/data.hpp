#pragma once

#include "rdarts/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rdarts {

/// Samples carrying both their clean and (possibly) corrupted label.
/// Training code must only read `noisy_labels`; the clean labels and flags
/// exist for analysis.
struct NoisyDataset {
    Tensor inputs; ///< [M x ...]
    std::vector<int> clean_labels;
    std::vector<int> noisy_labels;
    std::vector<bool> corrupted;
    std::size_t classes = 0;
    std::string tag;

    std::size_t size() const { return clean_labels.size(); }
    /// Shape of one sample (inputs without the leading axis).
    Shape sample_shape() const;
    /// Samples at `idx`, in that order.
    NoisyDataset subset(std::span<const std::size_t> idx) const;
    /// Inputs at `idx` as one batch tensor.
    Tensor batch_inputs(std::span<const std::size_t> idx) const;
    /// Throws std::logic_error if labels and flags disagree.
    void check() const;
};

enum class NoiseKind { none, symmetric, asymmetric };

struct NoiseSpec {
    NoiseKind kind = NoiseKind::none;
    double rate = 0.0;
    std::vector<std::pair<int, int>> mapping; ///< src -> dst, asymmetric only
    std::uint64_t seed = 0;

    std::string describe() const;
};

struct Corruption {
    std::vector<int> noisy_labels;
    std::vector<bool> corrupted;
};

/// Within every class, exactly round(rate * n_c) seeded-chosen samples are moved
/// to a uniformly drawn different class.
Corruption corrupt_symmetric(std::span<const int> labels, std::size_t classes, double rate, std::uint64_t seed);

/// For every (src -> dst) pair, exactly round(rate * n_src) seeded-chosen
/// samples of src are relabeled dst. Other classes are untouched.
Corruption corrupt_asymmetric(std::span<const int> labels, std::size_t classes, double rate,
                              std::span<const std::pair<int, int>> mapping, std::uint64_t seed);

/// Applies `spec` to the clean labels of `ds`, replacing its noisy labels.
void apply_noise(NoisyDataset& ds, const NoiseSpec& spec);

enum class ToySampling { exhaustive, sampled };

/// Binary-input, binary-output toy task over {-1,+1}^n_bits. The label is 1
/// iff a seeded smooth score (tanh of a linear plus pairwise form) is above the
/// median, so classes are balanced. Exhaustive sampling draws distinct
/// patterns (n_samples == 0 means all 2^n_bits); sampled draws with
/// replacement.
NoisyDataset generate_toy_dataset(std::size_t n_bits, std::size_t n_samples, std::uint64_t seed,
                                  ToySampling sampling = ToySampling::exhaustive);

/// Class-conditional images [M x 3 x hw x hw]: a fixed per-class sum of
/// random spatial frequencies plus Gaussian pixel noise.
NoisyDataset generate_image_dataset(std::size_t classes, std::size_t per_class, std::size_t hw, std::uint64_t seed,
                                    double pixel_noise = 0.6);

/// Seeded stratified partition; per-class counts are split by cumulative
/// rounding so every class's parts differ from the nominal share by < 1.
std::vector<std::vector<std::size_t>> split_indices(std::span<const int> labels, std::size_t classes,
                                                    std::span<const double> fractions, std::uint64_t seed);
std::vector<NoisyDataset> split(const NoisyDataset& ds, std::span<const double> fractions, std::uint64_t seed);

/// Whitespace text format: header `n_samples n_features n_classes`, then one
/// line per sample with the features followed by the 0-based clean label.
NoisyDataset load_dataset(const std::filesystem::path& path);
void save_dataset(const NoisyDataset& ds, const std::filesystem::path& path);

} // namespace rdarts
