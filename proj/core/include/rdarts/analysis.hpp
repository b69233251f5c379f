#pragma once

#include "rdarts/data.hpp"
#include "rdarts/search_space.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace rdarts {

// --- mutual information -----------------------------------------------------

/// Equal-width binning of every column over [lo, hi] (values clamped). Each
/// row's tuple of bin indices maps to a dense symbol; distinct tuples always
/// get distinct symbols, numbered in order of first appearance.
std::vector<int> bin_activations(const Tensor& z, std::size_t n_bins, double lo, double hi);

/// Plug-in estimate in bits from the empirical joint distribution.
double mutual_information(std::span<const int> codes, std::span<const int> labels);

/// How a tap's binning range is chosen.
struct TapRange {
    enum class Mode { fixed, relu, robust };
    Mode mode = Mode::fixed;
    double lo = -1.0;
    double hi = 1.0;

    static TapRange fixed_range(double lo, double hi) { return {Mode::fixed, lo, hi}; }
    /// (0, 99th percentile) over the tapped values.
    static TapRange relu_range() { return {Mode::relu, 0.0, 0.0}; }
    /// (1st, 99th percentile) over the tapped values.
    static TapRange robust_range() { return {Mode::robust, 0.0, 0.0}; }

    /// Concrete (lo, hi) for `values`; never returns an empty interval.
    std::pair<double, double> resolve(const Tensor& values) const;
};

struct MIRecord {
    std::size_t epoch = 0;
    std::size_t layer = 0;
    double i_all = 0.0;
    double i_clean = 0.0;
    double i_noisy = 0.0;
    double i_zx = 0.0;
    bool clean_empty = false;
    bool noisy_empty = false;
};

/// Deterministic per-layer activations [M x d] for a batch of inputs.
using TapFn = std::function<std::vector<Tensor>(const Tensor& inputs)>;

struct MIOptions {
    std::size_t n_bins = 30;
    /// One entry per tap, or a single entry applied to every tap.
    std::vector<TapRange> ranges{TapRange{}};
    bool with_zx = false;
    /// Bins used to code the inputs for I(Z;X).
    std::size_t input_bins = 2;
    TapRange input_range = TapRange::fixed_range(-1.0, 1.0);
};

/// I_all against noisy labels over every sample, I_clean over uncorrupted
/// samples against clean labels, I_noisy over corrupted samples against the
/// noisy labels. Empty subsets report 0 with a flag.
std::vector<MIRecord> mi_trajectory(const TapFn& taps, const NoisyDataset& ds, std::size_t epoch,
                                    const MIOptions& opt = {});

/// Eval-mode cell outputs of `net` as [M x (C*H*W)] taps.
TapFn network_taps(Network& net);

// --- gradient norms ----------------------------------------------------------

struct GradNormSide {
    bool present = false;
    std::size_t count = 0;
    double mean = 0.0;       ///< mean per-sample gradient L2 norm
    double std = 0.0;
    double total_norm = 0.0; ///< norm of the subset's share of the batch-mean gradient
};

struct GradNormRecord {
    std::size_t epoch = 0;
    GradNormSide clean;
    GradNormSide noisy;
    double batch_norm = 0.0; ///< norm of the full batch-mean gradient
};

/// Records a per-sample loss vector [B] on `tape`.
using PerSampleLossFn = std::function<Var(Tape&)>;

/// Per-sample gradients of `loss` with respect to `params`, split by the
/// corruption flags of the batch. Parameter values are not modified.
GradNormRecord grad_norm_split(std::span<Parameter* const> params, const PerSampleLossFn& loss,
                               const std::vector<bool>& corrupted, std::size_t epoch = 0);

// --- operator histograms -----------------------------------------------------

struct OpHistogram {
    std::array<std::array<std::size_t, 7>, 2> counts{}; ///< [cell type][operator index]
    std::size_t runs = 0;

    std::size_t total(CellType t) const;
    std::size_t count(CellType t, OperatorKind k) const { return counts[t == CellType::normal ? 0 : 1][operator_index(k)]; }
    /// (identity + pools) / total for cell type `t`.
    double parameterless_fraction(CellType t) const;
};

/// Throws std::invalid_argument for an empty list.
OpHistogram op_histogram(std::span<const Genotype> genotypes);

} // namespace rdarts
