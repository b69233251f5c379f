#pragma once

#include "rdarts/operators.hpp"

#include <span>

namespace rdarts {

/// Where the KL term takes the Gaussian mean from: the pooled channel
/// activations reported by the site, or zero (the injected-noise mean).
enum class MuMode { pooled, zero };
/// How per-site KL values are combined.
enum class KlAggregate { mean, sum };

/// KL(N(mu, diag sigma^2) || N(0, I)) = sum_j (sigma_j^2 + mu_j^2 - 1 - ln sigma_j^2) / 2.
/// Throws std::domain_error for a nonpositive sigma.
double kl_diag_gaussian(std::span<const double> mu, std::span<const double> sigma);

/// Differentiable per-sample KL: mu, sigma are [B x J]; result is [B].
Var kl_diag_gaussian_rows(Var mu, Var sigma);

struct LossOptions {
    double beta = 1.0;
    MuMode mu_mode = MuMode::pooled;
    KlAggregate aggregate = KlAggregate::mean;
};

struct LossReport {
    double total = 0.0;
    double nll = 0.0;
    double kl = 0.0;
    double beta = 0.0;
    std::size_t site_count = 0;
};

struct NasLoss {
    Var total;           ///< scalar: mean over batch of per_sample
    Var per_sample;      ///< [B]: nll_i + beta * kl_i
    LossReport report;
};

/// Negative log-likelihood of the labels plus beta times the KL of every
/// injection site against a standard normal, one noise draw per pass.
/// Throws std::invalid_argument for beta < 0.
NasLoss nas_loss(Var logits, const Tensor& onehot, std::span<const SiteStats> sites, const LossOptions& opt);

} // namespace rdarts
