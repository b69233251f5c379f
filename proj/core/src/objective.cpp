#include "rdarts/objective.hpp"

#include <cmath>
#include <stdexcept>

namespace rdarts {

double kl_diag_gaussian(std::span<const double> mu, std::span<const double> sigma)
{
    if (mu.size() != sigma.size()) throw std::invalid_argument("mu and sigma lengths differ");
    double kl = 0.0;
    for (std::size_t j = 0; j < sigma.size(); ++j) {
        const double s = sigma[j];
        if (!(s > 0.0)) throw std::domain_error("standard deviation must be positive");
        const double s2 = s * s;
        kl += 0.5 * (s2 + mu[j] * mu[j] - 1.0 - std::log(s2));
    }
    return kl;
}

Var kl_diag_gaussian_rows(Var mu, Var sigma)
{
    if (mu.shape() != sigma.shape()) throw ShapeError("mu and sigma shapes differ");
    for (double s : sigma.value().data())
        if (!(s > 0.0)) throw std::domain_error("standard deviation must be positive");
    Var s2 = ops::square(sigma);
    Var inner = ops::sub(ops::add(s2, ops::square(mu)), ops::log(s2));
    return ops::scale(ops::add_scalar(ops::row_sum(inner), -static_cast<double>(sigma.shape()[1])), 0.5);
}

NasLoss nas_loss(Var logits, const Tensor& onehot, std::span<const SiteStats> sites, const LossOptions& opt)
{
    if (!(opt.beta >= 0.0)) throw std::invalid_argument("beta must be nonnegative");
    Tape& tape = logits.tape();
    const std::size_t B = logits.shape()[0];

    Var nll = ops::cross_entropy_rows(logits, onehot);
    Var kl;
    for (const auto& site : sites) {
        if (site.sigma.shape().size() != 2 || site.sigma.shape()[0] != B)
            throw ShapeError("site " + site.site + " statistics do not match the batch");
        Var mu = opt.mu_mode == MuMode::pooled ? site.mu : tape.constant(Tensor(site.sigma.shape(), 0.0));
        Var k = kl_diag_gaussian_rows(mu, site.sigma);
        kl = kl.valid() ? ops::add(kl, k) : k;
    }
    if (kl.valid() && opt.aggregate == KlAggregate::mean && sites.size() > 1)
        kl = ops::scale(kl, 1.0 / static_cast<double>(sites.size()));

    Var per_sample = kl.valid() && opt.beta != 0.0 ? ops::add(nll, ops::scale(kl, opt.beta)) : nll;
    NasLoss out;
    out.per_sample = per_sample;
    out.total = ops::mean(per_sample);
    out.report.beta = opt.beta;
    out.report.site_count = sites.size();
    double nll_mean = 0.0;
    for (double v : nll.value().data()) nll_mean += v;
    out.report.nll = nll_mean / static_cast<double>(B);
    if (kl.valid()) {
        double s = 0.0;
        for (double v : kl.value().data()) s += v;
        out.report.kl = s / static_cast<double>(B);
    }
    out.report.total = out.total.value().item();
    return out;
}

} // namespace rdarts
