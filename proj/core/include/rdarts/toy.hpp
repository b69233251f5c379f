#pragma once

#include "rdarts/analysis.hpp"
#include "rdarts/bilevel.hpp"

#include <optional>
#include <vector>

namespace rdarts {

enum class Injection { none, learned, constant };

struct ToyMlpConfig {
    /// Input width followed by the hidden widths; one tanh layer each.
    std::vector<std::size_t> widths{12, 10, 7, 5, 4, 3};
    std::size_t classes = 2;
    Injection injection = Injection::none;
    double const_mu = 0.0;
    double const_sigma = 0.0;
    /// Hidden layers (0-based) that receive an injector; empty means all.
    std::vector<std::size_t> inject_layers;
    BlockOptions block{};
};

/// Fully connected tanh network. With injection, the selected hidden layers'
/// pre-activations pass through a noise injector.
class ToyMlp {
public:
    explicit ToyMlp(const ToyMlpConfig& cfg);
    ToyMlp(const ToyMlp&) = delete;
    ToyMlp& operator=(const ToyMlp&) = delete;

    struct Output {
        Var logits;
        std::vector<Var> hidden; ///< post-activation outputs
        std::vector<SiteStats> sites;
    };
    Output forward(ForwardContext& ctx, const Tensor& x);

    ParamStore& params() { return params_; }
    const ToyMlpConfig& config() const { return cfg_; }
    std::size_t depth() const { return layers_.size(); }
    /// Eval-mode hidden activations.
    TapFn taps();

private:
    ToyMlpConfig cfg_;
    ParamStore params_;
    std::vector<std::unique_ptr<Linear>> layers_;
    std::vector<std::unique_ptr<Module>> injectors_;
};

struct ToyTrainConfig {
    std::size_t epochs = 600;
    std::size_t batch_size = 64;
    double lr = 0.05;
    double lr_min = 0.001;
    bool cosine = true;
    double momentum = 0.9;
    double weight_decay = 0.0;
    LossOptions loss{};
    std::uint64_t seed = 0;
    /// MI records every `mi_every` epochs (0 disables).
    std::size_t mi_every = 1;
    /// Only epochs after this one are analysed.
    std::size_t mi_from = 0;
    MIOptions mi{};
    /// Gradient-norm split every `gradnorm_every` epochs (0 disables).
    std::size_t gradnorm_every = 0;
};

struct ToyRunResult {
    std::vector<EpochMetrics> metrics;
    std::vector<MIRecord> mi;
    std::vector<GradNormRecord> gradnorm;
    double final_val_acc = 0.0;
};

/// Minibatch SGD on nas_loss with the noisy labels of `trn`. Validation
/// accuracy is measured in eval mode against the clean labels of `val`.
ToyRunResult train_toy(ToyMlp& net, const NoisyDataset& trn, const NoisyDataset& val, const ToyTrainConfig& cfg,
                       const EpochCallback& on_epoch = {});

double toy_accuracy(ToyMlp& net, const NoisyDataset& ds, std::span<const int> labels);

} // namespace rdarts
