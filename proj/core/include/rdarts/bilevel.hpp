#pragma once

#include "rdarts/data.hpp"
#include "rdarts/objective.hpp"
#include "rdarts/search_space.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

namespace rdarts {

// --- optimizers --------------------------------------------------------------

struct SgdState {
    std::unordered_map<const Parameter*, Tensor> velocity;
    std::size_t steps = 0;

    /// Momentum buffer of `p`, or nullptr before its first update.
    const Tensor* buffer(const Parameter& p) const;
};

/// v <- momentum * v + (g + weight_decay * p); p <- p - lr * v.
/// Throws ShapeError when a gradient does not match its parameter.
void sgd_step(std::span<Parameter* const> params, std::span<const Tensor> grads, SgdState& state, double lr,
              double momentum, double weight_decay);

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
};

struct AdamState {
    std::unordered_map<const Parameter*, Tensor> m;
    std::unordered_map<const Parameter*, Tensor> v;
    std::size_t steps = 0;
};

/// Bias-corrected Adam with L2 weight decay folded into the gradient.
void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg);

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2.
/// Throws std::out_of_range unless 0 <= step <= total.
double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min);

// --- architecture gradients -------------------------------------------------

/// Records a scalar loss on `tape`, reading parameter values from the store.
/// Must be a deterministic function of the current parameter values.
using LossFn = std::function<Var(Tape&)>;

/// Weight partitions: everything the inner problem optimizes.
std::vector<Parameter*> weight_params(ParamStore& store);
std::vector<Parameter*> arch_params(ParamStore& store);

/// Gradient of `val` with respect to every alpha parameter, in store order.
std::vector<Tensor> arch_grad_first_order(ParamStore& store, const LossFn& val);

struct SecondOrderOptions {
    double eta = 0.025;
    /// Virtual step mirrors the real weight update, momentum included.
    double momentum = 0.0;
    double weight_decay = 0.0;
    const SgdState* state = nullptr;
    double fd_scale = 0.01;
};

struct SecondOrderInfo {
    bool hvp_skipped = false;
    double epsilon = 0.0;
    double grad_theta_norm = 0.0;
};

/// grad_alpha L_val(w', alpha) - eta * hvp with w' = w - eta * (virtual step on
/// `trn`) and hvp the central difference of grad_alpha L_trn along
/// grad_w L_val(w', alpha). Weights are restored bit-for-bit afterwards.
std::vector<Tensor> arch_grad_second_order(ParamStore& store, const LossFn& trn, const LossFn& val,
                                           const SecondOrderOptions& opt, SecondOrderInfo* info = nullptr);

// --- network glue ------------------------------------------------------------

struct Batch {
    Tensor inputs;
    Tensor onehot;
    std::uint64_t noise_key = 0;
};

/// Batch of `ds` at `idx`, labelled with the noisy labels.
Batch make_batch(const NoisyDataset& ds, std::span<const std::size_t> idx, std::uint64_t noise_key);

/// Training-mode loss of `net` on `batch` that leaves BN running statistics
/// untouched and replays the batch's noise key.
LossFn network_loss(Network& net, const Batch& batch, const LossOptions& loss);

std::vector<Tensor> arch_grad_first_order(Network& net, const Batch& val, const LossOptions& loss);
std::vector<Tensor> arch_grad_second_order(Network& net, const Batch& trn, const Batch& val, const LossOptions& loss,
                                           const SecondOrderOptions& opt, SecondOrderInfo* info = nullptr);

/// Deterministic eval-mode accuracy of `net` against `labels`.
double evaluate_accuracy(Network& net, const NoisyDataset& ds, std::span<const int> labels, std::size_t batch_size);

// --- phases ------------------------------------------------------------------

enum class ArchOrder { first, second };

struct SearchConfig {
    ArchOrder order = ArchOrder::second;
    double eta = 0.025;
    AdamConfig arch{};
    double w_lr = 0.025;
    double w_lr_min = 0.001;
    double w_momentum = 0.9;
    double w_weight_decay = 3e-4;
    bool cosine = true;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double fd_scale = 0.01;
    LossOptions loss{};
    std::uint64_t seed = 0;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_nll = 0.0;
    double train_kl = 0.0;
    double train_acc = 0.0;    ///< against the labels trained on
    double val_acc = 0.0;      ///< against the (possibly noisy) validation labels
    double val_clean_acc = 0.0;
};

struct AlphaSnapshot {
    std::size_t epoch = 0;
    Tensor normal;
    Tensor reduce;
};

struct SearchResult {
    std::vector<AlphaSnapshot> alphas; ///< initial values, then one per epoch
    std::vector<EpochMetrics> metrics;
    Genotype genotype;
    std::size_t hvp_skipped = 0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Alternates an architecture step on `val` with a weight step on `trn`.
/// Throws NonFiniteLoss when a training loss is not finite.
SearchResult search_phase(Network& net, const NoisyDataset& trn, const NoisyDataset& val, const SearchConfig& cfg,
                          const EpochCallback& on_epoch = {});

struct EvalConfig {
    NetworkConfig network{};
    double w_lr = 0.025;
    double w_lr_min = 0.001;
    double w_momentum = 0.9;
    double w_weight_decay = 3e-4;
    bool cosine = true;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    LossOptions loss{};
    std::uint64_t seed = 0;
};

struct EvalResult {
    std::unique_ptr<Network> network;
    std::vector<EpochMetrics> metrics;
    double final_test_acc = 0.0;
};

/// Fresh discrete network from `genotype`, trained on `trn`; test accuracy
/// is measured against the clean labels of `test` in eval mode.
EvalResult evaluation_phase(const Genotype& genotype, const NoisyDataset& trn, const NoisyDataset& test,
                            const EvalConfig& cfg, const EpochCallback& on_epoch = {});

} // namespace rdarts
