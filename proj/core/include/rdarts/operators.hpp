#pragma once

#include "rdarts/autodiff.hpp"
#include "rdarts/ops.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rdarts {

/// The candidate operator set. Order fixes the column order of alpha and
/// the tie-break order of genotype derivation.
enum class OperatorKind {
    sep_conv_3x3,
    dil_conv_3x3,
    sep_nconv_3x3,
    dil_nconv_3x3,
    max_pool_3x3,
    avg_pool_3x3,
    identity,
};

inline constexpr std::array<OperatorKind, 7> kAllOperators{
    OperatorKind::sep_conv_3x3,  OperatorKind::dil_conv_3x3, OperatorKind::sep_nconv_3x3,
    OperatorKind::dil_nconv_3x3, OperatorKind::max_pool_3x3, OperatorKind::avg_pool_3x3,
    OperatorKind::identity,
};

/// The operator set with the noise-injecting kinds removed.
inline constexpr std::array<OperatorKind, 5> kVanillaOperators{
    OperatorKind::sep_conv_3x3, OperatorKind::dil_conv_3x3, OperatorKind::max_pool_3x3,
    OperatorKind::avg_pool_3x3, OperatorKind::identity,
};

std::string_view to_string(OperatorKind kind);
/// Throws std::invalid_argument for unknown names.
OperatorKind operator_from_string(std::string_view name);
bool is_parameterless(OperatorKind kind);
bool is_noisy(OperatorKind kind);
std::size_t operator_index(OperatorKind kind);

/// Mean and standard deviation reported by one injection site during the
/// last forward pass. Both are [B x C] values on the forward tape.
struct SiteStats {
    std::string site;
    Var mu;
    Var sigma;
};

/// Per-pass state shared by every layer.
struct ForwardContext {
    explicit ForwardContext(Tape& t) : tape(t) {}

    Tape& tape;
    bool train = true;
    bool update_bn_stats = true;
    /// Every injection site draws its noise from (noise_key, site name);
    /// replaying a key replays the noise exactly.
    std::uint64_t noise_key = 0;
    /// Optional override of the standard-normal sampler (tests).
    std::function<void(std::span<double>)> noise_sampler;
    std::vector<SiteStats>* sites = nullptr;

    void fill_noise(std::span<double> out, std::string_view site) const;
};

/// Shared construction knobs for layers.
struct BlockOptions {
    bool affine = false;
    bool batch_norm = true;
    std::size_t injector_reduction = 4;
    std::size_t injector_min_hidden = 4;
    /// Initial bias of the injector's output layer; sigma starts near
    /// sigmoid(bias).
    double injector_sigma_bias = 0.0;
    std::uint64_t init_seed = 0;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) seeded by (seed, name).
Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name);

class Module {
public:
    virtual ~Module() = default;
    virtual Var forward(ForwardContext& ctx, Var x) = 0;
};

class Conv2d final : public Module {
public:
    Conv2d(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
           ops::ConvGeometry geo, std::uint64_t seed);
    Var forward(ForwardContext& ctx, Var x) override;
    Parameter& weight() { return *w_; }

private:
    Parameter* w_;
    ops::ConvGeometry geo_;
};

class BatchNorm final : public Module {
public:
    BatchNorm(ParamStore& store, const std::string& name, std::size_t channels, bool affine);
    Var forward(ForwardContext& ctx, Var x) override;
    ops::BatchNormState& state() { return state_; }

private:
    Parameter* gamma_ = nullptr;
    Parameter* beta_ = nullptr;
    ops::BatchNormState state_;
};

class Linear final : public Module {
public:
    Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Partition part,
           std::uint64_t seed);
    Var forward(ForwardContext& ctx, Var x) override;
    Parameter& weight() { return *w_; }
    Parameter& bias() { return *b_; }

private:
    Parameter* w_;
    Parameter* b_;
};

/// Additive Gaussian noise with a learned per-channel standard deviation:
/// sigma = sigmoid(fc2(relu(fc1(spatial mean of x)))), out = x + sigma * eps.
/// In eval mode sigma is still computed but the layer is the identity.
class NoiseInjector final : public Module {
public:
    NoiseInjector(ParamStore& store, const std::string& name, std::size_t channels, const BlockOptions& opt);

    /// Accepts [B x C x H x W] or [B x C].
    Var forward(ForwardContext& ctx, Var x) override;
    std::pair<Var, SiteStats> inject(ForwardContext& ctx, Var x);

    std::size_t channels() const { return channels_; }
    std::size_t hidden() const { return hidden_; }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::size_t channels_;
    std::size_t hidden_;
    Linear fc1_;
    Linear fc2_;
};

/// Fixed (mu, sigma) injector: out = x + mu + sigma * eps. No parameters.
/// Eval mode adds only the mean.
class ConstantNoiseInjector final : public Module {
public:
    ConstantNoiseInjector(std::string name, double mu, double sigma);
    Var forward(ForwardContext& ctx, Var x) override;

    double mu() const { return mu_; }
    double sigma() const { return sigma_; }

private:
    std::string name_;
    double mu_;
    double sigma_;
};

/// ReLU -> conv -> BN, used for cell preprocessing.
class ReluConvBn final : public Module {
public:
    ReluConvBn(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               std::size_t stride, std::size_t padding, const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x) override;

private:
    Conv2d conv_;
    std::optional<BatchNorm> bn_;
};

/// ReLU, then two stride-2 1x1 convs on interleaved pixel grids, concatenated.
class FactorizedReduce final : public Module {
public:
    FactorizedReduce(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                     const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x) override;

private:
    Conv2d conv_a_;
    Conv2d conv_b_;
    std::optional<BatchNorm> bn_;
};

/// One candidate operation on a cell edge.
class Operator : public Module {
public:
    explicit Operator(OperatorKind kind) : kind_(kind) {}
    OperatorKind kind() const { return kind_; }

private:
    OperatorKind kind_;
};

/// Depthwise 3x3 -> pointwise 1x1 -> BN, preceded by ReLU and, for the noisy
/// variant, a noise injector on the ReLU input.
class DepthwiseSeparableUnit {
public:
    DepthwiseSeparableUnit(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride,
                           std::size_t dilation, bool noisy, const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x);
    Conv2d& depthwise() { return dw_; }
    Conv2d& pointwise() { return pw_; }
    NoiseInjector* injector() { return inj_ ? &*inj_ : nullptr; }

private:
    std::optional<NoiseInjector> inj_;
    Conv2d dw_;
    Conv2d pw_;
    std::optional<BatchNorm> bn_;
};

class SepConv final : public Operator {
public:
    SepConv(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride, bool noisy,
            const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x) override;
    DepthwiseSeparableUnit& unit(std::size_t i) { return i == 0 ? first_ : second_; }

private:
    DepthwiseSeparableUnit first_;
    DepthwiseSeparableUnit second_;
};

class DilConv final : public Operator {
public:
    DilConv(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride, bool noisy,
            const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x) override;
    DepthwiseSeparableUnit& unit() { return unit_; }

private:
    DepthwiseSeparableUnit unit_;
};

class PoolOp final : public Operator {
public:
    PoolOp(ParamStore& store, const std::string& name, OperatorKind kind, std::size_t channels, std::size_t stride,
           const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x) override;

private:
    ops::PoolKind pool_;
    std::size_t stride_;
    std::optional<BatchNorm> bn_;
};

class IdentityOp final : public Operator {
public:
    IdentityOp(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride,
               const BlockOptions& opt);
    Var forward(ForwardContext& ctx, Var x) override;

private:
    std::optional<FactorizedReduce> reduce_;
};

std::unique_ptr<Operator> make_operator(OperatorKind kind, ParamStore& store, const std::string& name,
                                        std::size_t channels, std::size_t stride, const BlockOptions& opt);

struct OperatorOutput {
    Var out;
    std::vector<SiteStats> sites;
};

/// Runs one operator and returns the injection-site statistics it produced.
OperatorOutput apply_operator(Operator& op, ForwardContext& ctx, Var x);

} // namespace rdarts
