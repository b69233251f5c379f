#include "rdarts/operators.hpp"

#include "rdarts/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace rdarts {

namespace {

constexpr std::array<std::string_view, 7> kNames{
    "sep_conv_3x3", "dil_conv_3x3", "sep_nconv_3x3", "dil_nconv_3x3", "max_pool_3x3", "avg_pool_3x3", "identity",
};

} // namespace

std::string_view to_string(OperatorKind kind) { return kNames[operator_index(kind)]; }

OperatorKind operator_from_string(std::string_view name)
{
    for (std::size_t i = 0; i < kNames.size(); ++i)
        if (kNames[i] == name) return kAllOperators[i];
    throw std::invalid_argument("unknown operator kind: " + std::string(name));
}

std::size_t operator_index(OperatorKind kind) { return static_cast<std::size_t>(kind); }

bool is_parameterless(OperatorKind kind)
{
    return kind == OperatorKind::max_pool_3x3 || kind == OperatorKind::avg_pool_3x3 ||
           kind == OperatorKind::identity;
}

bool is_noisy(OperatorKind kind)
{
    return kind == OperatorKind::sep_nconv_3x3 || kind == OperatorKind::dil_nconv_3x3;
}

void ForwardContext::fill_noise(std::span<double> out, std::string_view site) const
{
    if (noise_sampler) {
        noise_sampler(out);
        return;
    }
    Rng rng(derive_seed(noise_key, site));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : out) v = normal(rng);
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, const std::string& name)
{
    Rng rng(derive_seed(seed, name));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = u(rng);
    return t;
}

// --- basic layers ----------------------------------------------------------

Conv2d::Conv2d(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               ops::ConvGeometry geo, std::uint64_t seed)
    : geo_(geo)
{
    const std::size_t cin_g = cin / geo.groups;
    w_ = &store.add(name, Partition::theta, init_uniform(Shape{cout, cin_g, k, k}, cin_g * k * k, seed, name));
}

Var Conv2d::forward(ForwardContext& ctx, Var x) { return ops::conv2d(x, ctx.tape.param(*w_), geo_); }

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, std::size_t channels, bool affine)
    : state_(channels)
{
    if (affine) {
        gamma_ = &store.add(name + ".gamma", Partition::theta, Tensor(Shape{channels}, 1.0));
        beta_ = &store.add(name + ".beta", Partition::theta, Tensor(Shape{channels}, 0.0));
    }
}

Var BatchNorm::forward(ForwardContext& ctx, Var x)
{
    Var g = gamma_ ? ctx.tape.param(*gamma_) : Var();
    Var b = beta_ ? ctx.tape.param(*beta_) : Var();
    return ops::batch_norm(x, g, b, state_, ctx.train, ctx.update_bn_stats);
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Partition part,
               std::uint64_t seed)
{
    w_ = &store.add(name + ".weight", part, init_uniform(Shape{in, out}, in, seed, name + ".weight"));
    b_ = &store.add(name + ".bias", part, init_uniform(Shape{out}, in, seed, name + ".bias"));
}

Var Linear::forward(ForwardContext& ctx, Var x)
{
    return ops::add_bias(ops::matmul(x, ctx.tape.param(*w_)), ctx.tape.param(*b_));
}

// --- noise injection -------------------------------------------------------

NoiseInjector::NoiseInjector(ParamStore& store, const std::string& name, std::size_t channels,
                             const BlockOptions& opt)
    : name_(name),
      channels_(channels),
      hidden_(std::max(channels / std::max<std::size_t>(opt.injector_reduction, 1), opt.injector_min_hidden)),
      fc1_(store, name + ".fc1", channels, hidden_, Partition::phi, opt.init_seed),
      fc2_(store, name + ".fc2", hidden_, channels, Partition::phi, opt.init_seed)
{
    fc2_.bias().value.fill(opt.injector_sigma_bias);
}

std::pair<Var, SiteStats> NoiseInjector::inject(ForwardContext& ctx, Var x)
{
    const Shape& s = x.shape();
    if ((s.size() != 4 && s.size() != 2) || s[1] != channels_)
        throw ShapeError("noise injector " + name_ + " expects " + std::to_string(channels_) + " channels, got " +
                         shape_str(s));
    const std::size_t B = s[0];
    Var pooled = s.size() == 4 ? ops::spatial_mean(x) : x;
    Var sigma = ops::sigmoid(fc2_.forward(ctx, ops::relu(fc1_.forward(ctx, pooled))));
    SiteStats stats{name_, pooled, sigma};
    if (!ctx.train) return {x, stats};

    Tensor eps(s);
    ctx.fill_noise(eps.data(), name_);
    Var sig = s.size() == 4 ? ops::reshape(sigma, Shape{B, channels_, 1, 1}) : sigma;
    Var out = ops::add(x, ops::mul(ctx.tape.constant(std::move(eps)), sig));
    return {out, stats};
}

Var NoiseInjector::forward(ForwardContext& ctx, Var x)
{
    auto [out, stats] = inject(ctx, x);
    if (ctx.sites) ctx.sites->push_back(std::move(stats));
    return out;
}

ConstantNoiseInjector::ConstantNoiseInjector(std::string name, double mu, double sigma)
    : name_(std::move(name)), mu_(mu), sigma_(sigma)
{
    if (sigma < 0.0) throw std::invalid_argument("noise standard deviation must be nonnegative");
}

Var ConstantNoiseInjector::forward(ForwardContext& ctx, Var x)
{
    const Shape s = x.shape();
    const std::size_t B = s[0], C = s[1];
    if (ctx.sites && sigma_ > 0.0)
        ctx.sites->push_back(SiteStats{name_, ctx.tape.constant(Tensor(Shape{B, C}, mu_)),
                                       ctx.tape.constant(Tensor(Shape{B, C}, sigma_))});
    if (!ctx.train) return mu_ == 0.0 ? x : ops::add_scalar(x, mu_);
    Tensor noise(s);
    ctx.fill_noise(noise.data(), name_);
    for (auto& v : noise.data()) v = mu_ + sigma_ * v;
    return ops::add(x, ctx.tape.constant(std::move(noise)));
}

// --- composite blocks ------------------------------------------------------

ReluConvBn::ReluConvBn(ParamStore& store, const std::string& name, std::size_t cin, std::size_t cout,
                       std::size_t k, std::size_t stride, std::size_t padding, const BlockOptions& opt)
    : conv_(store, name + ".conv", cin, cout, k, {stride, 1, padding, 1}, opt.init_seed)
{
    if (opt.batch_norm) bn_.emplace(store, name + ".bn", cout, opt.affine);
}

Var ReluConvBn::forward(ForwardContext& ctx, Var x)
{
    Var y = conv_.forward(ctx, ops::relu(x));
    return bn_ ? bn_->forward(ctx, y) : y;
}

FactorizedReduce::FactorizedReduce(ParamStore& store, const std::string& name, std::size_t cin,
                                   std::size_t cout, const BlockOptions& opt)
    : conv_a_(store, name + ".conv_a", cin, cout / 2, 1, {2, 1, 0, 1}, opt.init_seed),
      conv_b_(store, name + ".conv_b", cin, cout - cout / 2, 1, {2, 1, 0, 1}, opt.init_seed)
{
    if (cout < 2) throw ops::GeometryError("factorized reduce needs at least 2 output channels");
    if (opt.batch_norm) bn_.emplace(store, name + ".bn", cout, opt.affine);
}

Var FactorizedReduce::forward(ForwardContext& ctx, Var x)
{
    const Shape& s = x.shape();
    if (s.size() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 || s[2] < 2 || s[3] < 2)
        throw ops::GeometryError("factorized reduce needs even spatial extents, got " + shape_str(s));
    Var r = ops::relu(x);
    Var a = conv_a_.forward(ctx, r);
    Var b = conv_b_.forward(ctx, ops::crop(r, 1, 1, s[2] - 1, s[3] - 1));
    std::array<Var, 2> parts{a, b};
    Var y = ops::concat_channels(parts);
    return bn_ ? bn_->forward(ctx, y) : y;
}

DepthwiseSeparableUnit::DepthwiseSeparableUnit(ParamStore& store, const std::string& name, std::size_t channels,
                                               std::size_t stride, std::size_t dilation, bool noisy,
                                               const BlockOptions& opt)
    : dw_(store, name + ".dw", channels, channels, 3, {stride, dilation, dilation, channels}, opt.init_seed),
      pw_(store, name + ".pw", channels, channels, 1, {1, 1, 0, 1}, opt.init_seed)
{
    if (noisy) inj_.emplace(store, name + ".noise", channels, opt);
    if (opt.batch_norm) bn_.emplace(store, name + ".bn", channels, opt.affine);
}

Var DepthwiseSeparableUnit::forward(ForwardContext& ctx, Var x)
{
    if (inj_) x = inj_->forward(ctx, x);
    Var y = pw_.forward(ctx, dw_.forward(ctx, ops::relu(x)));
    return bn_ ? bn_->forward(ctx, y) : y;
}

SepConv::SepConv(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride, bool noisy,
                 const BlockOptions& opt)
    : Operator(noisy ? OperatorKind::sep_nconv_3x3 : OperatorKind::sep_conv_3x3),
      first_(store, name + ".u0", channels, stride, 1, noisy, opt),
      second_(store, name + ".u1", channels, 1, 1, noisy, opt)
{
}

Var SepConv::forward(ForwardContext& ctx, Var x) { return second_.forward(ctx, first_.forward(ctx, x)); }

DilConv::DilConv(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride, bool noisy,
                 const BlockOptions& opt)
    : Operator(noisy ? OperatorKind::dil_nconv_3x3 : OperatorKind::dil_conv_3x3),
      unit_(store, name + ".u0", channels, stride, 2, noisy, opt)
{
}

Var DilConv::forward(ForwardContext& ctx, Var x) { return unit_.forward(ctx, x); }

PoolOp::PoolOp(ParamStore& store, const std::string& name, OperatorKind kind, std::size_t channels,
               std::size_t stride, const BlockOptions& opt)
    : Operator(kind), pool_(kind == OperatorKind::max_pool_3x3 ? ops::PoolKind::max : ops::PoolKind::avg),
      stride_(stride)
{
    if (opt.batch_norm) bn_.emplace(store, name + ".bn", channels, opt.affine);
}

Var PoolOp::forward(ForwardContext& ctx, Var x)
{
    Var y = ops::pool2d(pool_, x, 3, stride_, 1);
    return bn_ ? bn_->forward(ctx, y) : y;
}

IdentityOp::IdentityOp(ParamStore& store, const std::string& name, std::size_t channels, std::size_t stride,
                       const BlockOptions& opt)
    : Operator(OperatorKind::identity)
{
    if (stride == 2) reduce_.emplace(store, name + ".reduce", channels, channels, opt);
    else if (stride != 1) throw ops::GeometryError("identity supports stride 1 or 2");
}

Var IdentityOp::forward(ForwardContext& ctx, Var x) { return reduce_ ? reduce_->forward(ctx, x) : x; }

std::unique_ptr<Operator> make_operator(OperatorKind kind, ParamStore& store, const std::string& name,
                                        std::size_t channels, std::size_t stride, const BlockOptions& opt)
{
    switch (kind) {
    case OperatorKind::sep_conv_3x3: return std::make_unique<SepConv>(store, name, channels, stride, false, opt);
    case OperatorKind::sep_nconv_3x3: return std::make_unique<SepConv>(store, name, channels, stride, true, opt);
    case OperatorKind::dil_conv_3x3: return std::make_unique<DilConv>(store, name, channels, stride, false, opt);
    case OperatorKind::dil_nconv_3x3: return std::make_unique<DilConv>(store, name, channels, stride, true, opt);
    case OperatorKind::max_pool_3x3:
    case OperatorKind::avg_pool_3x3: return std::make_unique<PoolOp>(store, name, kind, channels, stride, opt);
    case OperatorKind::identity: return std::make_unique<IdentityOp>(store, name, channels, stride, opt);
    }
    throw std::invalid_argument("unknown operator kind");
}

OperatorOutput apply_operator(Operator& op, ForwardContext& ctx, Var x)
{
    std::vector<SiteStats> local;
    auto* saved = ctx.sites;
    ctx.sites = &local;
    OperatorOutput result;
    try {
        result.out = op.forward(ctx, x);
    } catch (...) {
        ctx.sites = saved;
        throw;
    }
    ctx.sites = saved;
    result.sites = std::move(local);
    return result;
}

} // namespace rdarts
