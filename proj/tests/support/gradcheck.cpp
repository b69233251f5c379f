#include "gradcheck.hpp"

#include "rdarts/objective.hpp"
#include "rdarts/rng.hpp"
#include "rdarts/search_space.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace rdarts::testing {

namespace {

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi)
{
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double rel_error(std::span<const double> a, std::span<const double> n)
{
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - n[i]) * (a[i] - n[i]);
    const double scale = std::max({l2_norm(a), l2_norm(n), 1e-7});
    return std::sqrt(diff) / scale;
}

std::vector<Parameter*> all_params(ParamStore& store)
{
    std::vector<Parameter*> out;
    for (auto& p : store) out.push_back(&p);
    return out;
}

// A module case: fresh store per instance, input gradient plus every parameter.
template <class Build>
double module_case(std::uint64_t seed, Shape in_shape, Build build)
{
    ParamStore store;
    auto forward = build(store);
    const auto params = all_params(store);
    const std::uint64_t key = derive_seed(seed, "noise");
    return gradient_error({random_tensor(in_shape, seed)}, params, [&](Tape& t, std::span<const Var> v) {
        ForwardContext ctx(t);
        ctx.noise_key = key;
        ctx.update_bn_stats = false;
        return project(forward(ctx, v[0]), seed);
    });
}

BlockOptions opts(std::uint64_t seed, bool affine)
{
    BlockOptions o;
    o.affine = affine;
    o.init_seed = seed;
    o.injector_min_hidden = 2;
    return o;
}

Shape image_shape(Rng& rng, std::size_t c)
{
    return {pick(rng, 2, 3), c, pick(rng, 4, 5), pick(rng, 4, 5)};
}

} // namespace

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi)
{
    Tensor t(std::move(shape));
    Rng rng(derive_seed(seed, "tensor", t.size()));
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& x : t.data()) x = u(rng);
    return t;
}

Var project(Var out, std::uint64_t seed)
{
    Tensor r = random_tensor(out.shape(), derive_seed(seed, "project"));
    return ops::sum(ops::mul(out, out.tape().constant(std::move(r))));
}

double gradient_error(std::vector<Tensor> inputs, std::span<Parameter* const> params, const GradFn& f, double h)
{
    auto eval = [&] {
        Tape t;
        std::vector<Var> leaves;
        for (const auto& x : inputs) leaves.push_back(t.leaf(x));
        return f(t, leaves).value().item();
    };

    Tape tape;
    std::vector<Var> leaves;
    for (const auto& x : inputs) leaves.push_back(tape.leaf(x));
    Var loss = f(tape, leaves);
    tape.backward(loss);

    double worst = 0.0;
    auto numeric = [&](Tensor& target) {
        std::vector<double> g(target.size());
        for (std::size_t k = 0; k < target.size(); ++k) {
            const double saved = target[k];
            target[k] = saved + h;
            const double fp = eval();
            target[k] = saved - h;
            const double fm = eval();
            target[k] = saved;
            g[k] = (fp - fm) / (2.0 * h);
        }
        return g;
    };
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor analytic = tape.grad(leaves[i]);
        worst = std::max(worst, rel_error(analytic.data(), numeric(inputs[i])));
    }
    for (auto* p : params) {
        const Tensor analytic = tape.grad_or_zero(*p);
        worst = std::max(worst, rel_error(analytic.data(), numeric(p->value)));
    }
    return worst;
}

std::vector<GradCase> gradient_cases()
{
    std::vector<GradCase> cases;
    auto add = [&](std::string group, std::string name, std::function<double(std::uint64_t)> run) {
        cases.push_back({std::move(name), std::move(group), std::move(run)});
    };
    auto unary = [&](std::string name, std::function<Var(Var)> op, double lo = -1.0, double hi = 1.0) {
        add("tensor-core", name, [op, lo, hi](std::uint64_t seed) {
            Rng rng(seed);
            Shape s{pick(rng, 1, 3), pick(rng, 2, 4), pick(rng, 2, 3)};
            return gradient_error({random_tensor(s, seed, lo, hi)}, {},
                                  [&](Tape&, std::span<const Var> v) { return project(op(v[0]), seed); });
        });
    };
    auto binary = [&](std::string name, ops::ElementwiseKind kind) {
        add("tensor-core", name, [kind](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t c = pick(rng, 1, 3);
            Shape a{pick(rng, 1, 2), c, pick(rng, 2, 3), pick(rng, 2, 3)};
            Shape b = pick(rng, 0, 1) ? Shape{c, 1, 1} : a;
            return gradient_error({random_tensor(a, seed), random_tensor(b, seed + 1)}, {},
                                  [&](Tape&, std::span<const Var> v) {
                                      return project(ops::elementwise(kind, v[0], v[1]), seed);
                                  });
        });
    };

    // --- tensor-core ---------------------------------------------------------
    binary("add", ops::ElementwiseKind::add);
    binary("sub", ops::ElementwiseKind::sub);
    binary("mul", ops::ElementwiseKind::mul);
    unary("neg", [](Var x) { return ops::neg(x); });
    unary("scale", [](Var x) { return ops::scale(x, -1.7); });
    unary("add_scalar", [](Var x) { return ops::add_scalar(ops::square(x), 0.3); });
    unary("square", [](Var x) { return ops::square(x); });
    unary("log", [](Var x) { return ops::log(x); }, 0.3, 2.0);
    unary("exp", [](Var x) { return ops::exp(x); });
    unary("relu", [](Var x) { return ops::relu(x); });
    unary("tanh", [](Var x) { return ops::tanh(x); }, -2.0, 2.0);
    unary("sigmoid", [](Var x) { return ops::sigmoid(x); }, -3.0, 3.0);
    unary("row_sum", [](Var x) { return ops::row_sum(x); });
    unary("reshape", [](Var x) { return ops::reshape(x, Shape{x.size()}); });
    unary("softmax", [](Var x) { return ops::softmax(x); }, -2.0, 2.0);
    add("tensor-core", "sum_mean", [](std::uint64_t seed) {
        Rng rng(seed);
        Shape s{pick(rng, 1, 3), pick(rng, 1, 4)};
        return gradient_error({random_tensor(s, seed)}, {}, [&](Tape& t, std::span<const Var> v) {
            Var a = ops::sum(ops::mul(v[0], t.constant(random_tensor(s, seed + 7))));
            Var b = ops::mean(ops::square(v[0]));
            return ops::add(a, b);
        });
    });
    add("tensor-core", "matmul", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
        return gradient_error({random_tensor({m, k}, seed), random_tensor({k, n}, seed + 1)}, {},
                              [&](Tape&, std::span<const Var> v) { return project(ops::matmul(v[0], v[1]), seed); });
    });
    add("tensor-core", "add_bias", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t m = pick(rng, 1, 4), n = pick(rng, 1, 4);
        return gradient_error({random_tensor({m, n}, seed), random_tensor({n}, seed + 1)}, {},
                              [&](Tape&, std::span<const Var> v) { return project(ops::add_bias(v[0], v[1]), seed); });
    });
    add("tensor-core", "row", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t m = pick(rng, 1, 4), n = pick(rng, 1, 4), i = pick(rng, 0, m - 1);
        return gradient_error({random_tensor({m, n}, seed)}, {},
                              [&](Tape&, std::span<const Var> v) { return project(ops::row(v[0], i), seed); });
    });
    add("tensor-core", "weighted_sum", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t r = pick(rng, 1, 4);
        Shape s{pick(rng, 1, 2), pick(rng, 1, 3)};
        std::vector<Tensor> in{random_tensor({r}, seed)};
        for (std::size_t i = 0; i < r; ++i) in.push_back(random_tensor(s, seed + 10 + i));
        return gradient_error(in, {}, [&](Tape&, std::span<const Var> v) {
            return project(ops::weighted_sum(v[0], v.subspan(1)), seed);
        });
    });
    add("tensor-core", "weighted_sum_subset", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t r = pick(rng, 2, 5);
        Shape s{pick(rng, 1, 2), pick(rng, 1, 3)};
        std::vector<std::size_t> which;
        for (std::size_t i = 0; i < r; ++i)
            if (i == 0 || pick(rng, 0, 1)) which.push_back(i);
        std::vector<Tensor> in{random_tensor({r}, seed)};
        for (std::size_t i = 0; i < which.size(); ++i) in.push_back(random_tensor(s, seed + 10 + i));
        return gradient_error(in, {}, [&](Tape&, std::span<const Var> v) {
            return project(ops::weighted_sum(v[0], v.subspan(1), which), seed);
        });
    });
    add("tensor-core", "conv2d", [](std::uint64_t seed) {
        Rng rng(seed);
        ops::ConvGeometry g{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 0, 2), 1};
        const std::size_t cin = pick(rng, 1, 3);
        std::size_t cout = pick(rng, 1, 3);
        if (pick(rng, 0, 1)) {
            g.groups = cin;
            cout = cin * pick(rng, 1, 2);
        }
        const std::size_t k = pick(rng, 0, 1) ? 3 : 1;
        Shape x{pick(rng, 1, 2), cin, pick(rng, 5, 6), pick(rng, 5, 6)};
        Shape w{cout, cin / g.groups, k, k};
        return gradient_error({random_tensor(x, seed), random_tensor(w, seed + 1)}, {},
                              [&](Tape&, std::span<const Var> v) { return project(ops::conv2d(v[0], v[1], g), seed); });
    });
    for (auto kind : {ops::PoolKind::max, ops::PoolKind::avg})
        add("tensor-core", kind == ops::PoolKind::max ? "max_pool" : "avg_pool", [kind](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
            Shape x = image_shape(rng, pick(rng, 1, 2));
            return gradient_error({random_tensor(x, seed)}, {}, [&](Tape&, std::span<const Var> v) {
                return project(ops::pool2d(kind, v[0], 3, stride, pad), seed);
            });
        });
    add("tensor-core", "spatial_mean", [](std::uint64_t seed) {
        Rng rng(seed);
        return gradient_error({random_tensor(image_shape(rng, pick(rng, 1, 3)), seed)}, {},
                              [&](Tape&, std::span<const Var> v) { return project(ops::spatial_mean(v[0]), seed); });
    });
    add("tensor-core", "concat_channels", [](std::uint64_t seed) {
        Rng rng(seed);
        Shape a = image_shape(rng, pick(rng, 1, 2));
        Shape b = a;
        b[1] = pick(rng, 1, 3);
        return gradient_error({random_tensor(a, seed), random_tensor(b, seed + 1)}, {},
                              [&](Tape&, std::span<const Var> v) {
                                  std::vector<Var> xs{v[0], v[1]};
                                  return project(ops::concat_channels(xs), seed);
                              });
    });
    add("tensor-core", "crop", [](std::uint64_t seed) {
        Rng rng(seed);
        Shape a = image_shape(rng, pick(rng, 1, 2));
        const std::size_t top = pick(rng, 0, 1), left = pick(rng, 0, 1);
        return gradient_error({random_tensor(a, seed)}, {}, [&](Tape&, std::span<const Var> v) {
            return project(ops::crop(v[0], top, left, a[2] - top - 1, a[3] - left - 1), seed);
        });
    });
    for (bool rows : {true, false})
        add("tensor-core", rows ? "cross_entropy_rows" : "softmax_cross_entropy", [rows](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t b = pick(rng, 1, 4), c = pick(rng, 2, 5);
            std::vector<int> labels(b);
            for (auto& y : labels) y = static_cast<int>(pick(rng, 0, c - 1));
            const Tensor onehot = ops::one_hot(labels, c);
            return gradient_error({random_tensor({b, c}, seed, -2.0, 2.0)}, {}, [&](Tape&, std::span<const Var> v) {
                return rows ? project(ops::cross_entropy_rows(v[0], onehot), seed)
                            : ops::softmax_cross_entropy(v[0], onehot);
            });
        });
    for (int mode : {0, 1, 2})
        add("tensor-core", mode == 0 ? "batch_norm_affine" : mode == 1 ? "batch_norm_plain" : "batch_norm_eval",
            [mode](std::uint64_t seed) {
                Rng rng(seed);
                const std::size_t c = pick(rng, 1, 3);
                Shape x = pick(rng, 0, 1) ? image_shape(rng, c) : Shape{pick(rng, 3, 5), c};
                ops::BatchNormState state(c);
                state.running_mean = random_tensor({c}, seed + 3);
                state.running_var = random_tensor({c}, seed + 4, 0.5, 2.0);
                std::vector<Tensor> in{random_tensor(x, seed)};
                if (mode != 1) {
                    in.push_back(random_tensor({c}, seed + 1, 0.5, 1.5));
                    in.push_back(random_tensor({c}, seed + 2));
                }
                return gradient_error(in, {}, [&](Tape&, std::span<const Var> v) {
                    Var gamma = mode == 1 ? Var{} : v[1];
                    Var beta = mode == 1 ? Var{} : v[2];
                    return project(ops::batch_norm(v[0], gamma, beta, state, mode != 2, false), seed);
                });
            });

    // --- operators -----------------------------------------------------------
    add("operators", "conv2d_module", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t c = pick(rng, 1, 3);
        return module_case(seed, image_shape(rng, c), [&](ParamStore& s) {
            auto m = std::make_shared<Conv2d>(s, "conv", c, pick(rng, 1, 3), 3, ops::ConvGeometry{1, 1, 1, 1}, seed);
            return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
        });
    });
    add("operators", "linear", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t in = pick(rng, 1, 4);
        return module_case(seed, {pick(rng, 1, 3), in}, [&](ParamStore& s) {
            auto m = std::make_shared<Linear>(s, "fc", in, pick(rng, 1, 4), Partition::theta, seed);
            return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
        });
    });
    add("operators", "batch_norm_module", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t c = pick(rng, 1, 3);
        return module_case(seed, image_shape(rng, c), [&](ParamStore& s) {
            auto m = std::make_shared<BatchNorm>(s, "bn", c, true);
            for (auto& p : s) p.value = random_tensor(p.value.shape(), seed + p.name.size(), 0.5, 1.5);
            return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
        });
    });
    for (bool spatial : {true, false})
        add("operators", spatial ? "noise_injector_4d" : "noise_injector_2d", [spatial](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t c = pick(rng, 1, 4);
            Shape x = spatial ? image_shape(rng, c) : Shape{pick(rng, 1, 4), c};
            return module_case(seed, x, [&](ParamStore& s) {
                auto m = std::make_shared<NoiseInjector>(s, "inj", c, opts(seed, false));
                return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
            });
        });
    add("operators", "constant_injector", [](std::uint64_t seed) {
        Rng rng(seed);
        return module_case(seed, image_shape(rng, pick(rng, 1, 3)), [&](ParamStore&) {
            auto m = std::make_shared<ConstantNoiseInjector>("inj", 0.1, 0.3);
            return [m](ForwardContext& ctx, Var x) { return ops::tanh(m->forward(ctx, x)); };
        });
    });
    add("operators", "relu_conv_bn", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t c = pick(rng, 1, 3);
        return module_case(seed, image_shape(rng, c), [&](ParamStore& s) {
            auto m = std::make_shared<ReluConvBn>(s, "pre", c, pick(rng, 1, 3), 1, 1, 0, opts(seed, true));
            return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
        });
    });
    add("operators", "factorized_reduce", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t c = pick(rng, 1, 3);
        Shape x{pick(rng, 2, 3), c, 4, 4};
        return module_case(seed, x, [&](ParamStore& s) {
            auto m = std::make_shared<FactorizedReduce>(s, "fr", c, 2 * pick(rng, 1, 2), opts(seed, false));
            return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
        });
    });
    for (auto kind : kAllOperators)
        add("operators", std::string(to_string(kind)), [kind](std::uint64_t seed) {
            Rng rng(seed);
            const std::size_t stride = pick(rng, 1, 2);
            const std::size_t c = stride == 2 ? 2 : pick(rng, 1, 2);
            Shape x{2, c, 4, 4};
            return module_case(seed, x, [&](ParamStore& s) {
                std::shared_ptr<Operator> m = make_operator(kind, s, "op", c, stride, opts(seed, pick(rng, 0, 1)));
                return [m](ForwardContext& ctx, Var x) { return m->forward(ctx, x); };
            });
        });

    // --- objective -----------------------------------------------------------
    add("objective", "kl_rows", [](std::uint64_t seed) {
        Rng rng(seed);
        Shape s{pick(rng, 1, 4), pick(rng, 1, 4)};
        return gradient_error({random_tensor(s, seed), random_tensor(s, seed + 1, 0.3, 2.0)}, {},
                              [&](Tape&, std::span<const Var> v) {
                                  return project(kl_diag_gaussian_rows(v[0], v[1]), seed);
                              });
    });
    for (int variant : {0, 1, 2})
        add("objective", variant == 0 ? "nas_loss_pooled" : variant == 1 ? "nas_loss_zero_sum" : "nas_loss_per_sample",
            [variant](std::uint64_t seed) {
                Rng rng(seed);
                const std::size_t b = pick(rng, 1, 4), k = pick(rng, 2, 4), sites = pick(rng, 1, 3);
                std::vector<int> labels(b);
                for (auto& y : labels) y = static_cast<int>(pick(rng, 0, k - 1));
                const Tensor onehot = ops::one_hot(labels, k);
                std::vector<Tensor> in{random_tensor({b, k}, seed, -2.0, 2.0)};
                std::vector<std::size_t> widths;
                for (std::size_t s = 0; s < sites; ++s) {
                    widths.push_back(pick(rng, 1, 3));
                    in.push_back(random_tensor({b, widths.back()}, seed + 10 + s));
                    in.push_back(random_tensor({b, widths.back()}, seed + 20 + s, 0.3, 1.5));
                }
                LossOptions opt;
                opt.beta = 0.7;
                if (variant == 1) {
                    opt.mu_mode = MuMode::zero;
                    opt.aggregate = KlAggregate::sum;
                }
                return gradient_error(in, {}, [&](Tape&, std::span<const Var> v) {
                    std::vector<SiteStats> st;
                    for (std::size_t s = 0; s < sites; ++s)
                        st.push_back({"s" + std::to_string(s), v[1 + 2 * s], v[2 + 2 * s]});
                    auto l = nas_loss(v[0], onehot, st, opt);
                    return variant == 2 ? project(l.per_sample, seed) : l.total;
                });
            });
    add("objective", "nas_loss_through_injector", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t b = pick(rng, 2, 3), c = pick(rng, 2, 3), k = 3;
        std::vector<int> labels(b);
        for (auto& y : labels) y = static_cast<int>(pick(rng, 0, k - 1));
        const Tensor onehot = ops::one_hot(labels, k);
        ParamStore store;
        NoiseInjector inj(store, "inj", c, opts(seed, false));
        Linear head(store, "head", c, k, Partition::theta, seed);
        const auto params = all_params(store);
        return gradient_error({random_tensor({b, c}, seed)}, params, [&](Tape& t, std::span<const Var> v) {
            ForwardContext ctx(t);
            ctx.noise_key = seed;
            std::vector<SiteStats> sites;
            ctx.sites = &sites;
            Var h = ops::tanh(inj.forward(ctx, v[0]));
            return nas_loss(head.forward(ctx, h), onehot, sites, LossOptions{}).total;
        });
    });

    // --- mixed edges -----------------------------------------------------------
    add("mixed-edge", "mixed_edge", [](std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t stride = pick(rng, 1, 2);
        const std::size_t c = stride == 2 ? 2 : pick(rng, 1, 2);
        ParamStore store;
        Cell::Edge edge{0, 0, stride, {}};
        for (auto kind : kAllOperators)
            edge.ops.push_back(make_operator(kind, store, std::string("e.") + std::string(to_string(kind)), c, stride,
                                             opts(seed, false)));
        const auto params = all_params(store);
        return gradient_error({random_tensor({7}, seed + 1), random_tensor({2, c, 4, 4}, seed)}, params,
                              [&](Tape& t, std::span<const Var> v) {
                                  ForwardContext ctx(t);
                                  ctx.noise_key = seed;
                                  ctx.update_bn_stats = false;
                                  return project(Cell::mixed_edge(ctx, edge, v[0], v[1]), seed);
                              });
    });
    add("mixed-edge", "supernet_alpha", [](std::uint64_t seed) {
        NetworkConfig cfg;
        cfg.in_channels = 2;
        cfg.classes = 3;
        cfg.init_channels = 2;
        cfg.cells = 2;
        cfg.nodes = 2;
        cfg.block.init_seed = seed;
        auto net = Network::supernet(cfg);
        for (auto* p : net->params().in(Partition::alpha)) p->value = random_tensor(p->value.shape(), seed + p->name.size());
        const auto params = net->params().in(Partition::alpha);
        const Tensor x = random_tensor({2, 2, 4, 4}, seed);
        const Tensor onehot = ops::one_hot(std::vector<int>{0, 2}, 3);
        return gradient_error({}, params, [&](Tape& t, std::span<const Var>) {
            ForwardContext ctx(t);
            ctx.noise_key = seed;
            ctx.update_bn_stats = false;
            auto out = net->forward(ctx, x);
            return nas_loss(out.logits, onehot, out.sites, LossOptions{}).total;
        });
    });
    return cases;
}

} // namespace rdarts::testing
