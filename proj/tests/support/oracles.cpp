#include "oracles.hpp"

#include "gradcheck.hpp"

#include "rdarts/analysis.hpp"
#include "rdarts/objective.hpp"
#include "rdarts/rng.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace rdarts::testing {

namespace {

Var quad_form(Var a_row, const Tensor& m, Var b_row)
{
    return ops::sum(ops::mul(ops::matmul(a_row, a_row.tape().constant(m)), b_row));
}

std::vector<double> matvec_t(const Tensor& m, std::span<const double> x) // m^T x, m is [n x k]
{
    const std::size_t n = m.dim(0), k = m.dim(1);
    std::vector<double> out(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[j] += m[i * k + j] * x[i];
    return out;
}

std::vector<double> matvec(const Tensor& m, std::span<const double> x) // m x, m is [n x k]
{
    const std::size_t n = m.dim(0), k = m.dim(1);
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) out[i] += m[i * k + j] * x[j];
    return out;
}

struct TinyProblem {
    std::unique_ptr<Network> net;
    Batch trn;
    Batch val;
    LossOptions loss;
};

TinyProblem tiny_problem(std::uint64_t seed)
{
    TinyProblem p;
    p.net = Network::supernet(tiny_supernet_config(seed));
    for (auto* a : arch_params(p.net->params())) a->value = random_tensor(a->value.shape(), derive_seed(seed, a->name));
    auto batch = [&](std::uint64_t s) {
        Batch b;
        b.inputs = random_tensor({4, 1, 4, 4}, s);
        b.onehot = ops::one_hot(std::vector<int>{0, 1, 1, 0}, 2);
        b.noise_key = s;
        return b;
    };
    p.trn = batch(derive_seed(seed, "trn"));
    p.val = batch(derive_seed(seed, "val"));
    return p;
}

std::vector<int> uneven_labels(std::size_t classes, std::uint64_t seed, std::size_t base)
{
    Rng rng(seed);
    std::vector<int> labels;
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t n = base + std::uniform_int_distribution<std::size_t>(0, base)(rng);
        labels.insert(labels.end(), n, static_cast<int>(c));
    }
    std::shuffle(labels.begin(), labels.end(), rng);
    return labels;
}

std::vector<std::size_t> class_counts(std::span<const int> labels, std::size_t classes)
{
    std::vector<std::size_t> n(classes, 0);
    for (int y : labels) ++n[static_cast<std::size_t>(y)];
    return n;
}

} // namespace

double bilinear_hypergradient_error(double eta, bool momentum, std::uint64_t seed)
{
    const std::size_t n = 4, k = 3;
    Tensor P({n, n}, 0.0);
    {
        const Tensor a = random_tensor({n, n}, seed + 1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = i == j ? 1.0 : 0.0;
                for (std::size_t r = 0; r < n; ++r) s += a[i * n + r] * a[j * n + r];
                P[i * n + j] = s;
            }
    }
    const Tensor B = random_tensor({n, k}, seed + 2);
    const Tensor G = random_tensor({n, k}, seed + 3);
    const Tensor c = random_tensor({n}, seed + 4);
    const Tensor d = random_tensor({k}, seed + 5);

    ParamStore store;
    Parameter& w = store.add("w", Partition::theta, random_tensor({n}, seed + 6));
    Parameter& alpha = store.add("alpha", Partition::alpha, random_tensor({k}, seed + 7));

    LossFn trn = [&](Tape& t) {
        Var wr = ops::reshape(t.param(w), {1, n});
        Var ar = ops::reshape(t.param(alpha), {1, k});
        return ops::sub(ops::scale(quad_form(wr, P, wr), 0.5), quad_form(wr, B, ar));
    };
    LossFn val = [&](Tape& t) {
        Var wv = t.param(w);
        Var wr = ops::reshape(wv, {1, n});
        Var ar = ops::reshape(t.param(alpha), {1, k});
        Var diff = ops::sub(wv, t.constant(c));
        Var lin = ops::sum(ops::mul(t.param(alpha), t.constant(d)));
        return ops::add(ops::add(ops::scale(ops::sum(ops::square(diff)), 0.5), lin), quad_form(wr, G, ar));
    };

    SgdState state;
    SecondOrderOptions opt;
    opt.eta = eta;
    if (momentum) {
        opt.momentum = 0.9;
        opt.weight_decay = 3e-4;
        state.velocity[&w] = random_tensor({n}, seed + 8);
        opt.state = &state;
    }
    const auto got = arch_grad_second_order(store, trn, val, opt);

    // Closed form: w' = w - eta (m v + P w - B a + wd w); dw'/da = eta B.
    const auto wv = w.value.data();
    const auto av = alpha.value.data();
    const auto Pw = matvec(P, wv);
    const auto Ba = matvec(B, av);
    std::vector<double> w1(n);
    for (std::size_t i = 0; i < n; ++i) {
        double step = Pw[i] - Ba[i] + opt.weight_decay * wv[i];
        if (momentum) step += opt.momentum * state.velocity[&w][i];
        w1[i] = wv[i] - eta * step;
    }
    const auto Ga = matvec(G, av);
    std::vector<double> gw(n);
    for (std::size_t i = 0; i < n; ++i) gw[i] = w1[i] - c[i] + Ga[i];
    const auto Gtw = matvec_t(G, w1);
    const auto Btg = matvec_t(B, gw);
    double worst = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        const double expect = d[j] + Gtw[j] + eta * Btg[j];
        worst = std::max(worst, std::abs(got[0][j] - expect));
    }
    return worst;
}

NetworkConfig tiny_supernet_config(std::uint64_t seed)
{
    NetworkConfig c;
    c.in_channels = 1;
    c.classes = 2;
    c.init_channels = 1;
    c.cells = 1;
    c.nodes = 1;
    c.candidates = {OperatorKind::dil_conv_3x3, OperatorKind::dil_nconv_3x3, OperatorKind::max_pool_3x3,
                    OperatorKind::avg_pool_3x3, OperatorKind::identity};
    c.block.injector_min_hidden = 1;
    c.block.init_seed = seed;
    return c;
}

double unrolled_supernet_error(double eta, std::uint64_t seed, std::size_t* param_count)
{
    auto p = tiny_problem(seed);
    Network& net = *p.net;
    if (param_count) {
        *param_count = 0;
        for (const auto& q : net.params()) *param_count += q.value.size();
    }
    auto weights = weight_params(net.params());
    auto alphas = arch_params(net.params());
    const LossFn trn = network_loss(net, p.trn, p.loss);
    const LossFn val = network_loss(net, p.val, p.loss);

    SecondOrderOptions opt;
    opt.eta = eta;
    const auto got = arch_grad_second_order(net.params(), trn, val, opt);

    auto unrolled = [&] {
        const auto saved = snapshot(weights);
        Tape t;
        t.backward(trn(t));
        for (auto* w : weights) {
            const Tensor g = t.grad_or_zero(*w);
            for (std::size_t i = 0; i < g.size(); ++i) w->value[i] -= eta * g[i];
        }
        Tape v;
        const double out = val(v).value().item();
        restore(weights, saved);
        return out;
    };

    const double h = 1e-5;
    double num2 = 0.0, ana2 = 0.0, diff2 = 0.0;
    for (std::size_t a = 0; a < alphas.size(); ++a)
        for (std::size_t i = 0; i < alphas[a]->value.size(); ++i) {
            double& x = alphas[a]->value[i];
            const double saved = x;
            x = saved + h;
            const double fp = unrolled();
            x = saved - h;
            const double fm = unrolled();
            x = saved;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = got[a][i];
            num2 += num * num;
            ana2 += ana * ana;
            diff2 += (num - ana) * (num - ana);
        }
    return std::sqrt(diff2) / std::max({std::sqrt(num2), std::sqrt(ana2), 1e-12});
}

bool eta_zero_matches_first_order(std::uint64_t seed)
{
    auto p = tiny_problem(seed);
    SecondOrderOptions opt;
    opt.eta = 0.0;
    const auto second = arch_grad_second_order(*p.net, p.trn, p.val, p.loss, opt);
    const auto first = arch_grad_first_order(*p.net, p.val, p.loss);
    return second == first;
}

double kl_monte_carlo_error(std::size_t pairs, std::size_t samples, std::uint64_t seed)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> umu(-1.5, 1.5), usig(0.4, 1.8);
    std::normal_distribution<double> normal(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t k = 0; k < pairs; ++k) {
        const double mu = umu(rng), sigma = usig(rng);
        double acc = 0.0;
        for (std::size_t s = 0; s < samples; ++s) {
            const double e = normal(rng);
            const double z = mu + sigma * e;
            acc += -std::log(sigma) - 0.5 * e * e + 0.5 * z * z;
        }
        const double mc = acc / static_cast<double>(samples);
        const double exact = kl_diag_gaussian(std::vector<double>{mu}, std::vector<double>{sigma});
        worst = std::max(worst, std::abs(mc - exact));
    }
    return worst;
}

Measured symmetric_quota_check(double rate, std::uint64_t seed)
{
    const std::size_t K = 6;
    const auto labels = uneven_labels(K, seed, 40);
    const auto n = class_counts(labels, K);
    const auto a = corrupt_symmetric(labels, K, rate, seed);
    const auto b = corrupt_symmetric(labels, K, rate, seed);
    const auto other = corrupt_symmetric(labels, K, rate, seed + 1);

    std::vector<std::size_t> got(K, 0);
    bool consistent = true;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool moved = a.noisy_labels[i] != labels[i];
        consistent &= moved == a.corrupted[i];
        if (a.corrupted[i]) ++got[static_cast<std::size_t>(labels[i])];
    }
    std::size_t off = 0;
    std::ostringstream os;
    for (std::size_t c = 0; c < K; ++c) {
        const auto want = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n[c])));
        off += got[c] > want ? got[c] - want : want - got[c];
        os << (c ? " " : "") << got[c] << "/" << want;
    }
    const bool deterministic = a.noisy_labels == b.noisy_labels && a.corrupted == b.corrupted;
    const bool seeded = other.noisy_labels != a.noisy_labels;
    return {off == 0 && consistent && deterministic && seeded, static_cast<double>(off),
            "per-class corrupted/quota " + os.str() + (deterministic ? "" : ", not deterministic") +
                (seeded ? "" : ", seed ignored")};
}

Measured asymmetric_quota_check(double rate, std::uint64_t seed)
{
    const std::size_t K = 6;
    const std::vector<std::pair<int, int>> mapping{{0, 1}, {2, 3}, {4, 0}, {5, 2}};
    const auto labels = uneven_labels(K, seed, 40);
    const auto n = class_counts(labels, K);
    const auto a = corrupt_asymmetric(labels, K, rate, mapping, seed);
    const auto b = corrupt_asymmetric(labels, K, rate, mapping, seed);

    std::vector<int> dst(K, -1);
    for (auto [s, d] : mapping) dst[static_cast<std::size_t>(s)] = d;
    std::vector<std::size_t> got(K, 0);
    bool ok = a.noisy_labels == b.noisy_labels && a.corrupted == b.corrupted;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto c = static_cast<std::size_t>(labels[i]);
        if (!a.corrupted[i]) {
            ok &= a.noisy_labels[i] == labels[i];
            continue;
        }
        ++got[c];
        ok &= a.noisy_labels[i] == dst[c];
    }
    std::size_t off = 0;
    std::ostringstream os;
    for (std::size_t c = 0; c < K; ++c) {
        const auto want =
            dst[c] < 0 ? std::size_t{0} : static_cast<std::size_t>(std::llround(rate * static_cast<double>(n[c])));
        off += got[c] > want ? got[c] - want : want - got[c];
        os << (c ? " " : "") << got[c] << "/" << want;
    }
    return {ok && off == 0, static_cast<double>(off), "per-class corrupted/quota " + os.str()};
}

Measured symmetric_uniformity_check(std::uint64_t seed)
{
    const std::size_t K = 5, per = 4000;
    std::vector<int> labels;
    for (std::size_t c = 0; c < K; ++c) labels.insert(labels.end(), per, static_cast<int>(c));
    const auto r = corrupt_symmetric(labels, K, 0.5, seed);
    std::vector<std::vector<std::size_t>> counts(K, std::vector<std::size_t>(K, 0));
    std::size_t moved = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (r.corrupted[i]) {
            ++counts[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(r.noisy_labels[i])];
            ++moved;
        }
    double worst = 0.0;
    bool self = false;
    for (std::size_t s = 0; s < K; ++s) {
        std::size_t ns = 0;
        for (auto v : counts[s]) ns += v;
        const double p = 1.0 / static_cast<double>(K - 1);
        const double mean = static_cast<double>(ns) * p;
        const double sd = std::sqrt(static_cast<double>(ns) * p * (1.0 - p));
        self |= counts[s][s] != 0;
        for (std::size_t d = 0; d < K; ++d)
            if (d != s) worst = std::max(worst, std::abs(static_cast<double>(counts[s][d]) - mean) / sd);
    }
    std::ostringstream os;
    os << moved << " corrupted samples, max |z| " << worst;
    return {moved == 10000 && !self && worst <= 3.0, worst, os.str()};
}

double coarsening_worst_increase(std::size_t datasets, std::uint64_t seed)
{
    Rng rng(seed);
    double worst = -1.0;
    for (std::size_t t = 0; t < datasets; ++t) {
        const std::size_t m = std::uniform_int_distribution<std::size_t>(20, 300)(rng);
        const std::size_t d = std::uniform_int_distribution<std::size_t>(1, 3)(rng);
        const std::size_t k = std::uniform_int_distribution<std::size_t>(2, 12)(rng);
        const std::size_t classes = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
        Tensor z({m, d});
        std::vector<int> labels(m);
        std::uniform_real_distribution<double> u(-1.2, 1.2);
        std::normal_distribution<double> noise(0.0, 0.5);
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                z[i * d + j] = u(rng);
                s += z[i * d + j];
            }
            const double score = std::tanh(s + noise(rng));
            labels[i] = std::min(static_cast<int>(classes) - 1, static_cast<int>((score + 1.0) / 2.0 * static_cast<double>(classes)));
        }
        const double fine = mutual_information(bin_activations(z, 2 * k, -1.0, 1.0), labels);
        const double coarse = mutual_information(bin_activations(z, k, -1.0, 1.0), labels);
        worst = std::max(worst, coarse - fine);
    }
    return worst;
}

} // namespace rdarts::testing
