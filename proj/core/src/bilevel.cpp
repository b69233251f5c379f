#include "rdarts/bilevel.hpp"

#include "rdarts/log.hpp"
#include "rdarts/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rdarts {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_grads(std::span<Parameter* const> params, std::span<const Tensor> grads)
{
    if (params.size() != grads.size())
        throw ShapeError(std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                         " parameters");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i]->value.shape() != grads[i].shape())
            throw ShapeError("gradient " + shape_str(grads[i].shape()) + " does not match parameter " +
                             params[i]->name + " " + shape_str(params[i]->value.shape()));
}

std::vector<Tensor> grads_of(const Tape& tape, std::span<Parameter* const> params)
{
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (auto* p : params) out.push_back(tape.grad_or_zero(*p));
    return out;
}

double norm_of(const std::vector<Tensor>& ts)
{
    double s = 0.0;
    for (const auto& t : ts)
        for (double v : t.data()) s += v * v;
    return std::sqrt(s);
}

/// value += c * dir, elementwise over every parameter.
void axpy(std::span<Parameter* const> params, double c, const std::vector<Tensor>& dir)
{
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->value.data();
        auto d = dir[i].data();
        for (std::size_t k = 0; k < p.size(); ++k) p[k] += c * d[k];
    }
}

std::vector<Tensor> grad_at(const LossFn& fn, std::span<Parameter* const> wrt)
{
    Tape tape;
    Var loss = fn(tape);
    tape.backward(loss);
    return grads_of(tape, wrt);
}

std::size_t argmax_row(const double* row, std::size_t n)
{
    return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

} // namespace

// --- optimizers --------------------------------------------------------------

const Tensor* SgdState::buffer(const Parameter& p) const
{
    auto it = velocity.find(&p);
    return it == velocity.end() ? nullptr : &it->second;
}

void sgd_step(std::span<Parameter* const> params, std::span<const Tensor> grads, SgdState& state, double lr,
              double momentum, double weight_decay)
{
    check_grads(params, grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->value;
        auto [it, fresh] = state.velocity.try_emplace(params[i], p.shape(), 0.0);
        auto v = it->second.data();
        auto x = p.data();
        auto g = grads[i].data();
        for (std::size_t k = 0; k < x.size(); ++k) {
            v[k] = momentum * v[k] + (g[k] + weight_decay * x[k]);
            x[k] -= lr * v[k];
        }
    }
    ++state.steps;
}

void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state,
               const AdamConfig& cfg)
{
    check_grads(params, grads);
    ++state.steps;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.steps));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.steps));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->value;
        auto m = state.m.try_emplace(params[i], p.shape(), 0.0).first->second.data();
        auto v = state.v.try_emplace(params[i], p.shape(), 0.0).first->second.data();
        auto x = p.data();
        auto g = grads[i].data();
        for (std::size_t k = 0; k < x.size(); ++k) {
            const double gk = g[k] + cfg.weight_decay * x[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            x[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
        }
    }
}

double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min)
{
    if (step > total) throw std::out_of_range("schedule step " + std::to_string(step) + " beyond " + std::to_string(total));
    if (total == 0) return lr_max;
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(kPi * static_cast<double>(step) / static_cast<double>(total)));
}

// --- architecture gradients -------------------------------------------------

std::vector<Parameter*> weight_params(ParamStore& store) { return store.in({Partition::theta, Partition::phi}); }
std::vector<Parameter*> arch_params(ParamStore& store) { return store.in(Partition::alpha); }

std::vector<Tensor> arch_grad_first_order(ParamStore& store, const LossFn& val)
{
    auto alpha = arch_params(store);
    return grad_at(val, alpha);
}

std::vector<Tensor> arch_grad_second_order(ParamStore& store, const LossFn& trn, const LossFn& val,
                                           const SecondOrderOptions& opt, SecondOrderInfo* info)
{
    if (!(opt.eta >= 0.0)) throw std::invalid_argument("unrolling step must be nonnegative");
    auto w = weight_params(store);
    auto alpha = arch_params(store);
    const auto saved = snapshot(w);

    // virtual step w' = w - eta * (momentum * v + g + wd * w)
    if (opt.eta > 0.0) {
        auto g = grad_at(trn, w);
        for (std::size_t i = 0; i < w.size(); ++i) {
            const Tensor* buf = opt.state ? opt.state->buffer(*w[i]) : nullptr;
            auto x = w[i]->value.data();
            auto gi = g[i].data();
            for (std::size_t k = 0; k < x.size(); ++k) {
                const double step = (buf ? opt.momentum * (*buf)[k] : 0.0) + gi[k] + opt.weight_decay * x[k];
                x[k] -= opt.eta * step;
            }
        }
    }

    std::vector<Tensor> g_alpha, g_w;
    {
        Tape tape;
        Var loss = val(tape);
        tape.backward(loss);
        g_alpha = grads_of(tape, alpha);
        g_w = grads_of(tape, w);
    }
    restore(w, saved);

    SecondOrderInfo local;
    local.grad_theta_norm = norm_of(g_w);
    if (opt.eta == 0.0) {
        if (info) *info = local;
        return g_alpha;
    }
    if (local.grad_theta_norm == 0.0) {
        local.hvp_skipped = true;
        log_warn("second-order step: zero weight gradient, Hessian-vector product skipped");
        if (info) *info = local;
        return g_alpha;
    }

    const double eps = opt.fd_scale / local.grad_theta_norm;
    local.epsilon = eps;
    axpy(w, eps, g_w);
    auto g_plus = grad_at(trn, alpha);
    restore(w, saved);
    axpy(w, -eps, g_w);
    auto g_minus = grad_at(trn, alpha);
    restore(w, saved);

    for (std::size_t i = 0; i < alpha.size(); ++i) {
        auto out = g_alpha[i].data();
        auto gp = g_plus[i].data();
        auto gm = g_minus[i].data();
        for (std::size_t k = 0; k < out.size(); ++k) out[k] -= opt.eta * (gp[k] - gm[k]) / (2.0 * eps);
    }
    if (info) *info = local;
    return g_alpha;
}

// --- network glue ------------------------------------------------------------

Batch make_batch(const NoisyDataset& ds, std::span<const std::size_t> idx, std::uint64_t noise_key)
{
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (auto i : idx) labels.push_back(ds.noisy_labels.at(i));
    return Batch{ds.batch_inputs(idx), ops::one_hot(labels, ds.classes), noise_key};
}

LossFn network_loss(Network& net, const Batch& batch, const LossOptions& loss)
{
    return [&net, &batch, loss](Tape& tape) {
        ForwardContext ctx(tape);
        ctx.train = true;
        ctx.update_bn_stats = false;
        ctx.noise_key = batch.noise_key;
        auto out = net.forward(ctx, batch.inputs);
        return nas_loss(out.logits, batch.onehot, out.sites, loss).total;
    };
}

std::vector<Tensor> arch_grad_first_order(Network& net, const Batch& val, const LossOptions& loss)
{
    return arch_grad_first_order(net.params(), network_loss(net, val, loss));
}

std::vector<Tensor> arch_grad_second_order(Network& net, const Batch& trn, const Batch& val, const LossOptions& loss,
                                           const SecondOrderOptions& opt, SecondOrderInfo* info)
{
    return arch_grad_second_order(net.params(), network_loss(net, trn, loss), network_loss(net, val, loss), opt, info);
}

double evaluate_accuracy(Network& net, const NoisyDataset& ds, std::span<const int> labels, std::size_t batch_size)
{
    if (labels.size() != ds.size()) throw std::invalid_argument("label count does not match dataset");
    if (ds.size() == 0) return 0.0;
    batch_size = std::max<std::size_t>(batch_size, 1);
    std::size_t correct = 0;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        Tape tape;
        ForwardContext ctx(tape);
        ctx.train = false;
        ctx.update_bn_stats = false;
        auto out = net.forward(ctx, ds.batch_inputs(idx));
        const auto& logits = out.logits.value();
        const std::size_t C = logits.dim(1);
        for (std::size_t r = 0; r < idx.size(); ++r)
            if (static_cast<int>(argmax_row(logits.ptr() + r * C, C)) == labels[idx[r]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// --- phases ------------------------------------------------------------------

namespace {

struct WeightStepResult {
    LossReport report;
    std::size_t correct = 0;
};

/// One SGD step of theta and phi on nas_loss over `batch`.
WeightStepResult weight_step(Network& net, const Batch& batch, const LossOptions& loss, SgdState& state, double lr,
                             double momentum, double weight_decay)
{
    Tape tape;
    ForwardContext ctx(tape);
    ctx.train = true;
    ctx.update_bn_stats = true;
    ctx.noise_key = batch.noise_key;
    auto out = net.forward(ctx, batch.inputs);
    auto l = nas_loss(out.logits, batch.onehot, out.sites, loss);
    if (!std::isfinite(l.report.total))
        throw NonFiniteLoss("non-finite training loss (nll " + std::to_string(l.report.nll) + ", kl " +
                            std::to_string(l.report.kl) + ")");
    tape.backward(l.total);
    auto w = weight_params(net.params());
    sgd_step(w, grads_of(tape, w), state, lr, momentum, weight_decay);

    WeightStepResult r{l.report, 0};
    const auto& logits = out.logits.value();
    const std::size_t C = logits.dim(1);
    for (std::size_t i = 0; i < logits.dim(0); ++i)
        if (batch.onehot[i * C + argmax_row(logits.ptr() + i * C, C)] == 1.0) ++r.correct;
    return r;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& rng)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch_size)
        out.emplace_back(order.begin() + s, order.begin() + std::min(n, s + batch_size));
    // a trailing batch of one would break batch statistics
    if (out.size() > 1 && out.back().size() < 2) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

struct EpochAccumulator {
    double loss = 0, nll = 0, kl = 0;
    std::size_t correct = 0, seen = 0;

    void add(const WeightStepResult& r, std::size_t b)
    {
        loss += r.report.total * double(b);
        nll += r.report.nll * double(b);
        kl += r.report.kl * double(b);
        correct += r.correct;
        seen += b;
    }
    void into(EpochMetrics& m) const
    {
        const double n = std::max<double>(double(seen), 1.0);
        m.train_loss = loss / n;
        m.train_nll = nll / n;
        m.train_kl = kl / n;
        m.train_acc = double(correct) / n;
    }
};

void check_config(double lr, std::size_t batch_size)
{
    if (!(lr > 0.0)) throw std::invalid_argument("weight learning rate must be positive");
    if (batch_size < 2) throw std::invalid_argument("batch size must be at least 2");
}

} // namespace

SearchResult search_phase(Network& net, const NoisyDataset& trn, const NoisyDataset& val, const SearchConfig& cfg,
                          const EpochCallback& on_epoch)
{
    if (!net.is_supernet()) throw std::invalid_argument("search needs a supernet");
    check_config(cfg.w_lr, cfg.batch_size);
    if (cfg.order == ArchOrder::second && !(cfg.eta > 0.0))
        throw std::invalid_argument("second-order search needs a positive unrolling step");
    if (trn.size() < 2 || val.size() < 2) throw std::invalid_argument("search needs training and validation data");

    SearchResult result;
    const auto& alphas = net.alphas();
    result.alphas.push_back({0, alphas.normal->value, alphas.reduce->value});

    SgdState wstate;
    AdamState astate;
    auto alpha = arch_params(net.params());
    Rng trn_rng(derive_seed(cfg.seed, "search.trn_order"));
    Rng val_rng(derive_seed(cfg.seed, "search.val_order"));
    std::vector<std::vector<std::size_t>> val_batches;
    std::size_t val_cursor = 0;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.cosine ? cosine_lr(epoch, cfg.epochs, cfg.w_lr, cfg.w_lr_min) : cfg.w_lr;
        EpochAccumulator acc;
        for (const auto& idx : epoch_batches(trn.size(), cfg.batch_size, trn_rng)) {
            if (val_cursor == val_batches.size()) {
                val_batches = epoch_batches(val.size(), cfg.batch_size, val_rng);
                val_cursor = 0;
            }
            Batch tb = make_batch(trn, idx, derive_seed(cfg.seed, "search.noise.trn", step));
            Batch vb = make_batch(val, val_batches[val_cursor++], derive_seed(cfg.seed, "search.noise.val", step));

            if (cfg.arch.lr > 0.0) {
                std::vector<Tensor> g;
                if (cfg.order == ArchOrder::first) {
                    g = arch_grad_first_order(net, vb, cfg.loss);
                } else {
                    SecondOrderOptions so{cfg.eta, cfg.w_momentum, cfg.w_weight_decay, &wstate, cfg.fd_scale};
                    SecondOrderInfo info;
                    g = arch_grad_second_order(net, tb, vb, cfg.loss, so, &info);
                    if (info.hvp_skipped) ++result.hvp_skipped;
                }
                adam_step(alpha, g, astate, cfg.arch);
            }
            acc.add(weight_step(net, tb, cfg.loss, wstate, lr, cfg.w_momentum, cfg.w_weight_decay), idx.size());
            ++step;
        }

        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = lr;
        acc.into(m);
        m.val_acc = evaluate_accuracy(net, val, val.noisy_labels, cfg.batch_size);
        m.val_clean_acc = evaluate_accuracy(net, val, val.clean_labels, cfg.batch_size);
        result.metrics.push_back(m);
        result.alphas.push_back({epoch + 1, alphas.normal->value, alphas.reduce->value});
        if (on_epoch) on_epoch(m);
    }
    result.genotype = derive_genotype(alphas, net.config().nodes, GenotypeMeta{cfg.seed, "", cfg.epochs});
    return result;
}

EvalResult evaluation_phase(const Genotype& genotype, const NoisyDataset& trn, const NoisyDataset& test,
                            const EvalConfig& cfg, const EpochCallback& on_epoch)
{
    check_config(cfg.w_lr, cfg.batch_size);
    if (trn.size() < 2) throw std::invalid_argument("evaluation needs training data");
    EvalResult result;
    result.network = Network::discrete(genotype, cfg.network);
    Network& net = *result.network;

    SgdState state;
    Rng rng(derive_seed(cfg.seed, "eval.trn_order"));
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.cosine ? cosine_lr(epoch, cfg.epochs, cfg.w_lr, cfg.w_lr_min) : cfg.w_lr;
        EpochAccumulator acc;
        for (const auto& idx : epoch_batches(trn.size(), cfg.batch_size, rng)) {
            Batch b = make_batch(trn, idx, derive_seed(cfg.seed, "eval.noise", step++));
            acc.add(weight_step(net, b, cfg.loss, state, lr, cfg.w_momentum, cfg.w_weight_decay), idx.size());
        }
        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = lr;
        acc.into(m);
        m.val_acc = evaluate_accuracy(net, test, test.noisy_labels, cfg.batch_size);
        m.val_clean_acc = evaluate_accuracy(net, test, test.clean_labels, cfg.batch_size);
        result.metrics.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    result.final_test_acc = evaluate_accuracy(net, test, test.clean_labels, cfg.batch_size);
    return result;
}

} // namespace rdarts
