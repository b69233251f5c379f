#include "rdarts/toy.hpp"

#include "rdarts/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rdarts {

ToyMlp::ToyMlp(const ToyMlpConfig& cfg) : cfg_(cfg)
{
    if (cfg.widths.size() < 2) throw std::invalid_argument("toy network needs an input and a hidden width");
    if (cfg.classes < 2) throw std::invalid_argument("toy network needs at least two classes");
    const auto& w = cfg.widths;
    for (auto l : cfg.inject_layers)
        if (l + 1 >= w.size()) throw std::invalid_argument("injection layer " + std::to_string(l) + " does not exist");
    for (std::size_t l = 0; l + 1 < w.size(); ++l) {
        const std::string name = "fc" + std::to_string(l);
        layers_.push_back(std::make_unique<Linear>(params_, name, w[l], w[l + 1], Partition::theta, cfg.block.init_seed));
        const std::string inj = name + ".noise";
        const bool selected = cfg.inject_layers.empty() ||
                              std::find(cfg.inject_layers.begin(), cfg.inject_layers.end(), l) != cfg.inject_layers.end();
        switch (selected ? cfg.injection : Injection::none) {
        case Injection::none: injectors_.push_back(nullptr); break;
        case Injection::learned: injectors_.push_back(std::make_unique<NoiseInjector>(params_, inj, w[l + 1], cfg.block)); break;
        case Injection::constant:
            injectors_.push_back(std::make_unique<ConstantNoiseInjector>(inj, cfg.const_mu, cfg.const_sigma));
            break;
        }
    }
    layers_.push_back(
        std::make_unique<Linear>(params_, "out", w.back(), cfg.classes, Partition::theta, cfg.block.init_seed));
}

ToyMlp::Output ToyMlp::forward(ForwardContext& ctx, const Tensor& x)
{
    if (x.rank() != 2 || x.dim(1) != cfg_.widths[0])
        throw ShapeError("toy network expects [B x " + std::to_string(cfg_.widths[0]) + "], got " + shape_str(x.shape()));
    Output out;
    auto* saved = ctx.sites;
    ctx.sites = &out.sites;
    Var h = ctx.tape.constant(x);
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
        Var pre = layers_[l]->forward(ctx, h);
        if (injectors_[l]) pre = injectors_[l]->forward(ctx, pre);
        h = ops::tanh(pre);
        out.hidden.push_back(h);
    }
    out.logits = layers_.back()->forward(ctx, h);
    ctx.sites = saved;
    if (saved) saved->insert(saved->end(), out.sites.begin(), out.sites.end());
    return out;
}

TapFn ToyMlp::taps()
{
    return [this](const Tensor& inputs) {
        Tape tape;
        ForwardContext ctx(tape);
        ctx.train = false;
        ctx.update_bn_stats = false;
        auto out = forward(ctx, inputs);
        std::vector<Tensor> t;
        for (const auto& h : out.hidden) t.push_back(h.value());
        return t;
    };
}

double toy_accuracy(ToyMlp& net, const NoisyDataset& ds, std::span<const int> labels)
{
    if (labels.size() != ds.size()) throw std::invalid_argument("label count does not match dataset");
    if (ds.size() == 0) return 0.0;
    Tape tape;
    ForwardContext ctx(tape);
    ctx.train = false;
    auto out = net.forward(ctx, ds.inputs);
    const auto& logits = out.logits.value();
    const std::size_t C = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double* row = logits.ptr() + i * C;
        if (static_cast<int>(std::max_element(row, row + C) - row) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

ToyRunResult train_toy(ToyMlp& net, const NoisyDataset& trn, const NoisyDataset& val, const ToyTrainConfig& cfg,
                       const EpochCallback& on_epoch)
{
    if (trn.size() < 2) throw std::invalid_argument("toy training needs data");
    if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
    ToyRunResult result;
    auto w = weight_params(net.params());
    SgdState state;
    Rng rng(derive_seed(cfg.seed, "toy.order"));
    std::vector<std::size_t> order(trn.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = cfg.cosine ? cosine_lr(epoch - 1, cfg.epochs, cfg.lr, cfg.lr_min) : cfg.lr;
        std::size_t correct = 0;
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
            std::span<const std::size_t> idx(order.data() + s, std::min(cfg.batch_size, order.size() - s));
            Batch b = make_batch(trn, idx, derive_seed(cfg.seed, "toy.noise", step++));
            Tape tape;
            ForwardContext ctx(tape);
            ctx.noise_key = b.noise_key;
            auto out = net.forward(ctx, b.inputs);
            auto l = nas_loss(out.logits, b.onehot, out.sites, cfg.loss);
            if (!std::isfinite(l.report.total))
                throw NonFiniteLoss("non-finite toy loss at epoch " + std::to_string(epoch));
            tape.backward(l.total);
            std::vector<Tensor> g;
            for (auto* p : w) g.push_back(tape.grad_or_zero(*p));
            sgd_step(w, g, state, m.lr, cfg.momentum, cfg.weight_decay);

            const double n = static_cast<double>(idx.size());
            m.train_loss += l.report.total * n;
            m.train_nll += l.report.nll * n;
            m.train_kl += l.report.kl * n;
            const auto& logits = out.logits.value();
            const std::size_t C = logits.dim(1);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const double* row = logits.ptr() + i * C;
                if (b.onehot[i * C + static_cast<std::size_t>(std::max_element(row, row + C) - row)] == 1.0) ++correct;
            }
        }
        const double n = static_cast<double>(trn.size());
        m.train_loss /= n;
        m.train_nll /= n;
        m.train_kl /= n;
        m.train_acc = static_cast<double>(correct) / n;
        m.val_acc = toy_accuracy(net, val, val.noisy_labels);
        m.val_clean_acc = toy_accuracy(net, val, val.clean_labels);
        result.metrics.push_back(m);

        if (cfg.mi_every && epoch > cfg.mi_from && epoch % cfg.mi_every == 0) {
            auto recs = mi_trajectory(net.taps(), trn, epoch, cfg.mi);
            result.mi.insert(result.mi.end(), recs.begin(), recs.end());
        }
        if (cfg.gradnorm_every && epoch % cfg.gradnorm_every == 0) {
            Batch all = make_batch(trn, order, derive_seed(cfg.seed, "toy.gradnorm", epoch));
            auto loss_fn = [&](Tape& tape) {
                ForwardContext ctx(tape);
                ctx.noise_key = all.noise_key;
                auto out = net.forward(ctx, all.inputs);
                return nas_loss(out.logits, all.onehot, out.sites, cfg.loss).per_sample;
            };
            std::vector<bool> flags;
            for (auto i : order) flags.push_back(trn.corrupted[i]);
            result.gradnorm.push_back(grad_norm_split(w, loss_fn, flags, epoch));
        }
        if (on_epoch) on_epoch(m);
    }
    result.final_val_acc = result.metrics.empty() ? toy_accuracy(net, val, val.clean_labels)
                                                  : result.metrics.back().val_clean_acc;
    return result;
}

} // namespace rdarts
