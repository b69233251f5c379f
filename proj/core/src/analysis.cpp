#include "rdarts/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace rdarts {

std::vector<int> bin_activations(const Tensor& z, std::size_t n_bins, double lo, double hi)
{
    if (n_bins < 2) throw std::invalid_argument("need at least two bins");
    if (!(lo < hi)) throw std::invalid_argument("empty binning range");
    if (z.rank() == 0) return {};
    const std::size_t m = z.dim(0);
    const std::size_t d = m ? z.size() / m : 0;
    const double width = (hi - lo) / static_cast<double>(n_bins);

    std::map<std::vector<std::uint32_t>, int> ids;
    std::vector<int> codes(m);
    std::vector<std::uint32_t> key(d);
    for (std::size_t i = 0; i < m; ++i) {
        const double* row = z.ptr() + i * d;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = std::clamp(row[j], lo, hi);
            auto b = static_cast<std::size_t>((v - lo) / width);
            key[j] = static_cast<std::uint32_t>(std::min(b, n_bins - 1));
        }
        auto [it, fresh] = ids.try_emplace(key, static_cast<int>(ids.size()));
        codes[i] = it->second;
    }
    return codes;
}

double mutual_information(std::span<const int> codes, std::span<const int> labels)
{
    if (codes.size() != labels.size()) throw std::invalid_argument("codes and labels differ in length");
    if (codes.empty()) return 0.0;
    std::map<std::pair<int, int>, std::size_t> joint;
    std::map<int, std::size_t> pa, pb;
    for (std::size_t i = 0; i < codes.size(); ++i) {
        ++joint[{codes[i], labels[i]}];
        ++pa[codes[i]];
        ++pb[labels[i]];
    }
    const double n = static_cast<double>(codes.size());
    double mi = 0.0;
    for (const auto& [key, c] : joint) {
        const double pxy = static_cast<double>(c) / n;
        const double px = static_cast<double>(pa[key.first]) / n;
        const double py = static_cast<double>(pb[key.second]) / n;
        mi += pxy * std::log2(pxy / (px * py));
    }
    return std::max(mi, 0.0);
}

std::pair<double, double> TapRange::resolve(const Tensor& values) const
{
    if (mode == Mode::fixed) return {lo, hi};
    std::vector<double> v(values.data().begin(), values.data().end());
    if (v.empty()) return {0.0, 1.0};
    auto quantile = [&](double q) {
        const auto k = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
        return v[k];
    };
    double a = mode == Mode::relu ? 0.0 : quantile(0.01);
    double b = quantile(0.99);
    if (!(b > a)) b = a + 1.0;
    return {a, b};
}

std::vector<MIRecord> mi_trajectory(const TapFn& taps, const NoisyDataset& ds, std::size_t epoch, const MIOptions& opt)
{
    if (opt.ranges.empty()) throw std::invalid_argument("no tap ranges");
    const auto layers = taps(ds.inputs);

    std::vector<std::size_t> clean_idx, noisy_idx;
    for (std::size_t i = 0; i < ds.size(); ++i) (ds.corrupted[i] ? noisy_idx : clean_idx).push_back(i);
    auto pick = [](const std::vector<int>& v, const std::vector<std::size_t>& idx) {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(v[i]);
        return out;
    };
    const auto clean_labels = pick(ds.clean_labels, clean_idx);
    const auto noisy_labels = pick(ds.noisy_labels, noisy_idx);

    std::vector<int> x_codes;
    if (opt.with_zx) {
        auto [a, b] = opt.input_range.resolve(ds.inputs);
        x_codes = bin_activations(ds.inputs, opt.input_bins, a, b);
    }

    std::vector<MIRecord> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const TapRange& range = opt.ranges.size() == 1 ? opt.ranges[0] : opt.ranges.at(l);
        auto [a, b] = range.resolve(layers[l]);
        const auto codes = bin_activations(layers[l], opt.n_bins, a, b);
        MIRecord r;
        r.epoch = epoch;
        r.layer = l;
        r.i_all = mutual_information(codes, ds.noisy_labels);
        r.clean_empty = clean_idx.empty();
        r.noisy_empty = noisy_idx.empty();
        if (!r.clean_empty) r.i_clean = mutual_information(pick(codes, clean_idx), clean_labels);
        if (!r.noisy_empty) r.i_noisy = mutual_information(pick(codes, noisy_idx), noisy_labels);
        if (opt.with_zx) r.i_zx = mutual_information(codes, x_codes);
        out.push_back(r);
    }
    return out;
}

TapFn network_taps(Network& net)
{
    return [&net](const Tensor& inputs) {
        Tape tape;
        ForwardContext ctx(tape);
        ctx.train = false;
        ctx.update_bn_stats = false;
        auto out = net.forward(ctx, inputs);
        std::vector<Tensor> taps;
        for (const auto& c : out.cell_outputs) {
            const auto& v = c.value();
            taps.push_back(v.reshaped(Shape{v.dim(0), v.size() / v.dim(0)}));
        }
        return taps;
    };
}

GradNormRecord grad_norm_split(std::span<Parameter* const> params, const PerSampleLossFn& loss,
                               const std::vector<bool>& corrupted, std::size_t epoch)
{
    Tape tape;
    Var per_sample = loss(tape);
    const std::size_t B = per_sample.size();
    if (corrupted.size() != B) throw std::invalid_argument("corruption flags do not match the batch");
    for (auto* p : params) tape.param(*p);

    std::size_t total = 0;
    for (auto* p : params) total += p->value.size();
    std::vector<double> g_clean(total, 0.0), g_noisy(total, 0.0);
    std::vector<double> norms_clean, norms_noisy;

    Tensor seed(per_sample.shape(), 0.0);
    for (std::size_t i = 0; i < B; ++i) {
        tape.zero_grad();
        seed.fill(0.0);
        seed[i] = 1.0;
        tape.backward(per_sample, seed);
        auto& acc = corrupted[i] ? g_noisy : g_clean;
        double sq = 0.0;
        std::size_t k = 0;
        for (auto* p : params)
            for (double g : tape.grad(*p).data()) {
                sq += g * g;
                acc[k++] += g / static_cast<double>(B);
            }
        (corrupted[i] ? norms_noisy : norms_clean).push_back(std::sqrt(sq));
    }

    auto side = [](const std::vector<double>& norms, const std::vector<double>& g) {
        GradNormSide s;
        s.count = norms.size();
        s.present = !norms.empty();
        if (!s.present) return s;
        for (double n : norms) s.mean += n;
        s.mean /= static_cast<double>(norms.size());
        for (double n : norms) s.std += (n - s.mean) * (n - s.mean);
        s.std = std::sqrt(s.std / static_cast<double>(norms.size()));
        s.total_norm = l2_norm(g);
        return s;
    };
    GradNormRecord r;
    r.epoch = epoch;
    r.clean = side(norms_clean, g_clean);
    r.noisy = side(norms_noisy, g_noisy);
    std::vector<double> g(total);
    for (std::size_t k = 0; k < total; ++k) g[k] = g_clean[k] + g_noisy[k];
    r.batch_norm = l2_norm(g);
    return r;
}

std::size_t OpHistogram::total(CellType t) const
{
    std::size_t n = 0;
    for (auto c : counts[t == CellType::normal ? 0 : 1]) n += c;
    return n;
}

double OpHistogram::parameterless_fraction(CellType t) const
{
    const std::size_t n = total(t);
    if (n == 0) return 0.0;
    std::size_t free = 0;
    for (auto k : kAllOperators)
        if (is_parameterless(k)) free += count(t, k);
    return static_cast<double>(free) / static_cast<double>(n);
}

OpHistogram op_histogram(std::span<const Genotype> genotypes)
{
    if (genotypes.empty()) throw std::invalid_argument("no genotypes to tally");
    OpHistogram h;
    h.runs = genotypes.size();
    for (const auto& g : genotypes)
        for (auto t : {CellType::normal, CellType::reduce})
            for (const auto& node : g.cell(t).nodes)
                for (const auto& e : node) ++h.counts[t == CellType::normal ? 0 : 1][operator_index(e.op)];
    return h;
}

} // namespace rdarts
