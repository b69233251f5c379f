#include "rdarts/data.hpp"

#include "rdarts/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace rdarts {

namespace {

std::size_t quota(double rate, std::size_t n) { return static_cast<std::size_t>(std::llround(rate * static_cast<double>(n))); }

void check_labels(std::span<const int> labels, std::size_t classes)
{
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
}

void check_rate(double rate)
{
    if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("noise rate must be in [0, 1]");
}

std::vector<std::vector<std::size_t>> by_class(std::span<const int> labels, std::size_t classes)
{
    std::vector<std::vector<std::size_t>> out(classes);
    for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<std::size_t>(labels[i])].push_back(i);
    return out;
}

Corruption identity(std::span<const int> labels)
{
    return {std::vector<int>(labels.begin(), labels.end()), std::vector<bool>(labels.size(), false)};
}

} // namespace

Shape NoisyDataset::sample_shape() const
{
    const auto& s = inputs.shape();
    return Shape(s.begin() + 1, s.end());
}

Tensor NoisyDataset::batch_inputs(std::span<const std::size_t> idx) const
{
    if (idx.empty()) throw std::invalid_argument("empty batch");
    Shape s = inputs.shape();
    const std::size_t per = inputs.size() / s[0];
    s[0] = idx.size();
    Tensor out(s);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= size()) throw std::out_of_range("sample index out of range");
        std::copy_n(inputs.ptr() + idx[k] * per, per, out.ptr() + k * per);
    }
    return out;
}

NoisyDataset NoisyDataset::subset(std::span<const std::size_t> idx) const
{
    NoisyDataset out;
    out.inputs = batch_inputs(idx);
    out.classes = classes;
    out.tag = tag;
    for (auto i : idx) {
        out.clean_labels.push_back(clean_labels[i]);
        out.noisy_labels.push_back(noisy_labels[i]);
        out.corrupted.push_back(corrupted[i]);
    }
    return out;
}

void NoisyDataset::check() const
{
    const std::size_t m = clean_labels.size();
    if (noisy_labels.size() != m || corrupted.size() != m || (m && inputs.dim(0) != m))
        throw std::logic_error("dataset fields have inconsistent lengths");
    for (std::size_t i = 0; i < m; ++i) {
        if (clean_labels[i] < 0 || static_cast<std::size_t>(clean_labels[i]) >= classes || noisy_labels[i] < 0 ||
            static_cast<std::size_t>(noisy_labels[i]) >= classes)
            throw std::logic_error("label out of range at sample " + std::to_string(i));
        if (corrupted[i] != (clean_labels[i] != noisy_labels[i]))
            throw std::logic_error("corruption flag disagrees with labels at sample " + std::to_string(i));
    }
}

std::string NoiseSpec::describe() const
{
    std::ostringstream os;
    switch (kind) {
    case NoiseKind::none: return "none";
    case NoiseKind::symmetric: os << "symmetric:" << rate; break;
    case NoiseKind::asymmetric: os << "asymmetric:" << rate; break;
    }
    return os.str();
}

Corruption corrupt_symmetric(std::span<const int> labels, std::size_t classes, double rate, std::uint64_t seed)
{
    if (classes < 2) throw std::invalid_argument("symmetric noise needs at least two classes");
    check_rate(rate);
    check_labels(labels, classes);
    Corruption out = identity(labels);
    auto groups = by_class(labels, classes);
    for (std::size_t c = 0; c < classes; ++c) {
        auto& members = groups[c];
        if (members.empty()) continue;
        Rng rng(derive_seed(seed, c, 1));
        std::shuffle(members.begin(), members.end(), rng);
        std::uniform_int_distribution<std::size_t> other(0, classes - 2);
        for (std::size_t k = 0; k < quota(rate, members.size()); ++k) {
            std::size_t d = other(rng);
            if (d >= c) ++d;
            out.noisy_labels[members[k]] = static_cast<int>(d);
            out.corrupted[members[k]] = true;
        }
    }
    return out;
}

Corruption corrupt_asymmetric(std::span<const int> labels, std::size_t classes, double rate,
                              std::span<const std::pair<int, int>> mapping, std::uint64_t seed)
{
    check_rate(rate);
    check_labels(labels, classes);
    std::set<int> sources;
    for (auto [s, d] : mapping) {
        if (s < 0 || d < 0 || static_cast<std::size_t>(s) >= classes || static_cast<std::size_t>(d) >= classes)
            throw std::invalid_argument("asymmetric mapping references a class outside [0, " + std::to_string(classes) + ")");
        if (s == d) throw std::invalid_argument("asymmetric mapping maps class " + std::to_string(s) + " to itself");
        if (!sources.insert(s).second)
            throw std::invalid_argument("asymmetric mapping repeats source class " + std::to_string(s));
    }
    Corruption out = identity(labels);
    auto groups = by_class(labels, classes);
    for (auto [s, d] : mapping) {
        auto& members = groups[static_cast<std::size_t>(s)];
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s), 2));
        std::shuffle(members.begin(), members.end(), rng);
        for (std::size_t k = 0; k < quota(rate, members.size()); ++k) {
            out.noisy_labels[members[k]] = d;
            out.corrupted[members[k]] = true;
        }
    }
    return out;
}

void apply_noise(NoisyDataset& ds, const NoiseSpec& spec)
{
    Corruption c;
    switch (spec.kind) {
    case NoiseKind::none: c = identity(ds.clean_labels); break;
    case NoiseKind::symmetric: c = corrupt_symmetric(ds.clean_labels, ds.classes, spec.rate, spec.seed); break;
    case NoiseKind::asymmetric:
        c = corrupt_asymmetric(ds.clean_labels, ds.classes, spec.rate, spec.mapping, spec.seed);
        break;
    }
    ds.noisy_labels = std::move(c.noisy_labels);
    ds.corrupted = std::move(c.corrupted);
}

NoisyDataset generate_toy_dataset(std::size_t n_bits, std::size_t n_samples, std::uint64_t seed, ToySampling sampling)
{
    if (n_bits < 4) throw std::invalid_argument("toy dataset needs at least 4 bits");
    if (n_bits > 30) throw std::invalid_argument("toy dataset supports at most 30 bits");
    const std::size_t total = std::size_t{1} << n_bits;
    if (n_samples == 0) n_samples = total;
    if (sampling == ToySampling::exhaustive && n_samples > total)
        throw std::invalid_argument(std::to_string(n_samples) + " distinct samples requested from " +
                                    std::to_string(total) + " patterns");

    Rng rng(derive_seed(seed, "toy.weights"));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> w(n_bits);
    for (auto& v : w) v = normal(rng);
    std::vector<double> pw(n_bits * n_bits, 0.0);
    for (std::size_t i = 0; i < n_bits; ++i)
        for (std::size_t j = i + 1; j < n_bits; ++j) pw[i * n_bits + j] = normal(rng) / std::sqrt(double(n_bits));

    std::vector<std::uint64_t> patterns;
    Rng prng(derive_seed(seed, "toy.patterns"));
    if (sampling == ToySampling::exhaustive) {
        patterns.resize(total);
        std::iota(patterns.begin(), patterns.end(), 0);
        if (n_samples < total) {
            std::shuffle(patterns.begin(), patterns.end(), prng);
            patterns.resize(n_samples);
            std::sort(patterns.begin(), patterns.end());
        }
    } else {
        std::uniform_int_distribution<std::uint64_t> pick(0, total - 1);
        for (std::size_t i = 0; i < n_samples; ++i) patterns.push_back(pick(prng));
    }

    NoisyDataset ds;
    ds.classes = 2;
    ds.tag = "toy";
    ds.inputs = Tensor(Shape{n_samples, n_bits});
    std::vector<double> score(n_samples);
    for (std::size_t s = 0; s < n_samples; ++s) {
        double* x = ds.inputs.ptr() + s * n_bits;
        for (std::size_t i = 0; i < n_bits; ++i) x[i] = (patterns[s] >> i) & 1 ? 1.0 : -1.0;
        double z = 0.0;
        for (std::size_t i = 0; i < n_bits; ++i) {
            z += w[i] * x[i];
            for (std::size_t j = i + 1; j < n_bits; ++j) z += pw[i * n_bits + j] * x[i] * x[j];
        }
        score[s] = std::tanh(z);
    }
    // rank-based split keeps the classes balanced even with tied scores
    std::vector<std::size_t> order(n_samples);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
    ds.clean_labels.assign(n_samples, 0);
    for (std::size_t r = n_samples / 2; r < n_samples; ++r) ds.clean_labels[order[r]] = 1;
    ds.noisy_labels = ds.clean_labels;
    ds.corrupted.assign(n_samples, false);
    return ds;
}

NoisyDataset generate_image_dataset(std::size_t classes, std::size_t per_class, std::size_t hw, std::uint64_t seed,
                                    double pixel_noise)
{
    if (classes < 2) throw std::invalid_argument("image dataset needs at least two classes");
    if (hw < 8) throw std::invalid_argument("image side must be at least 8");
    if (per_class == 0) throw std::invalid_argument("image dataset needs samples");
    constexpr std::size_t channels = 3;
    constexpr double pi = 3.14159265358979323846;
    const std::size_t plane = hw * hw;

    std::vector<std::vector<double>> protos(classes, std::vector<double>(channels * plane, 0.0));
    Rng prng(derive_seed(seed, "image.prototypes"));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<int> freq(1, 3);
    for (auto& proto : protos)
        for (std::size_t ch = 0; ch < channels; ++ch)
            for (int k = 0; k < 2; ++k) {
                const int fx = freq(prng), fy = freq(prng);
                const double phase = 2 * pi * u01(prng);
                const double amp = 0.5 + 0.5 * u01(prng);
                for (std::size_t i = 0; i < hw; ++i)
                    for (std::size_t j = 0; j < hw; ++j)
                        proto[ch * plane + i * hw + j] +=
                            amp * std::sin(2 * pi * (fx * double(i) + fy * double(j)) / double(hw) + phase);
            }

    NoisyDataset ds;
    ds.classes = classes;
    ds.tag = "image";
    const std::size_t m = classes * per_class;
    ds.inputs = Tensor(Shape{m, channels, hw, hw});
    Rng nrng(derive_seed(seed, "image.samples"));
    std::normal_distribution<double> noise(0.0, pixel_noise);
    for (std::size_t s = 0; s < m; ++s) {
        const std::size_t c = s % classes;
        double* x = ds.inputs.ptr() + s * channels * plane;
        for (std::size_t k = 0; k < channels * plane; ++k) x[k] = protos[c][k] + noise(nrng);
        ds.clean_labels.push_back(static_cast<int>(c));
    }
    ds.noisy_labels = ds.clean_labels;
    ds.corrupted.assign(m, false);
    return ds;
}

std::vector<std::vector<std::size_t>> split_indices(std::span<const int> labels, std::size_t classes,
                                                    std::span<const double> fractions, std::uint64_t seed)
{
    if (fractions.empty()) throw std::invalid_argument("no split fractions");
    double total = 0.0;
    for (double f : fractions) {
        if (!(f >= 0.0)) throw std::invalid_argument("split fractions must be nonnegative");
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
    check_labels(labels, classes);

    std::vector<std::vector<std::size_t>> parts(fractions.size());
    auto groups = by_class(labels, classes);
    for (std::size_t c = 0; c < classes; ++c) {
        auto& members = groups[c];
        Rng rng(derive_seed(seed, c, 3));
        std::shuffle(members.begin(), members.end(), rng);
        double cum = 0.0;
        std::size_t begin = 0;
        for (std::size_t p = 0; p < fractions.size(); ++p) {
            cum += fractions[p];
            std::size_t end = p + 1 == fractions.size()
                                  ? members.size()
                                  : static_cast<std::size_t>(std::llround(cum * double(members.size())));
            end = std::clamp(end, begin, members.size());
            parts[p].insert(parts[p].end(), members.begin() + begin, members.begin() + end);
            begin = end;
        }
    }
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].empty()) throw std::invalid_argument("split part " + std::to_string(p) + " is empty");
        std::sort(parts[p].begin(), parts[p].end());
    }
    return parts;
}

std::vector<NoisyDataset> split(const NoisyDataset& ds, std::span<const double> fractions, std::uint64_t seed)
{
    std::vector<NoisyDataset> out;
    for (const auto& idx : split_indices(ds.clean_labels, ds.classes, fractions, seed)) out.push_back(ds.subset(idx));
    return out;
}

NoisyDataset load_dataset(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset " + path.string());
    std::size_t m = 0, f = 0, c = 0;
    if (!(in >> m >> f >> c) || m == 0 || f == 0 || c < 2)
        throw std::runtime_error("bad dataset header in " + path.string());
    NoisyDataset ds;
    ds.classes = c;
    ds.tag = path.filename().string();
    ds.inputs = Tensor(Shape{m, f});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < f; ++j)
            if (!(in >> ds.inputs.ptr()[i * f + j]))
                throw std::runtime_error("truncated dataset at sample " + std::to_string(i));
        long y = -1;
        if (!(in >> y) || y < 0 || static_cast<std::size_t>(y) >= c)
            throw std::runtime_error("bad label at sample " + std::to_string(i));
        ds.clean_labels.push_back(static_cast<int>(y));
    }
    ds.noisy_labels = ds.clean_labels;
    ds.corrupted.assign(m, false);
    return ds;
}

void save_dataset(const NoisyDataset& ds, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dataset " + path.string());
    const std::size_t m = ds.size();
    const std::size_t f = m ? ds.inputs.size() / m : 0;
    out << m << ' ' << f << ' ' << ds.classes << '\n';
    out.precision(17);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < f; ++j) out << ds.inputs.ptr()[i * f + j] << ' ';
        out << ds.clean_labels[i] << '\n';
    }
}

} // namespace rdarts
