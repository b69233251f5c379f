#include "rdarts/config.hpp"

#include "rdarts/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace rdarts {

namespace {

using json = nlohmann::json;

template <class E, std::size_t N>
struct EnumNames {
    std::array<std::pair<E, const char*>, N> items;

    const char* name(E e) const
    {
        for (const auto& [k, n] : items)
            if (k == e) return n;
        return "?";
    }
    bool parse(const std::string& s, E& out) const
    {
        for (const auto& [k, n] : items)
            if (s == n) {
                out = k;
                return true;
            }
        return false;
    }
    std::string choices() const
    {
        std::string s;
        for (const auto& [k, n] : items) s += (s.empty() ? "" : ", ") + std::string(n);
        return s;
    }
};

constexpr EnumNames<NoiseKind, 3> kNoiseNames{
    {{{NoiseKind::none, "none"}, {NoiseKind::symmetric, "symmetric"}, {NoiseKind::asymmetric, "asymmetric"}}}};
constexpr EnumNames<Injection, 3> kInjectionNames{
    {{{Injection::none, "none"}, {Injection::learned, "learned"}, {Injection::constant, "constant"}}}};
constexpr EnumNames<MuMode, 2> kMuNames{{{{MuMode::pooled, "pooled"}, {MuMode::zero, "zero"}}}};
constexpr EnumNames<KlAggregate, 2> kAggNames{{{{KlAggregate::mean, "mean"}, {KlAggregate::sum, "sum"}}}};
constexpr EnumNames<ArchOrder, 2> kOrderNames{{{{ArchOrder::first, "first"}, {ArchOrder::second, "second"}}}};
constexpr EnumNames<TapRange::Mode, 3> kTapNames{
    {{{TapRange::Mode::fixed, "fixed"}, {TapRange::Mode::relu, "relu"}, {TapRange::Mode::robust, "robust"}}}};

// Reads fields from a JSON object, rejecting anything it was not asked for.
class Reader {
public:
    Reader(const json& obj, std::string path, const std::string& origin) : obj_(obj), path_(std::move(path)), origin_(origin)
    {
        if (!obj_.is_object()) error(path_.empty() ? "$" : path_, "expected an object");
    }

    template <class F>
    void section(const char* key, F&& body)
    {
        auto* v = take(key);
        if (!v) return;
        Reader sub(*v, join(key), origin_);
        body(sub);
        sub.finish();
    }

    template <class T>
    void field(const char* key, T& target)
    {
        if (auto* v = take(key)) read(*v, join(key), target);
    }

    template <class E, std::size_t N>
    void choice(const char* key, E& target, const EnumNames<E, N>& names)
    {
        auto* v = take(key);
        if (!v) return;
        if (!v->is_string() || !names.parse(v->get<std::string>(), target))
            error(join(key), "expected one of " + names.choices());
    }

    void operators(const char* key, std::vector<OperatorKind>& target)
    {
        auto* v = take(key);
        if (!v) return;
        const auto p = join(key);
        if (v->is_string()) {
            const auto s = v->get<std::string>();
            if (s == "all")
                target.assign(kAllOperators.begin(), kAllOperators.end());
            else if (s == "vanilla")
                target.assign(kVanillaOperators.begin(), kVanillaOperators.end());
            else
                error(p, "expected \"all\", \"vanilla\" or a list of operator names");
            return;
        }
        if (!v->is_array() || v->empty()) error(p, "expected a non-empty list of operator names");
        target.clear();
        std::set<OperatorKind> seen;
        for (std::size_t i = 0; i < v->size(); ++i) {
            const auto ip = p + "[" + std::to_string(i) + "]";
            if (!(*v)[i].is_string()) error(ip, "expected an operator name");
            try {
                const auto k = operator_from_string((*v)[i].get<std::string>());
                if (!seen.insert(k).second) error(ip, "duplicate operator");
                target.push_back(k);
            } catch (const std::invalid_argument& e) {
                error(ip, e.what());
            }
        }
    }

    void finish() const
    {
        for (auto it = obj_.begin(); it != obj_.end(); ++it)
            if (!used_.count(it.key())) error(join(it.key().c_str()), "unknown key");
    }

    [[noreturn]] void error(const std::string& where, const std::string& what) const
    {
        throw ConfigError(origin_ + ": " + where + ": " + what);
    }

private:
    const json* take(const char* key)
    {
        used_.insert(key);
        auto it = obj_.find(key);
        return it == obj_.end() ? nullptr : &*it;
    }

    std::string join(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

    void read(const json& v, const std::string& p, double& t) const
    {
        if (!v.is_number()) error(p, "expected a number");
        t = v.get<double>();
    }
    void read(const json& v, const std::string& p, bool& t) const
    {
        if (!v.is_boolean()) error(p, "expected true or false");
        t = v.get<bool>();
    }
    void read(const json& v, const std::string& p, std::size_t& t) const
    {
        if (!v.is_number_unsigned()) error(p, "expected a non-negative integer");
        t = v.get<std::size_t>();
    }
    void read(const json& v, const std::string& p, std::string& t) const
    {
        if (!v.is_string()) error(p, "expected a string");
        t = v.get<std::string>();
    }
    template <class T>
    void read(const json& v, const std::string& p, std::vector<T>& t) const
    {
        if (!v.is_array()) error(p, "expected a list");
        t.clear();
        for (std::size_t i = 0; i < v.size(); ++i) {
            T x{};
            read(v[i], p + "[" + std::to_string(i) + "]", x);
            t.push_back(std::move(x));
        }
    }
    void read(const json& v, const std::string& p, std::pair<int, int>& t) const
    {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number_integer() || !v[1].is_number_integer())
            error(p, "expected [source, destination]");
        t = {v[0].get<int>(), v[1].get<int>()};
    }

    const json& obj_;
    std::string path_;
    const std::string& origin_;
    std::set<std::string> used_;
};

// Emits every field, producing the canonical resolved document.
class Writer {
public:
    explicit Writer(json& obj) : obj_(obj) { obj_ = json::object(); }

    template <class F>
    void section(const char* key, F&& body)
    {
        Writer sub(obj_[key]);
        body(sub);
    }
    template <class T>
    void field(const char* key, const T& v)
    {
        obj_[key] = to_json(v);
    }
    template <class E, std::size_t N>
    void choice(const char* key, E v, const EnumNames<E, N>& names)
    {
        obj_[key] = names.name(v);
    }
    void operators(const char* key, const std::vector<OperatorKind>& ops)
    {
        json a = json::array();
        for (auto k : ops) a.push_back(std::string(to_string(k)));
        obj_[key] = a;
    }

private:
    template <class T>
    static json to_json(const T& v)
    {
        return json(v);
    }
    template <class T>
    static json to_json(const std::vector<T>& v)
    {
        json a = json::array();
        for (const auto& x : v) a.push_back(to_json(x));
        return a;
    }
    static json to_json(const std::pair<int, int>& v) { return json::array({v.first, v.second}); }

    json& obj_;
};

// Single schema shared by reading and writing.
template <class V, class C>
void visit(V& v, C& c)
{
    std::size_t seed = c.seed;
    v.field("seed", seed);
    c.seed = seed;
    v.field("output", c.output);
    v.section("dataset", [&](V& s) {
        auto& d = c.dataset;
        s.field("kind", d.kind);
        s.field("path", d.path);
        s.field("toy_bits", d.toy_bits);
        s.field("toy_samples", d.toy_samples);
        s.field("image_classes", d.image_classes);
        s.field("image_per_class", d.image_per_class);
        s.field("image_hw", d.image_hw);
        s.field("pixel_noise", d.pixel_noise);
        s.field("train", d.train);
        s.field("val", d.val);
        s.field("test", d.test);
    });
    v.section("noise", [&](V& s) {
        s.choice("kind", c.noise.kind, kNoiseNames);
        s.field("rate", c.noise.rate);
        s.field("mapping", c.noise.mapping);
        s.field("parts", c.noise.parts);
    });
    v.section("model", [&](V& s) {
        s.section("toy", [&](V& t) {
            auto& m = c.model.toy;
            t.field("widths", m.widths);
            t.field("injection_layers", m.inject_layers);
            t.choice("injection", m.injection, kInjectionNames);
            t.field("const_mu", m.const_mu);
            t.field("const_sigma", m.const_sigma);
        });
        s.section("network", [&](V& t) {
            auto& n = c.model.network;
            t.field("init_channels", n.init_channels);
            t.field("cells", n.cells);
            t.field("nodes", n.nodes);
            t.operators("operators", n.candidates);
        });
        s.section("block", [&](V& t) {
            auto& b = c.model.network.block;
            t.field("affine", b.affine);
            t.field("batch_norm", b.batch_norm);
            t.field("injector_reduction", b.injector_reduction);
            t.field("injector_min_hidden", b.injector_min_hidden);
            t.field("injector_sigma_bias", b.injector_sigma_bias);
        });
        s.field("genotype", c.model.genotype);
    });
    v.section("objective", [&](V& s) {
        s.field("beta", c.objective.beta);
        s.choice("mu_mode", c.objective.mu_mode, kMuNames);
        s.choice("kl_aggregate", c.objective.aggregate, kAggNames);
    });
    v.section("optimizer", [&](V& s) {
        s.section("search", [&](V& t) {
            auto& o = c.optimizer.search;
            t.choice("order", o.order, kOrderNames);
            t.field("eta", o.eta);
            t.field("arch_lr", o.arch.lr);
            t.field("arch_beta1", o.arch.beta1);
            t.field("arch_beta2", o.arch.beta2);
            t.field("arch_weight_decay", o.arch.weight_decay);
            t.field("w_lr", o.w_lr);
            t.field("w_lr_min", o.w_lr_min);
            t.field("w_momentum", o.w_momentum);
            t.field("w_weight_decay", o.w_weight_decay);
            t.field("cosine", o.cosine);
            t.field("epochs", o.epochs);
            t.field("batch_size", o.batch_size);
            t.field("fd_scale", o.fd_scale);
        });
        s.section("eval", [&](V& t) {
            auto& o = c.optimizer.eval;
            t.field("w_lr", o.w_lr);
            t.field("w_lr_min", o.w_lr_min);
            t.field("w_momentum", o.w_momentum);
            t.field("w_weight_decay", o.w_weight_decay);
            t.field("cosine", o.cosine);
            t.field("epochs", o.epochs);
            t.field("batch_size", o.batch_size);
        });
        s.section("toy", [&](V& t) {
            auto& o = c.optimizer.toy;
            t.field("epochs", o.epochs);
            t.field("batch_size", o.batch_size);
            t.field("lr", o.lr);
            t.field("lr_min", o.lr_min);
            t.field("cosine", o.cosine);
            t.field("momentum", o.momentum);
            t.field("weight_decay", o.weight_decay);
        });
    });
    v.section("analysis", [&](V& s) {
        auto& a = c.analysis;
        s.field("mi_every", a.mi_every);
        s.field("mi_from", a.mi_from);
        s.field("bins", a.mi.n_bins);
        auto& r = a.mi.ranges.front();
        s.choice("tap_range", r.mode, kTapNames);
        s.field("tap_lo", r.lo);
        s.field("tap_hi", r.hi);
        s.field("with_zx", a.mi.with_zx);
        s.field("input_bins", a.mi.input_bins);
        s.field("gradnorm_every", a.gradnorm_every);
    });
    v.section("ablation", [&](V& s) {
        s.field("sigmas", c.ablation.sigmas);
        s.field("mus", c.ablation.mus);
        s.field("seeds", c.ablation.seeds);
        s.field("injection_layers", c.ablation.inject_layers);
    });
    v.section("histogram", [&](V& s) {
        s.field("genotypes", c.histogram.genotypes);
        s.field("seeds", c.histogram.seeds);
    });
}

void check_values(const ExperimentConfig& c, const Reader& r)
{
    const auto& d = c.dataset;
    if (d.kind != "toy" && d.kind != "image" && d.kind != "file")
        r.error("dataset.kind", "expected one of toy, image, file");
    if (d.kind == "file" && d.path.empty()) r.error("dataset.path", "required when dataset.kind is file");
    for (auto [name, f] : {std::pair{"dataset.train", d.train}, {"dataset.val", d.val}, {"dataset.test", d.test}})
        if (!(f >= 0.0 && f <= 1.0)) r.error(name, "fraction must lie in [0, 1]");
    if (d.train <= 0.0) r.error("dataset.train", "must be positive");
    if (std::abs(d.train + d.val + d.test - 1.0) > 1e-9) r.error("dataset", "train + val + test must equal 1");
    if (!(c.noise.rate >= 0.0 && c.noise.rate <= 1.0)) r.error("noise.rate", "must lie in [0, 1]");
    for (const auto& p : c.noise.parts)
        if (p != "train" && p != "val" && p != "test") r.error("noise.parts", "unknown part '" + p + "'");
    if (c.objective.beta < 0.0) r.error("objective.beta", "must be non-negative");
    if (c.model.network.nodes == 0) r.error("model.network.nodes", "must be positive");
    if (c.model.network.cells == 0) r.error("model.network.cells", "must be positive");
    if (c.model.toy.widths.size() < 2) r.error("model.toy.widths", "needs an input and at least one hidden width");
    if (c.optimizer.search.batch_size == 0) r.error("optimizer.search.batch_size", "must be positive");
    if (c.optimizer.eval.batch_size == 0) r.error("optimizer.eval.batch_size", "must be positive");
    if (c.optimizer.toy.batch_size == 0) r.error("optimizer.toy.batch_size", "must be positive");
    if (c.analysis.mi.n_bins < 2) r.error("analysis.bins", "must be at least 2");
    const auto& t = c.analysis.mi.ranges.front();
    if (t.mode == TapRange::Mode::fixed && !(t.lo < t.hi)) r.error("analysis.tap_lo", "must be below tap_hi");
    for (double s : c.ablation.sigmas)
        if (s < 0.0) r.error("ablation.sigmas", "must be non-negative");
    if (c.ablation.seeds == 0) r.error("ablation.seeds", "must be positive");
    if (c.histogram.seeds == 0) r.error("histogram.seeds", "must be positive");
}

std::string line_col(const std::string& text, std::size_t byte)
{
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return std::to_string(line) + ":" + std::to_string(col);
}

} // namespace

std::string_view to_string(NoiseKind k) { return kNoiseNames.name(k); }
std::string_view to_string(Injection k) { return kInjectionNames.name(k); }

ExperimentConfig parse_config(const std::string& text, const std::string& origin)
{
    json doc;
    try {
        doc = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ":" + line_col(text, e.byte == 0 ? 0 : e.byte - 1) + ": malformed JSON");
    }
    ExperimentConfig cfg;
    Reader r(doc, "", origin);
    visit(r, cfg);
    r.finish();
    check_values(cfg, r);
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string() + ": cannot read");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string());
}

std::string canonical_config(const ExperimentConfig& cfg)
{
    json doc;
    Writer w(doc);
    auto copy = cfg;
    visit(w, copy);
    return doc.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical_config(cfg))));
    return buf;
}

} // namespace rdarts
