#include "rdarts/runner.hpp"

#include "rdarts/log.hpp"
#include "rdarts/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <numeric>

#ifndef RDARTS_VERSION
#define RDARTS_VERSION "0.0.0"
#endif

namespace rdarts {

std::string_view version() { return RDARTS_VERSION; }

namespace {

std::string utc_now()
{
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

NoisyDataset load_base(const ExperimentConfig& cfg)
{
    const auto& d = cfg.dataset;
    if (d.kind == "toy") return generate_toy_dataset(d.toy_bits, d.toy_samples, cfg.seed);
    if (d.kind == "image") return generate_image_dataset(d.image_classes, d.image_per_class, d.image_hw, cfg.seed, d.pixel_noise);
    return load_dataset(d.path);
}

// Flat file features become [M x 3 x s x s] images when the width allows it.
NoisyDataset as_images(NoisyDataset ds)
{
    if (ds.size() == 0 || ds.inputs.rank() == 4) return ds;
    const std::size_t f = ds.inputs.dim(1);
    const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(f) / 3.0)));
    if (3 * s * s != f)
        throw std::invalid_argument("dataset features (" + std::to_string(f) + ") are not a 3 x s x s image");
    ds.inputs = ds.inputs.reshaped(Shape{ds.size(), 3, s, s});
    return ds;
}

NoisyDataset as_vectors(NoisyDataset ds)
{
    if (ds.size() == 0 || ds.inputs.rank() == 2) return ds;
    ds.inputs = ds.inputs.reshaped(Shape{ds.size(), ds.inputs.size() / ds.size()});
    return ds;
}

NoiseSpec noise_for(const ExperimentConfig& cfg, std::size_t part)
{
    return NoiseSpec{cfg.noise.kind, cfg.noise.rate, cfg.noise.mapping, derive_seed(cfg.seed, "noise", part)};
}

NoisyDataset concat(const NoisyDataset& a, const NoisyDataset& b)
{
    if (b.size() == 0) return a;
    NoisyDataset out = a;
    auto shape = a.inputs.shape();
    shape[0] = a.size() + b.size();
    Tensor x(shape, 0.0);
    std::copy(a.inputs.data().begin(), a.inputs.data().end(), x.data().begin());
    std::copy(b.inputs.data().begin(), b.inputs.data().end(), x.data().begin() + static_cast<std::ptrdiff_t>(a.inputs.size()));
    out.inputs = std::move(x);
    out.clean_labels.insert(out.clean_labels.end(), b.clean_labels.begin(), b.clean_labels.end());
    out.noisy_labels.insert(out.noisy_labels.end(), b.noisy_labels.begin(), b.noisy_labels.end());
    out.corrupted.insert(out.corrupted.end(), b.corrupted.begin(), b.corrupted.end());
    return out;
}

NetworkConfig network_for(const ExperimentConfig& cfg, const NoisyDataset& ds)
{
    NetworkConfig n = cfg.model.network;
    n.in_channels = ds.inputs.dim(1);
    n.classes = ds.classes;
    n.block.init_seed = cfg.seed;
    return n;
}

ToyMlpConfig toy_for(const ExperimentConfig& cfg, const NoisyDataset& ds)
{
    ToyMlpConfig t = cfg.model.toy;
    t.widths.front() = ds.inputs.dim(1);
    t.classes = ds.classes;
    t.block = cfg.model.network.block;
    t.block.init_seed = cfg.seed;
    return t;
}

ToyTrainConfig toy_train_for(const ExperimentConfig& cfg)
{
    ToyTrainConfig t = cfg.optimizer.toy;
    t.loss = cfg.objective;
    t.seed = cfg.seed;
    t.mi_every = cfg.analysis.mi_every;
    t.mi_from = cfg.analysis.mi_from;
    t.mi = cfg.analysis.mi;
    t.gradnorm_every = cfg.analysis.gradnorm_every;
    return t;
}

std::string sigma_mu_key(double sigma, double mu)
{
    return "acc[sigma=" + format_float(sigma) + ",mu=" + format_float(mu) + "]";
}

} // namespace

std::string manifest_to_json(const RunManifest& m)
{
    nlohmann::ordered_json j;
    j["subcommand"] = m.subcommand;
    j["seed"] = m.seed;
    j["config_hash"] = m.config_hash;
    j["tool_version"] = m.tool_version;
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["files"] = m.files;
    j["summary"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m.summary) j["summary"][k] = std::isfinite(v) ? nlohmann::ordered_json(v) : nullptr;
    return j.dump(2) + "\n";
}

// --- run directory -------------------------------------------------------------

RunDir::RunDir(std::filesystem::path root) : root_(std::move(root)) { std::filesystem::create_directories(root_); }

void RunDir::csv(const std::string& name, const CsvTable& table)
{
    write_csv(path(name), table);
    adopt(name);
}

void RunDir::text(const std::string& name, const std::string& content)
{
    const auto p = path(name);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + p.string());
    adopt(name);
}

void RunDir::genotype(const std::string& name, const Genotype& g)
{
    export_genotype(g, path(name));
    adopt(name);
}

void RunDir::adopt(const std::string& name)
{
    if (std::find(files_.begin(), files_.end(), name) == files_.end()) files_.push_back(name);
}

// --- data --------------------------------------------------------------------

DataParts prepare_data(const ExperimentConfig& cfg)
{
    const NoisyDataset base = load_base(cfg);
    const auto& d = cfg.dataset;
    std::vector<double> fractions;
    std::vector<int> slot; // 0 train, 1 val, 2 test
    for (auto [f, s] : {std::pair{d.train, 0}, {d.val, 1}, {d.test, 2}})
        if (f > 0.0) {
            fractions.push_back(f);
            slot.push_back(s);
        }
    auto parts = split(base, fractions, cfg.seed);
    DataParts out;
    static const char* names[3] = {"train", "val", "test"};
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const int s = slot[i];
        const bool noisy = std::find(cfg.noise.parts.begin(), cfg.noise.parts.end(), names[s]) != cfg.noise.parts.end();
        if (noisy && cfg.noise.kind != NoiseKind::none) apply_noise(parts[i], noise_for(cfg, static_cast<std::size_t>(s)));
        parts[i].tag = names[s];
        (s == 0 ? out.train : s == 1 ? out.val : out.test) = std::move(parts[i]);
    }
    return out;
}

// --- subcommands -----------------------------------------------------------------

SearchRun run_search(const ExperimentConfig& cfg, RunDir& dir)
{
    DataParts data = prepare_data(cfg);
    data.train = as_images(std::move(data.train));
    data.val = as_images(std::move(data.val));
    if (data.val.size() == 0) throw std::invalid_argument("search needs a validation part (dataset.val > 0)");

    auto net = Network::supernet(network_for(cfg, data.train));
    SearchConfig sc = cfg.optimizer.search;
    sc.loss = cfg.objective;
    sc.seed = cfg.seed;

    SearchRun run;
    const auto& a = cfg.analysis;
    run.result = search_phase(*net, data.train, data.val, sc, [&](const EpochMetrics& m) {
        log_info("search epoch " + std::to_string(m.epoch) + " loss " + format_float(m.train_loss) + " val " +
                 format_float(m.val_clean_acc));
        if (a.mi_every && m.epoch > a.mi_from && m.epoch % a.mi_every == 0) {
            auto recs = mi_trajectory(network_taps(*net), data.val, m.epoch, a.mi);
            run.mi.insert(run.mi.end(), recs.begin(), recs.end());
        }
    });
    run.result.genotype.meta.noise = noise_for(cfg, 0).describe();

    dir.genotype("genotype.json", run.result.genotype);
    dir.csv("train.csv", train_table(run.result.metrics));
    dir.csv("alpha.csv", alpha_table(run.result.alphas, net->alphas().candidates));
    dir.csv("mi.csv", mi_table(run.mi));
    return run;
}

EvaluateRun run_evaluate(const ExperimentConfig& cfg, RunDir& dir)
{
    if (cfg.model.genotype.empty()) throw std::invalid_argument("evaluate needs model.genotype");
    const Genotype g = import_genotype(cfg.model.genotype);
    DataParts data = prepare_data(cfg);
    NoisyDataset test = data.test.size() ? data.test : data.val;
    NoisyDataset trn = data.test.size() ? concat(data.train, data.val) : data.train;
    if (test.size() == 0) throw std::invalid_argument("evaluate needs a val or test part");
    trn = as_images(std::move(trn));
    test = as_images(std::move(test));

    EvalConfig ec = cfg.optimizer.eval;
    ec.network = network_for(cfg, trn);
    ec.loss = cfg.objective;
    ec.seed = cfg.seed;
    auto res = evaluation_phase(g, trn, test, ec, [](const EpochMetrics& m) {
        log_info("evaluate epoch " + std::to_string(m.epoch) + " loss " + format_float(m.train_loss));
    });

    EvaluateRun run;
    run.metrics = res.metrics;
    run.test_acc = res.final_test_acc;
    run.weight_count = res.network->weight_count();
    dir.genotype("genotype.json", g);
    dir.csv("train.csv", train_table(run.metrics));
    return run;
}

ToyRunResult run_toy_mi(const ExperimentConfig& cfg, RunDir& dir)
{
    DataParts data = prepare_data(cfg);
    data.train = as_vectors(std::move(data.train));
    data.val = as_vectors(std::move(data.val));
    if (data.val.size() == 0) throw std::invalid_argument("toy-mi needs a validation part (dataset.val > 0)");

    ToyMlp net(toy_for(cfg, data.train));
    auto res = train_toy(net, data.train, data.val, toy_train_for(cfg), [](const EpochMetrics& m) {
        if (m.epoch % 50 == 0)
            log_info("toy epoch " + std::to_string(m.epoch) + " loss " + format_float(m.train_loss) + " val " +
                     format_float(m.val_clean_acc));
    });
    dir.csv("train.csv", train_table(res.metrics));
    dir.csv("mi.csv", mi_table(res.mi));
    if (cfg.analysis.gradnorm_every) dir.csv("gradnorm.csv", gradnorm_table(res.gradnorm));
    return res;
}

double AblationCell::mean() const
{
    if (accuracy.empty()) return 0.0;
    return std::accumulate(accuracy.begin(), accuracy.end(), 0.0) / static_cast<double>(accuracy.size());
}

const AblationCell& AblationRun::at(double sigma, double mu) const
{
    for (const auto& c : cells)
        if (c.sigma == sigma && c.mu == mu) return c;
    throw std::out_of_range("no ablation cell at sigma " + format_float(sigma) + ", mu " + format_float(mu));
}

AblationRun run_ablate_sigma(const ExperimentConfig& cfg, RunDir& dir)
{
    AblationRun run;
    CsvTable rows{{"sigma", "mu", "seed", "val_clean_acc"}, {}};
    for (double sigma : cfg.ablation.sigmas)
        for (double mu : cfg.ablation.mus) run.cells.push_back({sigma, mu, {}});

    for (std::size_t k = 0; k < cfg.ablation.seeds; ++k) {
        ExperimentConfig c = cfg;
        c.seed = cfg.seed + k;
        c.model.toy.injection = Injection::constant;
        c.model.toy.inject_layers = cfg.ablation.inject_layers;
        c.analysis.mi_every = 0;
        c.analysis.gradnorm_every = 0;
        DataParts data = prepare_data(c);
        data.train = as_vectors(std::move(data.train));
        data.val = as_vectors(std::move(data.val));
        if (data.val.size() == 0) throw std::invalid_argument("ablate-sigma needs a validation part (dataset.val > 0)");
        for (auto& cell : run.cells) {
            c.model.toy.const_sigma = cell.sigma;
            c.model.toy.const_mu = cell.mu;
            ToyMlp net(toy_for(c, data.train));
            auto res = train_toy(net, data.train, data.val, toy_train_for(c));
            cell.accuracy.push_back(res.final_val_acc);
            rows.rows.push_back({format_float(cell.sigma), format_float(cell.mu), std::to_string(c.seed),
                                 format_float(res.final_val_acc)});
            log_info("ablate sigma " + format_float(cell.sigma) + " mu " + format_float(cell.mu) + " seed " +
                     std::to_string(c.seed) + " acc " + format_float(res.final_val_acc));
        }
    }
    dir.csv("ablation.csv", rows);
    return run;
}

HistogramRun run_histogram(const ExperimentConfig& cfg, RunDir& dir)
{
    HistogramRun run;
    if (!cfg.histogram.genotypes.empty()) {
        for (const auto& p : cfg.histogram.genotypes) run.genotypes.push_back(import_genotype(p));
    } else {
        for (std::size_t k = 0; k < cfg.histogram.seeds; ++k) {
            ExperimentConfig c = cfg;
            c.seed = cfg.seed + k;
            const std::string sub = "seed_" + std::to_string(c.seed);
            RunDir child(dir.path(sub));
            run.genotypes.push_back(run_search(c, child).result.genotype);
            for (const auto& f : child.files()) dir.adopt(sub + "/" + f);
        }
    }
    run.histogram = op_histogram(run.genotypes);

    CsvTable counts{{"cell", "op", "count", "fraction"}, {}};
    CsvTable summary{{"cell", "runs", "edges", "parameterless_fraction"}, {}};
    for (auto t : {CellType::normal, CellType::reduce}) {
        const auto total = run.histogram.total(t);
        for (auto k : kAllOperators) {
            const auto n = run.histogram.count(t, k);
            counts.rows.push_back({std::string(to_string(t)), std::string(to_string(k)), std::to_string(n),
                                   format_float(total ? static_cast<double>(n) / static_cast<double>(total) : 0.0)});
        }
        summary.rows.push_back({std::string(to_string(t)), std::to_string(run.histogram.runs), std::to_string(total),
                                format_float(run.histogram.parameterless_fraction(t))});
    }
    dir.csv("histogram.csv", counts);
    dir.csv("histogram_summary.csv", summary);
    return run;
}

// --- dispatch -------------------------------------------------------------------

std::string_view to_string(Subcommand s)
{
    switch (s) {
    case Subcommand::search: return "search";
    case Subcommand::evaluate: return "evaluate";
    case Subcommand::toy_mi: return "toy-mi";
    case Subcommand::ablate_sigma: return "ablate-sigma";
    case Subcommand::histogram: return "histogram";
    }
    return "?";
}

Subcommand subcommand_from_string(std::string_view name)
{
    for (auto s : {Subcommand::search, Subcommand::evaluate, Subcommand::toy_mi, Subcommand::ablate_sigma,
                   Subcommand::histogram})
        if (to_string(s) == name) return s;
    throw std::invalid_argument("unknown subcommand: " + std::string(name));
}

RunManifest run(Subcommand sub, const ExperimentConfig& cfg, const std::filesystem::path& out)
{
    RunManifest m;
    m.subcommand = std::string(to_string(sub));
    m.seed = cfg.seed;
    m.config_hash = config_hash(cfg);
    m.tool_version = std::string(version());
    m.started = utc_now();

    RunDir dir(out);
    dir.text("config.json", canonical_config(cfg));
    switch (sub) {
    case Subcommand::search: {
        auto r = run_search(cfg, dir);
        if (!r.result.metrics.empty()) m.summary["final_val_clean_acc"] = r.result.metrics.back().val_clean_acc;
        m.summary["hvp_skipped"] = static_cast<double>(r.result.hvp_skipped);
        break;
    }
    case Subcommand::evaluate: m.summary["test_acc"] = run_evaluate(cfg, dir).test_acc; break;
    case Subcommand::toy_mi: {
        auto r = run_toy_mi(cfg, dir);
        m.summary["final_val_clean_acc"] = r.final_val_acc;
        break;
    }
    case Subcommand::ablate_sigma: {
        auto r = run_ablate_sigma(cfg, dir);
        for (const auto& c : r.cells) m.summary[sigma_mu_key(c.sigma, c.mu)] = c.mean();
        break;
    }
    case Subcommand::histogram: {
        auto r = run_histogram(cfg, dir);
        m.summary["parameterless_fraction_normal"] = r.histogram.parameterless_fraction(CellType::normal);
        m.summary["parameterless_fraction_reduce"] = r.histogram.parameterless_fraction(CellType::reduce);
        break;
    }
    }
    m.finished = utc_now();
    m.files = dir.files();
    m.files.push_back("manifest.json");
    dir.text("manifest.json", manifest_to_json(m));
    return m;
}

} // namespace rdarts
