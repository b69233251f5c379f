// Acceptance runner: one PASS/FAIL line per criterion.

#include "gradcheck.hpp"
#include "oracles.hpp"

#include "rdarts/log.hpp"
#include "rdarts/runner.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using namespace rdarts;
namespace rt = rdarts::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

ExperimentConfig shipped(const std::string& name)
{
    return load_config(fs::path(RDARTS_SOURCE_DIR) / "configs" / name);
}

Outcome gradient_suite()
{
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t checks = 0, failures = 0;
    std::set<std::string> groups;
    for (const auto& c : rt::gradient_cases()) {
        groups.insert(c.group);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const double e = c.run(seed);
            ++checks;
            if (!(e < 1e-4)) ++failures;
            if (!(e <= worst)) {
                worst = e;
                worst_name = c.name;
            }
        }
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << rt::gradient_cases().size() << " operations x 20 instances over " << groups.size()
       << " groups, worst rel err " << fmt("%.2e", worst) << " (" << worst_name << "), " << failures
       << " over 1e-4, " << fmt("%.1f", secs) << " s";
    return {failures == 0 && secs < 60.0, os.str()};
}

Outcome kl_check()
{
    const double mc = rt::kl_monte_carlo_error(20, 1000000, 2024);
    const double at_prior = kl_diag_gaussian(std::vector<double>{0.0}, std::vector<double>{1.0});
    const double at_one = kl_diag_gaussian(std::vector<double>{1.0}, std::vector<double>{1.0});
    std::ostringstream os;
    os << "max |closed form - MC(1e6)| over 20 pairs " << fmt("%.4f", mc) << ", KL(0,1) = " << at_prior
       << ", KL(1,1) = " << at_one;
    return {mc < 0.01 && at_prior == 0.0 && at_one == 0.5, os.str()};
}

Outcome hypergradient_check()
{
    const auto t0 = std::chrono::steady_clock::now();
    double bil = 0.0, unrolled = 0.0;
    std::size_t params = 0;
    for (double eta : {0.01, 0.1}) {
        for (std::uint64_t s = 0; s < 3; ++s) {
            bil = std::max(bil, rt::bilinear_hypergradient_error(eta, false, s));
            bil = std::max(bil, rt::bilinear_hypergradient_error(eta, true, s));
        }
        for (std::uint64_t s = 0; s < 2; ++s) unrolled = std::max(unrolled, rt::unrolled_supernet_error(eta, s, &params));
    }
    const bool eta0 = rt::eta_zero_matches_first_order(0) && rt::eta_zero_matches_first_order(1);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "bilinear max abs err " << fmt("%.2e", bil) << ", unrolled supernet (" << params << " params) rel err "
       << fmt("%.2e", unrolled) << ", eta=0 bitwise " << (eta0 ? "equal" : "different") << ", "
       << fmt("%.1f", secs) << " s";
    return {bil < 1e-8 && unrolled < 1e-3 && params < 200 && eta0 && secs < 120.0, os.str()};
}

Outcome noise_check()
{
    const auto s2 = rt::symmetric_quota_check(0.2, 1);
    const auto s5 = rt::symmetric_quota_check(0.5, 2);
    const auto a4 = rt::asymmetric_quota_check(0.4, 3);
    const auto u = rt::symmetric_uniformity_check(4);
    std::ostringstream os;
    os << "symmetric 0.2 " << (s2.pass ? "exact" : s2.detail) << "; symmetric 0.5 " << (s5.pass ? "exact" : s5.detail)
       << "; asymmetric 0.4 " << (a4.pass ? "exact" : a4.detail) << "; uniformity " << u.detail;
    return {s2.pass && s5.pass && a4.pass && u.pass, os.str()};
}

double last_val_clean(const fs::path& dir)
{
    const auto t = read_csv(dir / "train.csv");
    const auto split = t.column("split"), acc = t.column("accuracy");
    double v = 0.0;
    for (const auto& r : t.rows)
        if (r[split] == "val_clean") v = std::stod(r[acc]);
    return v;
}

Outcome toy_mi_check(const fs::path& out)
{
    const auto t0 = std::chrono::steady_clock::now();
    const auto base = shipped("toy_mi.json");
    const std::size_t layer = base.model.toy.widths.size() - 2;
    const std::size_t epochs = base.optimizer.toy.epochs;
    double mi[2] = {0, 0}, acc[2] = {0, 0};
    for (int inject = 0; inject < 2; ++inject)
        for (std::uint64_t s = 0; s < 3; ++s) {
            auto cfg = base;
            cfg.seed = base.seed + s;
            if (!inject) cfg.model.toy.injection = Injection::none;
            const fs::path dir = out / "toy_mi" / ((inject ? "inject_seed_" : "baseline_seed_") + std::to_string(s));
            run(Subcommand::toy_mi, cfg, dir);
            const auto recs = parse_mi_table(read_csv(dir / "mi.csv"));
            double sum = 0.0;
            std::size_t n = 0;
            for (const auto& r : recs)
                if (r.layer == layer && r.epoch + 100 >= epochs + 1 && !r.noisy_empty) {
                    sum += r.i_noisy;
                    ++n;
                }
            if (n != 100) throw std::runtime_error("expected 100 MI records, found " + std::to_string(n));
            mi[inject] += sum / static_cast<double>(n) / 3.0;
            acc[inject] += last_val_clean(dir) / 3.0;
        }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double gain = 100.0 * (acc[1] - acc[0]);
    std::ostringstream os;
    os << "I(Z_last; Y_noisy) last 100 epochs: injection " << fmt("%.3f", mi[1]) << " vs baseline "
       << fmt("%.3f", mi[0]) << " bits; val accuracy " << fmt("%.4f", acc[1]) << " vs " << fmt("%.4f", acc[0]) << " ("
       << fmt("%+.1f", gain) << " points), " << fmt("%.0f", secs) << " s";
    return {mi[1] < mi[0] && gain >= 5.0 && secs < 900.0, os.str()};
}

Outcome ablation_check(const fs::path& out)
{
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = shipped("ablate_sigma.json");
    cfg.ablation.seeds = 3;
    RunDir dir(out / "ablate_sigma");
    const auto grid = run_ablate_sigma(cfg, dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    bool ordering = true, spread_ok = true;
    std::ostringstream os;
    for (double sigma : {0.2, 0.3})
        for (double mu : cfg.ablation.mus) ordering &= grid.at(sigma, mu).mean() > grid.at(0.0, mu).mean();
    os << "ordering sigma{0.2,0.3} > 0 for every mu: " << (ordering ? "yes" : "no") << "; mu spread (points):";
    for (double sigma : cfg.ablation.sigmas) {
        double lo = 1.0, hi = 0.0;
        for (double mu : cfg.ablation.mus) {
            lo = std::min(lo, grid.at(sigma, mu).mean());
            hi = std::max(hi, grid.at(sigma, mu).mean());
        }
        const double spread = 100.0 * (hi - lo);
        spread_ok &= spread < 3.0;
        os << " sigma " << format_float(sigma) << ": " << fmt("%.1f", spread) << (spread < 3.0 ? "" : " (>= 3)") << ";";
    }
    os << " " << fmt("%.0f", secs) << " s";
    return {ordering && spread_ok && secs < 1800.0, os.str()};
}

Outcome histogram_check(const fs::path& out)
{
    const auto t0 = std::chrono::steady_clock::now();
    double frac[2] = {0, 0};
    const char* names[2] = {"histogram_nconv.json", "histogram_vanilla.json"};
    for (int k = 0; k < 2; ++k) {
        auto cfg = shipped(names[k]);
        cfg.histogram.seeds = 5;
        RunDir dir(out / (k == 0 ? "histogram_nconv" : "histogram_vanilla"));
        frac[k] = run_histogram(cfg, dir).histogram.parameterless_fraction(CellType::normal);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::ostringstream os;
    os << "normal-cell parameterless fraction over 5 seeds: with nconv " << fmt("%.3f", frac[0]) << ", vanilla "
       << fmt("%.3f", frac[1]) << ", " << fmt("%.0f", secs) << " s";
    return {frac[0] <= frac[1] && secs < 3600.0, os.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome determinism_check(const fs::path& out)
{
    const auto cfg = shipped("search_smoke.json");
    run(Subcommand::search, cfg, out / "determinism" / "a");
    run(Subcommand::search, cfg, out / "determinism" / "b");
    std::vector<std::string> differing;
    const std::vector<std::string> files{"genotype.json", "train.csv", "alpha.csv", "mi.csv"};
    for (const auto& f : files) {
        const auto a = slurp(out / "determinism" / "a" / f);
        if (a.empty() || a != slurp(out / "determinism" / "b" / f)) differing.push_back(f);
    }
    std::ostringstream os;
    os << "compared genotype.json, train.csv, alpha.csv, mi.csv: ";
    if (differing.empty()) os << "byte-identical";
    for (const auto& f : differing) os << f << " differs ";
    return {differing.empty(), os.str()};
}

Outcome mi_check()
{
    auto table = [](std::vector<std::vector<int>> counts) {
        std::vector<int> z, y;
        for (std::size_t a = 0; a < counts.size(); ++a)
            for (std::size_t b = 0; b < counts[a].size(); ++b)
                for (int k = 0; k < counts[a][b]; ++k) {
                    z.push_back(static_cast<int>(a));
                    y.push_back(static_cast<int>(b));
                }
        return mutual_information(z, y);
    };
    const double indep = table({{25, 25}, {25, 25}});
    const double ident = table({{50, 0}, {0, 50}});
    const double mixed = table({{40, 10}, {10, 40}});
    const double coarse = rt::coarsening_worst_increase(100, 99);
    const bool ok = std::abs(indep) < 1e-6 && std::abs(ident - 1.0) < 1e-6 && std::abs(mixed - 0.278072) < 1e-6 &&
                    coarse <= 1e-12;
    std::ostringstream os;
    os << "independent " << fmt("%.2e", indep) << ", identity " << fmt("%.9f", ident) << ", 2x2 table "
       << fmt("%.7f", mixed) << " bits; worst MI change on merging bins over 100 datasets " << fmt("%+.3e", coarse);
    return {ok, os.str()};
}

Outcome reproducibility_note()
{
    return {true, "informational: large-benchmark accuracies and test regrets are out of desk scale and not "
                  "reproduced; criteria 5-7 cover the same claims as property checks"};
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance checks"};
    std::string out = "acceptance_runs";
    std::vector<int> only;
    app.add_option("--out", out, "Directory for run artifacts");
    app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    set_log_level(LogLevel::warn);
    fs::create_directories(out);

    const std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria{
        {1, {"gradient oracles", gradient_suite}},
        {2, {"KL correctness", kl_check}},
        {3, {"hypergradient equivalence", hypergradient_check}},
        {4, {"noise-model exactness", noise_check}},
        {5, {"toy MI", [&] { return toy_mi_check(out); }}},
        {6, {"sigma ablation", [&] { return ablation_check(out); }}},
        {7, {"search-under-noise histogram", [&] { return histogram_check(out); }}},
        {8, {"determinism", [&] { return determinism_check(out); }}},
        {9, {"MI estimator", mi_check}},
        {10, {"non-reproducibility note", reproducibility_note}},
    };

    int failed = 0;
    for (const auto& [id, c] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = c.second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, c.first.c_str(), o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
