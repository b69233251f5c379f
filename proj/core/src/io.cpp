#include "rdarts/io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace rdarts {

namespace {

using ojson = nlohmann::ordered_json;

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text)
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
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

[[noreturn]] void fail(const std::string& origin, const std::string& where, const std::string& what)
{
    throw ParseError(origin + ": " + where + ": " + what);
}

const ojson& field(const ojson& obj, const char* key, const std::string& origin, const std::string& path)
{
    if (!obj.is_object()) fail(origin, path, "expected an object");
    auto it = obj.find(key);
    if (it == obj.end()) fail(origin, path, std::string("missing field '") + key + "'");
    return *it;
}

std::size_t as_index(const ojson& v, const std::string& origin, const std::string& path)
{
    if (!v.is_number_unsigned()) fail(origin, path, "expected a non-negative integer");
    return v.get<std::size_t>();
}

CellGenotype parse_cell(const ojson& nodes, const std::string& origin, const std::string& path)
{
    if (!nodes.is_array()) fail(origin, path, "expected an array of nodes");
    CellGenotype cell;
    for (std::size_t t = 0; t < nodes.size(); ++t) {
        const std::string np = path + "[" + std::to_string(t) + "]";
        const auto& node = nodes[t];
        if (!node.is_array() || node.size() != 2) fail(origin, np, "expected exactly two edges");
        std::array<GenotypeEdge, 2> edges{};
        for (std::size_t k = 0; k < 2; ++k) {
            const std::string ep = np + "[" + std::to_string(k) + "]";
            const auto& e = node[k];
            if (!e.is_array() || e.size() != 2 || !e[0].is_string()) fail(origin, ep, "expected [\"op\", source]");
            try {
                edges[k].op = operator_from_string(e[0].get<std::string>());
            } catch (const std::invalid_argument& ex) {
                fail(origin, ep, ex.what());
            }
            edges[k].src = as_index(e[1], origin, ep + "[1]");
            if (edges[k].src >= t + 2)
                fail(origin, ep, "source " + std::to_string(edges[k].src) + " is not an earlier node of node " +
                                     std::to_string(t));
        }
        if (edges[0].src == edges[1].src) fail(origin, np, "repeated source " + std::to_string(edges[0].src));
        cell.nodes.push_back(edges);
    }
    return cell;
}

std::vector<std::string> split_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string opt_float(bool present, double v) { return present ? format_float(v) : std::string(); }

double parse_float(const std::string& s)
{
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw ParseError("bad number '" + s + "'");
    return v;
}

} // namespace

// --- genotypes ---------------------------------------------------------------

std::string genotype_to_json(const Genotype& g)
{
    g.validate();
    ojson doc;
    doc["cells"] = ojson::array();
    for (auto t : {CellType::normal, CellType::reduce}) {
        ojson cell;
        cell["cell_type"] = std::string(to_string(t));
        cell["nodes"] = ojson::array();
        for (const auto& node : g.cell(t).nodes) {
            ojson n = ojson::array();
            for (const auto& e : node) n.push_back(ojson::array({std::string(to_string(e.op)), e.src}));
            cell["nodes"].push_back(n);
        }
        doc["cells"].push_back(cell);
    }
    doc["meta"] = {{"seed", g.meta.seed}, {"noise", g.meta.noise}, {"epoch", g.meta.epoch}};
    return doc.dump(2) + "\n";
}

Genotype genotype_from_json(const std::string& text, const std::string& origin)
{
    ojson doc;
    try {
        doc = ojson::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        fail(origin, line_col(text, e.byte == 0 ? 0 : e.byte - 1), "malformed JSON");
    }
    Genotype g;
    const auto& cells = field(doc, "cells", origin, "$");
    if (!cells.is_array() || cells.size() != 2) fail(origin, "cells", "expected a normal and a reduce cell");
    bool seen[2] = {false, false};
    for (std::size_t i = 0; i < cells.size(); ++i) {
        const std::string cp = "cells[" + std::to_string(i) + "]";
        const auto& type = field(cells[i], "cell_type", origin, cp);
        if (!type.is_string()) fail(origin, cp + ".cell_type", "expected a string");
        const auto name = type.get<std::string>();
        if (name != "normal" && name != "reduce") fail(origin, cp + ".cell_type", "unknown cell type '" + name + "'");
        const int k = name == "normal" ? 0 : 1;
        if (seen[k]) fail(origin, cp + ".cell_type", "duplicate cell type '" + name + "'");
        seen[k] = true;
        (k == 0 ? g.normal : g.reduce) = parse_cell(field(cells[i], "nodes", origin, cp), origin, cp + ".nodes");
    }
    if (auto it = doc.find("meta"); it != doc.end()) {
        if (!it->is_object()) fail(origin, "meta", "expected an object");
        if (auto s = it->find("seed"); s != it->end()) g.meta.seed = as_index(*s, origin, "meta.seed");
        if (auto s = it->find("epoch"); s != it->end()) g.meta.epoch = as_index(*s, origin, "meta.epoch");
        if (auto s = it->find("noise"); s != it->end()) {
            if (!s->is_string()) fail(origin, "meta.noise", "expected a string");
            g.meta.noise = s->get<std::string>();
        }
    }
    try {
        g.validate();
    } catch (const std::invalid_argument& e) {
        fail(origin, "cells", e.what());
    }
    return g;
}

void export_genotype(const Genotype& g, const std::filesystem::path& path) { write_file(path, genotype_to_json(g)); }

Genotype import_genotype(const std::filesystem::path& path) { return genotype_from_json(read_file(path), path.string()); }

// --- CSV ---------------------------------------------------------------------

std::string format_float(double v)
{
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::size_t CsvTable::column(const std::string& name) const
{
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return i;
    throw std::out_of_range("no column '" + name + "'");
}

void write_csv(const std::filesystem::path& path, const CsvTable& table)
{
    std::string text;
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) text += ',';
            text += cells[i];
        }
        text += '\n';
    };
    line(table.header);
    for (const auto& r : table.rows) {
        if (r.size() != table.header.size()) throw std::invalid_argument("CSV row width does not match header");
        line(r);
    }
    write_file(path, text);
}

CsvTable read_csv(const std::filesystem::path& path)
{
    std::istringstream in(read_file(path));
    CsvTable t;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (n == 1) {
            t.header = split_line(line);
            continue;
        }
        if (line.empty()) continue;
        auto cells = split_line(line);
        if (cells.size() != t.header.size())
            throw ParseError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(t.header.size()) +
                             " fields");
        t.rows.push_back(std::move(cells));
    }
    if (n == 0) throw ParseError(path.string() + ": missing header");
    return t;
}

CsvTable train_table(const std::vector<EpochMetrics>& metrics)
{
    CsvTable t{{"epoch", "split", "lr", "loss", "nll", "kl", "accuracy"}, {}};
    for (const auto& m : metrics) {
        const auto e = std::to_string(m.epoch);
        const auto lr = format_float(m.lr);
        t.rows.push_back({e, "train", lr, format_float(m.train_loss), format_float(m.train_nll),
                          format_float(m.train_kl), format_float(m.train_acc)});
        t.rows.push_back({e, "val", lr, "", "", "", format_float(m.val_acc)});
        t.rows.push_back({e, "val_clean", lr, "", "", "", format_float(m.val_clean_acc)});
    }
    return t;
}

std::vector<EpochMetrics> parse_train_table(const CsvTable& t)
{
    const auto ce = t.column("epoch"), cs = t.column("split"), clr = t.column("lr"), cl = t.column("loss"),
               cn = t.column("nll"), ck = t.column("kl"), ca = t.column("accuracy");
    std::vector<EpochMetrics> out;
    for (const auto& r : t.rows) {
        const auto epoch = static_cast<std::size_t>(std::stoull(r[ce]));
        if (out.empty() || out.back().epoch != epoch) {
            out.emplace_back();
            out.back().epoch = epoch;
            out.back().lr = parse_float(r[clr]);
        }
        auto& m = out.back();
        if (r[cs] == "train") {
            m.train_loss = parse_float(r[cl]);
            m.train_nll = parse_float(r[cn]);
            m.train_kl = parse_float(r[ck]);
            m.train_acc = parse_float(r[ca]);
        } else if (r[cs] == "val") {
            m.val_acc = parse_float(r[ca]);
        } else if (r[cs] == "val_clean") {
            m.val_clean_acc = parse_float(r[ca]);
        } else {
            throw ParseError("unknown split '" + r[cs] + "'");
        }
    }
    return out;
}

CsvTable mi_table(const std::vector<MIRecord>& records)
{
    CsvTable t{{"epoch", "layer", "I_all", "I_clean", "I_noisy", "I_zx"}, {}};
    for (const auto& r : records)
        t.rows.push_back({std::to_string(r.epoch), std::to_string(r.layer), format_float(r.i_all),
                          opt_float(!r.clean_empty, r.i_clean), opt_float(!r.noisy_empty, r.i_noisy),
                          format_float(r.i_zx)});
    return t;
}

std::vector<MIRecord> parse_mi_table(const CsvTable& t)
{
    const auto ce = t.column("epoch"), cl = t.column("layer"), ca = t.column("I_all"), cc = t.column("I_clean"),
               cn = t.column("I_noisy"), cz = t.column("I_zx");
    std::vector<MIRecord> out;
    for (const auto& row : t.rows) {
        MIRecord r;
        r.epoch = static_cast<std::size_t>(std::stoull(row[ce]));
        r.layer = static_cast<std::size_t>(std::stoull(row[cl]));
        r.i_all = parse_float(row[ca]);
        r.clean_empty = row[cc].empty();
        r.noisy_empty = row[cn].empty();
        if (!r.clean_empty) r.i_clean = parse_float(row[cc]);
        if (!r.noisy_empty) r.i_noisy = parse_float(row[cn]);
        r.i_zx = parse_float(row[cz]);
        out.push_back(r);
    }
    return out;
}

CsvTable gradnorm_table(const std::vector<GradNormRecord>& records)
{
    CsvTable t{{"epoch", "clean_mean", "clean_std", "noisy_mean", "noisy_std", "clean_total", "noisy_total", "batch"},
               {}};
    for (const auto& r : records)
        t.rows.push_back({std::to_string(r.epoch), opt_float(r.clean.present, r.clean.mean),
                          opt_float(r.clean.present, r.clean.std), opt_float(r.noisy.present, r.noisy.mean),
                          opt_float(r.noisy.present, r.noisy.std), opt_float(r.clean.present, r.clean.total_norm),
                          opt_float(r.noisy.present, r.noisy.total_norm), format_float(r.batch_norm)});
    return t;
}

CsvTable alpha_table(const std::vector<AlphaSnapshot>& snapshots, const std::vector<OperatorKind>& candidates)
{
    CsvTable t{{"epoch", "cell", "edge", "op", "logit"}, {}};
    for (const auto& s : snapshots)
        for (auto type : {CellType::normal, CellType::reduce}) {
            const Tensor& a = type == CellType::normal ? s.normal : s.reduce;
            if (a.rank() != 2 || a.dim(1) != candidates.size())
                throw std::invalid_argument("alpha snapshot does not match the candidate list");
            for (std::size_t e = 0; e < a.dim(0); ++e)
                for (std::size_t k = 0; k < candidates.size(); ++k)
                    t.rows.push_back({std::to_string(s.epoch), std::string(to_string(type)), std::to_string(e),
                                      std::string(to_string(candidates[k])), format_float(a[e * a.dim(1) + k])});
        }
    return t;
}

} // namespace rdarts
