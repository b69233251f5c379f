#include "rdarts/search_space.hpp"

#include "rdarts/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rdarts {

std::string_view to_string(CellType t) { return t == CellType::normal ? "normal" : "reduce"; }

std::vector<CellSpec::Edge> CellSpec::edges() const
{
    std::vector<Edge> out;
    out.reserve(edge_count());
    for (std::size_t t = 0; t < n_nodes; ++t)
        for (std::size_t src = 0; src < t + 2; ++src) out.push_back({t, src});
    return out;
}

void Genotype::validate() const
{
    if (normal.nodes.size() != reduce.nodes.size())
        throw std::invalid_argument("normal and reduction cells have different node counts");
    for (const auto* cell : {&normal, &reduce}) {
        if (cell->nodes.empty()) throw std::invalid_argument("genotype cell has no nodes");
        for (std::size_t t = 0; t < cell->nodes.size(); ++t) {
            const auto& [a, b] = cell->nodes[t];
            for (const auto& e : {a, b})
                if (e.src >= t + 2)
                    throw std::invalid_argument("node " + std::to_string(t) + " references source " +
                                                std::to_string(e.src) + " which is not an earlier node");
            if (a.src == b.src)
                throw std::invalid_argument("node " + std::to_string(t) + " repeats source " + std::to_string(a.src));
        }
    }
}

bool is_reduction_cell(std::size_t index, std::size_t cells)
{
    return index == cells / 3 || index == 2 * cells / 3;
}

// --- cell ------------------------------------------------------------------

Cell::Cell(ParamStore& store, const std::string& name, CellType type, std::size_t n_nodes, std::size_t c_pp,
           std::size_t c_p, std::size_t c, bool reduction_prev, const std::vector<OperatorKind>& candidates,
           const CellGenotype* genotype, const BlockOptions& opt)
    : type_(type), n_nodes_(n_nodes)
{
    if (reduction_prev) pre0_ = std::make_unique<FactorizedReduce>(store, name + ".pre0", c_pp, c, opt);
    else pre0_ = std::make_unique<ReluConvBn>(store, name + ".pre0", c_pp, c, 1, 1, 0, opt);
    pre1_ = std::make_unique<ReluConvBn>(store, name + ".pre1", c_p, c, 1, 1, 0, opt);

    const bool reduction = type == CellType::reduce;
    auto add_edge = [&](std::size_t node, std::size_t src, std::vector<OperatorKind> kinds) {
        Edge e{node, src, reduction && src < 2 ? 2u : 1u, {}};
        const std::string ename = name + ".n" + std::to_string(node) + ".s" + std::to_string(src);
        for (auto k : kinds) e.ops.push_back(make_operator(k, store, ename + "." + std::string(to_string(k)), c, e.stride, opt));
        edges_.push_back(std::move(e));
    };

    if (genotype) {
        if (genotype->nodes.size() != n_nodes) throw std::invalid_argument("genotype node count mismatch");
        for (std::size_t t = 0; t < n_nodes; ++t)
            for (const auto& ge : genotype->nodes[t]) add_edge(t, ge.src, {ge.op});
    } else {
        for (const auto& e : CellSpec{n_nodes}.edges()) add_edge(e.node, e.src, candidates);
    }
}

std::size_t Cell::site_count() const
{
    std::size_t n = 0;
    for (const auto& e : edges_)
        for (const auto& op : e.ops)
            if (op->kind() == OperatorKind::sep_nconv_3x3) n += 2;
            else if (op->kind() == OperatorKind::dil_nconv_3x3) n += 1;
    return n;
}

Var Cell::mixed_edge(ForwardContext& ctx, Edge& edge, Var logits, Var x)
{
    if (logits.size() != edge.ops.size())
        throw ShapeError("edge has " + std::to_string(edge.ops.size()) + " candidates but " +
                         std::to_string(logits.size()) + " logits");
    Var w = ops::softmax(logits);
    std::vector<Var> outs;
    std::vector<std::size_t> which;
    for (std::size_t r = 0; r < edge.ops.size(); ++r) {
        if (w.value()[r] == 0.0) continue;
        outs.push_back(edge.ops[r]->forward(ctx, x));
        which.push_back(r);
    }
    return ops::weighted_sum(w, outs, which);
}

Var Cell::forward(ForwardContext& ctx, Var s0, Var s1, Var alpha, const std::vector<std::size_t>* edge_order)
{
    std::vector<Var> states{pre0_->forward(ctx, s0), pre1_->forward(ctx, s1)};
    std::size_t e = 0;
    for (std::size_t t = 0; t < n_nodes_; ++t) {
        std::vector<std::size_t> idx;
        while (e < edges_.size() && edges_[e].node == t) idx.push_back(e++);
        if (edge_order) {
            std::vector<std::size_t> permuted;
            for (auto k : *edge_order)
                if (k < idx.size()) permuted.push_back(idx[k]);
            if (permuted.size() == idx.size()) idx = std::move(permuted);
        }
        Var node;
        for (auto k : idx) {
            Edge& edge = edges_[k];
            Var x = states[edge.src];
            Var y;
            if (alpha.valid()) y = mixed_edge(ctx, edge, ops::row(alpha, k), x);
            else if (edge.ops.size() == 1) y = edge.ops[0]->forward(ctx, x);
            else throw std::logic_error("mixed edge evaluated without architecture logits");
            node = node.valid() ? ops::add(node, y) : y;
        }
        states.push_back(node);
    }
    std::vector<Var> inner(states.begin() + 2, states.end());
    return ops::concat_channels(inner);
}

// --- network ---------------------------------------------------------------

Network::Network(const NetworkConfig& cfg) : cfg_(cfg)
{
    if (cfg.cells == 0 || cfg.nodes == 0) throw std::invalid_argument("network needs at least one cell and node");
    if (cfg.candidates.empty()) throw std::invalid_argument("empty candidate operator set");
}

Network::~Network() = default;

std::unique_ptr<Network> Network::supernet(const NetworkConfig& cfg)
{
    std::unique_ptr<Network> net(new Network(cfg));
    net->build(nullptr);
    return net;
}

std::unique_ptr<Network> Network::discrete(const Genotype& genotype, const NetworkConfig& cfg)
{
    genotype.validate();
    NetworkConfig c = cfg;
    c.nodes = genotype.normal.nodes.size();
    std::unique_ptr<Network> net(new Network(c));
    net->build(&genotype);
    return net;
}

void Network::build(const Genotype* genotype)
{
    const auto& opt = cfg_.block;
    const std::size_t c0 = cfg_.init_channels;
    stem_conv_ = std::make_unique<Conv2d>(params_, "stem.conv", cfg_.in_channels, c0, 3, ops::ConvGeometry{1, 1, 1, 1},
                                          opt.init_seed);
    if (opt.batch_norm) stem_bn_ = std::make_unique<BatchNorm>(params_, "stem.bn", c0, opt.affine);

    std::size_t c_pp = c0, c_p = c0, c = c0;
    bool reduction_prev = false;
    for (std::size_t i = 0; i < cfg_.cells; ++i) {
        const bool reduction = is_reduction_cell(i, cfg_.cells);
        if (reduction) c *= 2;
        const CellType type = reduction ? CellType::reduce : CellType::normal;
        const CellGenotype* cg = genotype ? &genotype->cell(type) : nullptr;
        cells_.push_back(std::make_unique<Cell>(params_, "cell" + std::to_string(i), type, cfg_.nodes, c_pp, c_p, c,
                                                reduction_prev, cfg_.candidates, cg, opt));
        site_count_ += cells_.back()->site_count();
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = cfg_.nodes * c;
    }
    classifier_ = std::make_unique<Linear>(params_, "classifier", c_p, cfg_.classes, Partition::theta, opt.init_seed);

    if (!genotype) {
        const std::size_t edges = CellSpec{cfg_.nodes}.edge_count();
        const std::size_t nu = cfg_.candidates.size();
        auto init_alpha = [&](const std::string& name) {
            Rng rng(derive_seed(opt.init_seed, name));
            std::normal_distribution<double> n(0.0, 1.0);
            Tensor t(Shape{edges, nu});
            for (auto& v : t.data()) v = 1e-3 * n(rng);
            return t;
        };
        alphas_.normal = &params_.add("alpha.normal", Partition::alpha, init_alpha("alpha.normal"));
        alphas_.reduce = &params_.add("alpha.reduce", Partition::alpha, init_alpha("alpha.reduce"));
        alphas_.candidates = cfg_.candidates;
    }
}

const AlphaParams& Network::alphas() const
{
    if (!is_supernet()) throw std::logic_error("discrete network has no architecture parameters");
    return alphas_;
}

std::size_t Network::weight_count() const
{
    return params_.scalar_count(Partition::theta) + params_.scalar_count(Partition::phi);
}

Network::Output Network::forward(ForwardContext& ctx, const Tensor& batch)
{
    if (batch.rank() != 4 || batch.dim(1) != cfg_.in_channels)
        throw ShapeError("network expects [B x " + std::to_string(cfg_.in_channels) + " x H x W], got " +
                         shape_str(batch.shape()));
    Output out;
    auto* saved = ctx.sites;
    ctx.sites = &out.sites;
    Var x = ctx.tape.constant(batch);
    Var s = stem_conv_->forward(ctx, x);
    if (stem_bn_) s = stem_bn_->forward(ctx, s);
    Var s0 = s, s1 = s;
    for (auto& cell : cells_) {
        Var alpha;
        if (is_supernet()) alpha = ctx.tape.param(alphas_.of(cell->type()));
        Var next = cell->forward(ctx, s0, s1, alpha);
        out.cell_outputs.push_back(next);
        s0 = s1;
        s1 = next;
    }
    out.logits = classifier_->forward(ctx, ops::spatial_mean(s1));
    ctx.sites = saved;
    if (saved) saved->insert(saved->end(), out.sites.begin(), out.sites.end());
    return out;
}

// --- discretization --------------------------------------------------------

CellGenotype derive_cell(const Tensor& logits, const std::vector<OperatorKind>& candidates, std::size_t n_nodes)
{
    const auto edges = CellSpec{n_nodes}.edges();
    const std::size_t nu = candidates.size();
    if (logits.rank() != 2 || logits.dim(0) != edges.size() || logits.dim(1) != nu)
        throw ShapeError("alpha shape " + shape_str(logits.shape()) + " does not fit the cell");

    struct Scored {
        std::size_t src;
        OperatorKind op;
        double weight;
    };
    CellGenotype cell;
    std::size_t e = 0;
    for (std::size_t t = 0; t < n_nodes; ++t) {
        std::vector<Scored> cand;
        for (; e < edges.size() && edges[e].node == t; ++e) {
            const double* row = logits.ptr() + e * nu;
            std::size_t best = 0;
            for (std::size_t r = 1; r < nu; ++r)
                if (row[r] > row[best]) best = r;
            double z = 0.0;
            for (std::size_t r = 0; r < nu; ++r) z += std::exp(row[r] - row[best]);
            cand.push_back({edges[e].src, candidates[best], 1.0 / z});
        }
        std::stable_sort(cand.begin(), cand.end(), [](const Scored& a, const Scored& b) { return a.weight > b.weight; });
        std::array<GenotypeEdge, 2> kept{GenotypeEdge{cand[0].op, cand[0].src}, GenotypeEdge{cand[1].op, cand[1].src}};
        if (kept[1].src < kept[0].src) std::swap(kept[0], kept[1]);
        cell.nodes.push_back(kept);
    }
    return cell;
}

Genotype derive_genotype(const AlphaParams& alphas, std::size_t n_nodes, GenotypeMeta meta)
{
    Genotype g;
    g.normal = derive_cell(alphas.normal->value, alphas.candidates, n_nodes);
    g.reduce = derive_cell(alphas.reduce->value, alphas.candidates, n_nodes);
    g.meta = std::move(meta);
    return g;
}

} // namespace rdarts
