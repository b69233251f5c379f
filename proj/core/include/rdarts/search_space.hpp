#pragma once

#include "rdarts/operators.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace rdarts {

enum class CellType { normal, reduce };
std::string_view to_string(CellType t);

/// DAG of one cell: two inputs (nodes 0 and 1) followed by `n_nodes`
/// intermediate nodes; intermediate node t reads from every earlier node.
struct CellSpec {
    std::size_t n_nodes = 4;

    struct Edge {
        std::size_t node; ///< intermediate node index, 0-based
        std::size_t src;  ///< 0,1 = cell inputs; 2 + t = intermediate node t
    };

    /// Edges grouped by destination node, sources ascending.
    std::vector<Edge> edges() const;
    std::size_t edge_count() const { return n_nodes * (n_nodes + 3) / 2; }
};

struct GenotypeEdge {
    OperatorKind op;
    std::size_t src;
    friend bool operator==(const GenotypeEdge&, const GenotypeEdge&) = default;
};

struct CellGenotype {
    /// Two retained incoming edges per intermediate node.
    std::vector<std::array<GenotypeEdge, 2>> nodes;
    friend bool operator==(const CellGenotype&, const CellGenotype&) = default;
};

struct GenotypeMeta {
    std::uint64_t seed = 0;
    std::string noise = "none";
    std::size_t epoch = 0;
    friend bool operator==(const GenotypeMeta&, const GenotypeMeta&) = default;
};

struct Genotype {
    CellGenotype normal;
    CellGenotype reduce;
    GenotypeMeta meta;

    const CellGenotype& cell(CellType t) const { return t == CellType::normal ? normal : reduce; }
    /// Throws std::invalid_argument on out-of-range or repeated sources.
    void validate() const;
    friend bool operator==(const Genotype&, const Genotype&) = default;
};

struct NetworkConfig {
    std::size_t in_channels = 3;
    std::size_t classes = 4;
    std::size_t init_channels = 8;
    std::size_t cells = 4;
    std::size_t nodes = 2;
    std::vector<OperatorKind> candidates{kAllOperators.begin(), kAllOperators.end()};
    BlockOptions block{};
};

/// Cell positions that halve resolution and double width.
bool is_reduction_cell(std::size_t index, std::size_t cells);

/// Architecture logits: one [edges x candidates] matrix per cell type.
struct AlphaParams {
    Parameter* normal = nullptr;
    Parameter* reduce = nullptr;
    std::vector<OperatorKind> candidates;

    Parameter& of(CellType t) const { return t == CellType::normal ? *normal : *reduce; }
};

class Cell;

/// Stem -> stacked cells -> global average pool -> linear classifier. Either a
/// supernet (every edge mixes all candidates through alpha) or a discrete
/// network built from a genotype.
class Network {
public:
    static std::unique_ptr<Network> supernet(const NetworkConfig& cfg);
    static std::unique_ptr<Network> discrete(const Genotype& genotype, const NetworkConfig& cfg);
    ~Network();
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    struct Output {
        Var logits;
        std::vector<SiteStats> sites;
        std::vector<Var> cell_outputs;
    };

    /// batch: [B x in_channels x H x W].
    Output forward(ForwardContext& ctx, const Tensor& batch);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    bool is_supernet() const { return alphas_.normal != nullptr; }
    const AlphaParams& alphas() const;
    const NetworkConfig& config() const { return cfg_; }
    std::size_t cell_count() const { return cells_.size(); }
    /// Number of noise-injection sites a forward pass reports.
    std::size_t site_count() const { return site_count_; }
    /// Trainable scalar count in theta and phi.
    std::size_t weight_count() const;

private:
    explicit Network(const NetworkConfig& cfg);
    void build(const Genotype* genotype);

    NetworkConfig cfg_;
    ParamStore params_;
    AlphaParams alphas_;
    std::unique_ptr<Conv2d> stem_conv_;
    std::unique_ptr<BatchNorm> stem_bn_;
    std::vector<std::unique_ptr<Cell>> cells_;
    std::unique_ptr<Linear> classifier_;
    std::size_t site_count_ = 0;
};

/// Cell DAG evaluation. Public for direct testing of node sums.
class Cell {
public:
    struct Edge {
        std::size_t node;
        std::size_t src;
        std::size_t stride;
        std::vector<std::unique_ptr<Operator>> ops;
    };

    Cell(ParamStore& store, const std::string& name, CellType type, std::size_t n_nodes, std::size_t c_pp,
         std::size_t c_p, std::size_t c, bool reduction_prev, const std::vector<OperatorKind>& candidates,
         const CellGenotype* genotype, const BlockOptions& opt);

    /// `alpha` is the [edges x candidates] logit matrix for a mixed cell and
    /// must be invalid for a discrete one. `edge_order`, when given, permutes
    /// the order in which each node's incoming edges are summed.
    Var forward(ForwardContext& ctx, Var s0, Var s1, Var alpha,
                const std::vector<std::size_t>* edge_order = nullptr);

    CellType type() const { return type_; }
    std::size_t n_nodes() const { return n_nodes_; }
    std::vector<Edge>& edges() { return edges_; }
    std::size_t site_count() const;

    /// Mixed-edge evaluation: softmax(logits)-weighted sum of every candidate.
    /// Candidates whose weight is exactly zero are not evaluated.
    static Var mixed_edge(ForwardContext& ctx, Edge& edge, Var logits, Var x);

private:
    CellType type_;
    std::size_t n_nodes_;
    std::unique_ptr<Module> pre0_;
    std::unique_ptr<Module> pre1_;
    std::vector<Edge> edges_;
};

/// Argmax operator per edge (ties to the lowest candidate index), then the two
/// incoming edges with the largest winning softmax weight per node (ties to the
/// lower source). Retained edges are stored in ascending source order.
CellGenotype derive_cell(const Tensor& logits, const std::vector<OperatorKind>& candidates, std::size_t n_nodes);
Genotype derive_genotype(const AlphaParams& alphas, std::size_t n_nodes, GenotypeMeta meta = {});

} // namespace rdarts
