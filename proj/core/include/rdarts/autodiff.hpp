#pragma once

#include "rdarts/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace rdarts {

/// Which optimizer owns a trainable value: network weights, noise-injection
/// weights, or architecture logits.
enum class Partition { theta, phi, alpha };

const char* partition_name(Partition p);

struct Parameter {
    std::string name;
    Partition partition;
    Tensor value;
};

/// Named trainable tensors. Every parameter belongs to exactly one partition.
/// Addresses are stable for the lifetime of the store.
class ParamStore {
public:
    ParamStore() = default;
    ParamStore(const ParamStore&) = delete;
    ParamStore& operator=(const ParamStore&) = delete;
    ParamStore(ParamStore&&) = default;
    ParamStore& operator=(ParamStore&&) = default;

    Parameter& add(std::string name, Partition partition, Tensor init);

    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    Parameter& at(const std::string& name);

    std::vector<Parameter*> in(Partition p);
    std::vector<const Parameter*> in(Partition p) const;
    std::vector<Parameter*> in(std::initializer_list<Partition> ps);

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count(Partition p) const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::deque<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Snapshot of parameter values, restorable bit-for-bit.
std::vector<Tensor> snapshot(std::span<Parameter* const> params);
void restore(std::span<Parameter* const> params, const std::vector<Tensor>& values);

class Tape;

/// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

struct BackwardArgs {
    const Tensor& out_value;
    const Tensor& out_grad;
    std::span<const Tensor* const> in_values;
    /// Null where the corresponding input does not need a gradient.
    std::span<Tensor* const> in_grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Records one forward pass. Gradients of leaves accumulate across calls to
/// backward() until zero_grad(); intermediate adjoints are per call. Values
/// stay at stable addresses while the tape grows.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value);
    /// Leaf bound to a parameter; repeated calls return the same node.
    Var param(const Parameter& p);

    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

    void backward(Var loss);
    void backward(Var out, const Tensor& seed);

    bool on_tape(const Parameter& p) const;
    /// Throws if the parameter was never placed on this tape.
    const Tensor& grad(const Parameter& p) const;
    /// Zero tensor for parameters absent from the tape.
    Tensor grad_or_zero(const Parameter& p) const;
    const Tensor& grad(Var leaf) const;

    void zero_grad();

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool needs_grad = false;
        bool is_leaf = false;
    };

    std::deque<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
    std::unordered_map<std::size_t, Tensor> leaf_grads_;
};

} // namespace rdarts
