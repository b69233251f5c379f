#include "rdarts/autodiff.hpp"

#include <stdexcept>

namespace rdarts {

const char* partition_name(Partition p)
{
    switch (p) {
    case Partition::theta: return "theta";
    case Partition::phi: return "phi";
    case Partition::alpha: return "alpha";
    }
    return "?";
}

Parameter& ParamStore::add(std::string name, Partition partition, Tensor init)
{
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    params_.push_back(Parameter{std::move(name), partition, std::move(init)});
    return params_.back();
}

Parameter* ParamStore::find(const std::string& name)
{
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParamStore::find(const std::string& name) const
{
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

Parameter& ParamStore::at(const std::string& name)
{
    auto* p = find(name);
    if (!p) throw std::out_of_range("unknown parameter: " + name);
    return *p;
}

std::vector<Parameter*> ParamStore::in(Partition p)
{
    std::vector<Parameter*> out;
    for (auto& q : params_)
        if (q.partition == p) out.push_back(&q);
    return out;
}

std::vector<const Parameter*> ParamStore::in(Partition p) const
{
    std::vector<const Parameter*> out;
    for (auto& q : params_)
        if (q.partition == p) out.push_back(&q);
    return out;
}

std::vector<Parameter*> ParamStore::in(std::initializer_list<Partition> ps)
{
    std::vector<Parameter*> out;
    for (auto& q : params_)
        for (auto p : ps)
            if (q.partition == p) out.push_back(&q);
    return out;
}

std::size_t ParamStore::scalar_count(Partition p) const
{
    std::size_t n = 0;
    for (auto& q : params_)
        if (q.partition == p) n += q.value.size();
    return n;
}

std::vector<Tensor> snapshot(std::span<Parameter* const> params)
{
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (auto* p : params) out.push_back(p->value);
    return out;
}

void restore(std::span<Parameter* const> params, const std::vector<Tensor>& values)
{
    if (values.size() != params.size()) throw std::invalid_argument("snapshot size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value)
{
    nodes_.push_back(Node{std::move(value), {}, {}, false, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value)
{
    nodes_.push_back(Node{std::move(value), {}, {}, true, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(const Parameter& p)
{
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var(this, it->second);
    Var v = leaf(p.value);
    param_nodes_.emplace(&p, v.id());
    return v;
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward)
{
    Node n;
    n.value = std::move(value);
    n.backward = std::move(backward);
    n.inputs.reserve(inputs.size());
    for (const auto& v : inputs) {
        if (&v.tape() != this) throw std::invalid_argument("operand recorded on a different tape");
        n.inputs.push_back(v.id());
        n.needs_grad = n.needs_grad || nodes_[v.id()].needs_grad;
    }
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

void Tape::backward(Var loss)
{
    if (loss.size() != 1)
        throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    backward(loss, Tensor(loss.shape(), 1.0));
}

void Tape::backward(Var out, const Tensor& seed)
{
    if (&out.tape() != this) throw std::invalid_argument("output recorded on a different tape");
    if (seed.shape() != out.shape()) throw ShapeError("seed shape does not match output");

    std::vector<Tensor> adj(out.id() + 1);
    adj[out.id()] = seed;

    std::vector<const Tensor*> in_values;
    std::vector<Tensor*> in_grads;
    for (std::size_t i = out.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (adj[i].empty() || !node.needs_grad) continue;
        if (node.is_leaf) {
            auto [it, fresh] = leaf_grads_.try_emplace(i, adj[i]);
            if (!fresh) {
                auto dst = it->second.data();
                auto src = adj[i].data();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
            continue;
        }
        in_values.clear();
        in_grads.clear();
        for (auto j : node.inputs) {
            in_values.push_back(&nodes_[j].value);
            if (nodes_[j].needs_grad) {
                if (adj[j].empty()) adj[j] = Tensor(nodes_[j].value.shape(), 0.0);
                in_grads.push_back(&adj[j]);
            } else {
                in_grads.push_back(nullptr);
            }
        }
        node.backward(BackwardArgs{node.value, adj[i], in_values, in_grads});
        adj[i] = Tensor();
    }
}

bool Tape::on_tape(const Parameter& p) const { return param_nodes_.count(&p) != 0; }

const Tensor& Tape::grad(const Parameter& p) const
{
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) throw std::invalid_argument("parameter not on tape: " + p.name);
    return grad(Var(const_cast<Tape*>(this), it->second));
}

Tensor Tape::grad_or_zero(const Parameter& p) const
{
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) return Tensor(p.value.shape(), 0.0);
    return grad(Var(const_cast<Tape*>(this), it->second));
}

const Tensor& Tape::grad(Var leaf) const
{
    auto it = leaf_grads_.find(leaf.id());
    if (it != leaf_grads_.end()) return it->second;
    // Leaves that were never reached carry a zero gradient; cache it so the
    // returned reference stays valid.
    auto& self = const_cast<Tape&>(*this);
    return self.leaf_grads_.emplace(leaf.id(), Tensor(nodes_[leaf.id()].value.shape(), 0.0))
        .first->second;
}

void Tape::zero_grad() { leaf_grads_.clear(); }

} // namespace rdarts
