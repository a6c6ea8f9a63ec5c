#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// A Tape owns every recorded value. Operations are free functions that take
// Var handles, compute their result eagerly and register a backward closure
// that accumulates into the gradients of their inputs. Tape::backward walks
// the nodes in reverse creation order, which is a valid topological order.

#include "eqreg/tensor.hpp"

#include <deque>
#include <functional>
#include <string>

namespace eqreg {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    Index id = -1;

    const Tensor<Scalar>& value() const { return tape->value(*this); }
    const std::vector<Index>& shape() const { return value().shape; }
    bool requires_grad() const { return tape->requires_grad(*this); }
    bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename Scalar>
class Tape {
public:
    using Backward = std::function<void(Tape&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, {}); }

    /// A differentiable input (parameters, or anything to differentiate against).
    Var<Scalar> leaf(Tensor<Scalar> value) { return push(std::move(value), true, {}); }

    /// Records an op result. The closure only runs if some input requires a gradient.
    Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, Backward backward)
    {
        bool needs = false;
        for (const auto& in : inputs)
            needs = needs || requires_grad(in);
        return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    }

    const Tensor<Scalar>& value(Var<Scalar> v) const { return nodes_.at(std::size_t(v.id)).value; }
    bool requires_grad(Var<Scalar> v) const { return nodes_.at(std::size_t(v.id)).requires_grad; }

    /// Gradient buffer of v, zero-initialized on first access.
    Tensor<Scalar>& grad(Var<Scalar> v)
    {
        auto& node = nodes_.at(std::size_t(v.id));
        if (node.grad.size() != node.value.size())
            node.grad = Tensor<Scalar>(node.value.shape);
        return node.grad;
    }

    bool has_grad(Var<Scalar> v) const
    {
        const auto& node = nodes_.at(std::size_t(v.id));
        return node.grad.size() == node.value.size() && node.grad.size() > 0;
    }

    /// Back-propagates from a scalar root with seed 1.
    void backward(Var<Scalar> root)
    {
        require(value(root).size() == 1, "backward: root must be a scalar");
        grad(root).data.setOnes();
        for (Index id = root.id; id >= 0; --id) {
            auto& node = nodes_[std::size_t(id)];
            if (node.backward && node.grad.size() > 0) {
                current_ = id;
                node.backward(*this);
            }
        }
        current_ = -1;
    }

    /// Gradient of the node whose backward closure is running.
    const Tensor<Scalar>& upstream() const { return nodes_.at(std::size_t(current_)).grad; }

    Index size() const { return static_cast<Index>(nodes_.size()); }

private:
    struct Node {
        Tensor<Scalar> value;
        Tensor<Scalar> grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var<Scalar> push(Tensor<Scalar> value, bool needs_grad, Backward backward)
    {
        nodes_.push_back(Node{std::move(value), {}, needs_grad, std::move(backward)});
        return Var<Scalar>{this, static_cast<Index>(nodes_.size()) - 1};
    }

    std::deque<Node> nodes_;
    Index current_ = -1;
};

// ---------------------------------------------------------------------------
// Elementary ops

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b)
{
    require(a.shape() == b.shape(), "add: shape mismatch");
    Tensor<Scalar> out(a.shape());
    out.data = a.value().data + b.value().data;
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t) {
        const auto& g = t.upstream().data;
        if (a.requires_grad())
            t.grad(a).data += g;
        if (b.requires_grad())
            t.grad(b).data += g;
    });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar factor)
{
    Tensor<Scalar> out(a.shape());
    out.data = a.value().data * factor;
    return a.tape->record(std::move(out), {a}, [a, factor](Tape<Scalar>& t) {
        t.grad(a).data += t.upstream().data * factor;
    });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a)
{
    Tensor<Scalar> out({1});
    out.data[0] = a.value().data.sum();
    return a.tape->record(std::move(out), {a}, [a](Tape<Scalar>& t) {
        t.grad(a).data += t.upstream().data[0];
    });
}

/// Σ (a - b)^2
template <typename Scalar>
Var<Scalar> sum_squared_difference(Var<Scalar> a, Var<Scalar> b)
{
    require(a.value().size() == b.value().size(), "sum_squared_difference: size mismatch");
    Tensor<Scalar> out({1});
    out.data[0] = (a.value().data - b.value().data).square().sum();
    return a.tape->record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t) {
        const Scalar g = t.upstream().data[0];
        const auto diff = (a.value().data - b.value().data).eval();
        if (a.requires_grad())
            t.grad(a).data += Scalar(2) * g * diff;
        if (b.requires_grad())
            t.grad(b).data -= Scalar(2) * g * diff;
    });
}

/// mean((a - b)^2) over all elements.
template <typename Scalar>
Var<Scalar> mean_squared_error(Var<Scalar> a, Var<Scalar> b)
{
    return scale(sum_squared_difference(a, b), Scalar(1) / Scalar(a.value().size()));
}

/// Batch elements [start, start + count) of a tensor, as a tensor with N = count.
template <typename Scalar>
Var<Scalar> batch_range(Var<Scalar> x, Index start, Index count)
{
    const auto& v = x.value();
    require(start >= 0 && count >= 1 && start + count <= v.dim(0), "batch_range: out of range");
    auto shape = v.shape;
    shape[0] = count;
    const Index chunk = v.size() / v.dim(0);
    Tensor<Scalar> out(shape);
    out.data = v.data.segment(start * chunk, count * chunk);
    return x.tape->record(std::move(out), {x}, [x, start, count, chunk](Tape<Scalar>& t) {
        t.grad(x).data.segment(start * chunk, count * chunk) += t.upstream().data;
    });
}

template <typename Scalar>
Var<Scalar> batch_slice(Var<Scalar> x, Index n)
{
    return batch_range(x, n, 1);
}

} // namespace eqreg
