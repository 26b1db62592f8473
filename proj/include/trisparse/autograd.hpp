#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "trisparse/ops.hpp"
#include "trisparse/tensor.hpp"

// Reverse-mode differentiation over a small closed set of operations.
//
// A Var is a handle to an immutable graph node. Nodes record a backward rule
// only when at least one parent requires gradients, so graphs built purely
// from constants cost no more than the plain tensor ops.
namespace trisparse::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Computes parent gradients from the node's output gradient. `parent_grads`
/// arrives sized to the parent list; entries for parents that do not require
/// gradients may be left empty.
using BackwardFn = std::function<void(const Node& self, const Tensor& grad, std::vector<Tensor>& parent_grads)>;

struct Node {
    Tensor value;
    std::vector<NodePtr> parents;
    BackwardFn backward;
    bool requires_grad = false;
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

/// Gradient map produced by one backward pass.
class Gradients {
public:
    /// Gradient of `v`, or nullptr when the loss does not depend on it.
    const Tensor* find(const Var& v) const;
    /// Gradient of `v`, zero-filled when the loss does not depend on it.
    Tensor of(const Var& v) const;

private:
    friend Gradients backward(const Var& loss);
    std::unordered_map<const Node*, Tensor> grads_;
};

/// Reverse pass from a scalar loss. Multiple uses of a node sum their
/// contributions. Each call is independent of any previous call.
Gradients backward(const Var& loss);

Var constant(Tensor value);
Var parameter(Tensor value);
/// Same value, no gradient path.
Var stop_gradient(const Var& v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise product. `b` may also have extent 1 on axis 0 and is then
/// broadcast across it (C x H x W times 1 x H x W).
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double offset);
Var relu(const Var& a);  // relu'(0) = 0

Var conv2d(const Var& input, const Var& kernel, const std::optional<Var>& bias, std::size_t stride, std::size_t padding);
/// Convolution with frozen weights; gradients flow to `input` only. `spec`
/// must outlive the graph.
Var conv2d(const Var& input, const ConvSpec& spec);

Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x, std::size_t axis);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var sum(const Var& x);
Var reshape(const Var& x, Shape shape);
Var upsample_bilinear(const Var& x, std::size_t out_h, std::size_t out_w);

/// Straight-through selection: forward value is `hard`; backward passes the
/// incoming gradient to `soft` unchanged.
Var ste_select(const Tensor& hard, const Var& soft);

/// Straight-through gating of `term` (C x H x W) by a 1 x H x W indicator.
/// Forward: term * hard. Backward follows the soft surrogate term * soft, so
/// both `term` and `soft` receive gradients even where `hard` is zero.
Var ste_gate(const Var& term, const Tensor& hard, const Var& soft);

}  // namespace trisparse::ag
