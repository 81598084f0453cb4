#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "bpim/tensor.hpp"

namespace bpim {

/// One vertex of the reverse-mode tape.
struct Node {
    Tensor value;
    Tensor grad;  // empty until the first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the inputs' grads.
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, zero-initialised on first use.
    Tensor& grad_buffer();
    bool has_grad() const { return !grad.empty(); }
};

/// Handle to a tape node. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    /// Direct access for parameter updates; never call while a graph that
    /// reads this node is still awaiting backward.
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    Tensor& grad_buffer() { return node_->grad_buffer(); }
    bool requires_grad() const { return node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t dim(int i) const { return node_->value.dim(i); }
    void zero_grad();

    const std::shared_ptr<Node>& node() const { return node_; }
    static Var from_node(std::shared_ptr<Node> n);

private:
    std::shared_ptr<Node> node_;
};

/// True while gradient recording is enabled on this thread.
bool grad_enabled();

/// Disables graph recording for its lifetime (inference, FD probes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Creates an op result. The backward closure is kept only when recording is
/// enabled and at least one input requires a gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

/// Reverse sweep from a scalar root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

/// Multiply-accumulate counter used by count_flops; ops with a GEMM-shaped
/// inner loop report into it while a FlopCounter is alive on this thread.
class FlopCounter {
public:
    FlopCounter();
    ~FlopCounter();
    FlopCounter(const FlopCounter&) = delete;
    FlopCounter& operator=(const FlopCounter&) = delete;

    double macs() const { return macs_; }
    static void add(double macs);

private:
    double macs_ = 0.0;
    FlopCounter* previous_;
};

}  // namespace bpim
