#include "bpim/autograd.hpp"

#include <unordered_set>

namespace bpim {

namespace {
thread_local bool t_grad_enabled = true;
thread_local FlopCounter* t_flop_counter = nullptr;
}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor::zeros(value.shape());
    if (grad.shape() != value.shape()) grad = Tensor::zeros(value.shape());
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
}

void Var::zero_grad() {
    if (node_->has_grad()) node_->grad.fill(0.0);
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (t_grad_enabled) {
        bool any = false;
        for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
        if (any) {
            node->requires_grad = true;
            node->inputs.reserve(inputs.size());
            for (auto& in : inputs) node->inputs.push_back(in.defined() ? in.node() : nullptr);
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Var::from_node(std::move(node));
}

void backward(const Var& root) {
    require(root.defined(), "backward on undefined variable");
    require(root.value().numel() == 1, "backward root must be a scalar, got " + shape_str(root.shape()));
    if (!root.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child && child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
    // Interior buffers are released; leaves (parameters, inputs) keep theirs.
    for (Node* n : order) {
        if (n->backward_fn) n->grad = Tensor();
    }
}

FlopCounter::FlopCounter() : previous_(t_flop_counter) { t_flop_counter = this; }
FlopCounter::~FlopCounter() { t_flop_counter = previous_; }

void FlopCounter::add(double macs) {
    if (t_flop_counter) t_flop_counter->macs_ += macs;
}

}  // namespace bpim
