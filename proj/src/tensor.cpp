#include "sdconet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

namespace sdconet {

namespace {
std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;
} // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

long long numel_of(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
        check_shape(d >= 0, "negative dimension");
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

NodePtr make_node(const std::vector<int>& shape) {
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value.assign(static_cast<size_t>(numel_of(shape)), Scalar(0));
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return n;
}

Tensor Tensor::zeros(const std::vector<int>& shape, bool requires_grad) {
    auto n = make_node(shape);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(const std::vector<int>& shape, Scalar v, bool requires_grad) {
    auto n = make_node(shape);
    std::fill(n->value.begin(), n->value.end(), v);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from(std::vector<Scalar> data, const std::vector<int>& shape, bool requires_grad) {
    check_shape(static_cast<long long>(data.size()) == numel_of(shape),
                "data size does not match shape " + shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->shape = shape;
    n->value = std::move(data);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(Scalar v) { return from({v}, {1}); }

int Tensor::dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    check_shape(i >= 0 && i < r, "dim index out of range");
    return n_->shape[static_cast<size_t>(i)];
}

Scalar Tensor::item() const {
    check_shape(size() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
    return n_->value[0];
}

Tensor Tensor::detach() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return Tensor(n);
}

void Tensor::backward() {
    check_shape(size() == 1, "backward() starts from a scalar loss");
    if (!n_->requires_grad) return;

    // Collect the reachable grad-requiring subgraph.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<TensorNode*> stack{n_.get()};
    seen.insert(n_.get());
    while (!stack.empty()) {
        TensorNode* cur = stack.back();
        stack.pop_back();
        order.push_back(cur);
        for (const auto& p : cur->parents) {
            if (p->requires_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.push_back(p.get());
            }
        }
    }
    // Creation order is a valid topological order of the tape.
    std::sort(order.begin(), order.end(),
              [](const TensorNode* a, const TensorNode* b) { return a->seq > b->seq; });

    n_->ensure_grad();
    n_->grad[0] += Scalar(1);
    for (TensorNode* node : order) {
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

} // namespace sdconet
