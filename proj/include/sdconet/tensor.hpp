#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "sdconet/common.hpp"

namespace sdconet {

using Scalar = double;

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the reverse-mode tape. Ops allocate a fresh node for their
// output and record parents plus a backward closure that scatters the node's
// gradient into the parents' gradients.
struct TensorNode {
    std::vector<int> shape;
    std::vector<Scalar> value;
    std::vector<Scalar> grad; // empty until first accumulation
    bool requires_grad = false;
    uint64_t seq = 0;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward;

    long long size() const { return static_cast<long long>(value.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), Scalar(0));
    }
};

// Value-semantics handle to a shared tape node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(const std::vector<int>& shape, bool requires_grad = false);
    static Tensor full(const std::vector<int>& shape, Scalar v, bool requires_grad = false);
    static Tensor from(std::vector<Scalar> data, const std::vector<int>& shape,
                       bool requires_grad = false);
    static Tensor scalar(Scalar v);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const;
    long long size() const { return n_->size(); }

    Scalar* data() { return n_->value.data(); }
    const Scalar* data() const { return n_->value.data(); }
    std::vector<Scalar>& values() { return n_->value; }
    const std::vector<Scalar>& values() const { return n_->value; }

    Scalar item() const;

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    // Gradient buffer; allocated zero-filled on first access.
    std::vector<Scalar>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool has_grad() const { return !n_->grad.empty(); }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), Scalar(0));
    }

    // Runs reverse-mode accumulation from this scalar node.
    void backward();

    // Copy of the values as a fresh constant leaf (no graph history).
    Tensor detach() const;

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// While a guard is alive on this thread, ops do not record the tape.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

long long numel_of(const std::vector<int>& shape);
NodePtr make_node(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

} // namespace sdconet
