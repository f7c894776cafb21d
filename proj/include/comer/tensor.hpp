// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "comer/common.hpp"

namespace comer {

// Element-count tracker for every live tensor buffer. The attention
// refinement complexity bound is asserted against its peak watermark.
class AllocStats {
public:
    static AllocStats& instance() {
        static AllocStats s;
        return s;
    }
    void add(Index n) {
        Index cur = current_.fetch_add(n) + n;
        Index p = peak_.load();
        while (cur > p && !peak_.compare_exchange_weak(p, cur)) {
        }
    }
    void sub(Index n) { current_.fetch_sub(n); }
    Index current() const { return current_.load(); }
    Index peak() const { return peak_.load(); }
    void reset_peak() { peak_.store(current_.load()); }

private:
    std::atomic<Index> current_{0};
    std::atomic<Index> peak_{0};
};

// Thread-local switch: when off, ops do not record the backward graph.
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled_flag()) { grad_enabled_flag() = false; }
    ~NoGradGuard() { grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
    Shape shape;
    Vec<T> values;
    Vec<T> grad;  // empty until touched by backward
    bool requires_grad = false;
    // Graph edges. backprop distributes this node's grad into parents.
    std::vector<Tensor<T>> parents;
    std::function<void(TensorNode<T>&)> backprop;

    TensorNode(Shape s, Vec<T> v) : shape(std::move(s)), values(std::move(v)) {
        AllocStats::instance().add(Index(values.size()));
    }
    ~TensorNode() { AllocStats::instance().sub(Index(values.size() + grad.size())); }
    TensorNode(const TensorNode&) = delete;
    TensorNode& operator=(const TensorNode&) = delete;

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(values.size(), T(0));
            AllocStats::instance().add(Index(grad.size()));
        }
    }
};

// Value-semantics handle to a node in the computation graph. Copies share
// the underlying buffer; mutating ops are limited to leaf construction,
// gradient bookkeeping and the optimizer.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    Tensor(Shape shape, Vec<T> values) {
        check_as<DimensionError>(numel(shape) == Index(values.size()),
                                 "tensor shape " + shape_str(shape) + " does not match buffer size " +
                                     std::to_string(values.size()));
        node_ = std::make_shared<TensorNode<T>>(std::move(shape), std::move(values));
    }

    // Convenience for boundary code holding plainly allocated data; copies
    // into aligned storage.
    template <typename Alloc>
    Tensor(Shape shape, const std::vector<T, Alloc>& values)
        : Tensor(std::move(shape), Vec<T>(values.begin(), values.end())) {}

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T v) {
        Vec<T> buf(size_t(numel(shape)), v);
        return Tensor(std::move(shape), std::move(buf));
    }
    static Tensor scalar(T v) { return Tensor(Shape{}, Vec<T>{v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    Index rank() const { return Index(node_->shape.size()); }
    Index dim(Index i) const { return node_->shape[size_t(i)]; }
    Index size() const { return Index(node_->values.size()); }

    const Vec<T>& values() const { return node_->values; }
    Vec<T>& mutable_values() { return node_->values; }
    const T* data() const { return node_->values.data(); }
    T* data() { return node_->values.data(); }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    const Vec<T>& grad() const { return node_->grad; }
    Vec<T>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        check_as<UsageError>(size() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
        return node_->values[0];
    }

    // Multi-index accessor for tests and glue code (row-major).
    T at(std::initializer_list<Index> idx) const {
        Index off = 0;
        Index stride = 1;
        const Shape& s = shape();
        check_as<UsageError>(Index(idx.size()) == rank(), "at(): index rank mismatch");
        const Index* p = idx.begin();
        for (Index d = rank() - 1; d >= 0; --d) {
            off += p[size_t(d)] * stride;
            stride *= s[size_t(d)];
        }
        return node_->values[size_t(off)];
    }

    // Same values, detached from the recorded graph.
    Tensor detach() const {
        Tensor t(shape(), values());
        return t;
    }

    TensorNode<T>* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode<T>>& handle() const { return node_; }

private:
    std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
using EigenRowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenRowMajor<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenRowMajor<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
ConstMatMap<T> as_matrix(const Tensor<T>& t, Index rows, Index cols) {
    return ConstMatMap<T>(t.data(), rows, cols);
}

namespace detail {

template <typename T>
inline void assert_finite(const Tensor<T>& t, const char* op) {
    ConstArrMap<T> m(t.data(), t.size());
    if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite value in result");
}

// Builds an op result node: validates finiteness and, when autograd is
// active and any parent participates, wires the backward closure.
template <typename T, typename Backprop>
Tensor<T> make_op(const char* name, Shape shape, Vec<T> values, std::vector<Tensor<T>> parents,
                  Backprop&& backprop) {
    Tensor<T> out(std::move(shape), std::move(values));
    assert_finite(out, name);
    if (grad_enabled_flag()) {
        bool needs = false;
        for (const auto& p : parents)
            if (p.requires_grad()) needs = true;
        if (needs) {
            out.set_requires_grad(true);
            out.node()->parents = std::move(parents);
            out.node()->backprop = std::forward<Backprop>(backprop);
        }
    }
    return out;
}

template <typename T>
inline void accumulate_grad(Tensor<T>& parent, const Vec<T>& contrib) {
    if (!parent.requires_grad()) return;
    auto& g = parent.mutable_grad();
    ArrMap<T>(g.data(), Index(g.size())) += ConstArrMap<T>(contrib.data(), Index(contrib.size()));
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// requires_grad node reachable from the loss; repeated calls without
// zero_grad() keep accumulating.
template <typename T>
void backward(const Tensor<T>& loss) {
    check_as<UsageError>(loss.size() == 1, "backward() expects a scalar loss, got " + shape_str(loss.shape()));
    check_as<UsageError>(loss.requires_grad(), "backward() on a tensor with no recorded graph");

    // Iterative post-order topological sort over parent edges.
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.push_back({loss.node(), 0});
    seen.insert(loss.node());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            TensorNode<T>* p = n->parents[i++].node();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

}  // namespace comer
