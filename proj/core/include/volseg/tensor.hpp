#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "volseg/common.hpp"
#include "volseg/rng.hpp"

namespace volseg {

/// When disabled (via NoGradGuard) ops record no graph and outputs never
/// require grad. Thread-local.
struct GradMode {
    static bool enabled() { return flag(); }
    static void set(bool on) { flag() = on; }

private:
    static bool& flag() {
        static thread_local bool f = true;
        return f;
    }
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

namespace detail {

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = true;

    // Recorded graph edge: parents plus the closure that routes this node's
    // grad into theirs. Leaves have no closure.
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
    void accumulate(const std::vector<T>& g) {
        ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

}  // namespace detail

/// Dense row-major tensor, the value carrier of the whole library.
///
/// A Tensor is a cheap shared handle. Forward values are immutable once an op
/// has produced them; only grad buffers mutate afterwards. Ops executed while
/// GradMode is on and any input needs grad record a reverse-mode tape node in
/// the output.
template <typename T>
class Tensor {
public:
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

    static Tensor from_data(std::vector<T> data, Shape shape, bool requires_grad = false) {
        check(static_cast<int64_t>(data.size()) == numel_of(shape),
              "tensor data length " + std::to_string(data.size()) + " != product of shape " +
                  shape_str(shape));
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        impl->requires_grad = requires_grad && GradMode::enabled();
        return Tensor(std::move(impl));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const size_t n = static_cast<size_t>(numel_of(shape));
        return from_data(std::vector<T>(n, T(0)), std::move(shape), requires_grad);
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T value) {
        const size_t n = static_cast<size_t>(numel_of(shape));
        return from_data(std::vector<T>(n, value), std::move(shape));
    }
    static Tensor scalar(T value) { return from_data({value}, Shape{1}); }

    static Tensor randn(Rng& rng, Shape shape) {
        std::vector<T> d(static_cast<size_t>(numel_of(shape)));
        for (auto& v : d) v = static_cast<T>(rng.next_normal());
        return from_data(std::move(d), std::move(shape));
    }
    static Tensor uniform(Rng& rng, Shape shape, T lo, T hi) {
        std::vector<T> d(static_cast<size_t>(numel_of(shape)));
        for (auto& v : d) v = lo + (hi - lo) * static_cast<T>(rng.next_double());
        return from_data(std::move(d), std::move(shape));
    }
    static Tensor trunc_normal(Rng& rng, Shape shape, double sigma) {
        std::vector<T> d(static_cast<size_t>(numel_of(shape)));
        for (auto& v : d) v = static_cast<T>(rng.next_trunc_normal(sigma));
        return from_data(std::move(d), std::move(shape));
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t dim(size_t i) const { return impl_->shape[i]; }
    size_t rank() const { return impl_->shape.size(); }
    int64_t numel() const { return impl_->numel(); }

    const std::vector<T>& data() const { return impl_->data; }
    std::vector<T>& mutable_data() { return impl_->data; }
    T operator[](int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) {
        check(impl_->is_leaf, "requires_grad can only be toggled on leaves");
        impl_->requires_grad = on;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<T>& grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    T item() const {
        check(numel() == 1, "item() requires a single-element tensor, got " + shape_str(shape()));
        return impl_->data[0];
    }

    /// Same data, cut loose from the tape: a fresh leaf that never requires grad.
    Tensor detach() const {
        auto impl = std::make_shared<Impl>();
        impl->shape = impl_->shape;
        impl->data = impl_->data;
        return Tensor(std::move(impl));
    }

    Tensor clone_leaf() const { return from_data(impl_->data, impl_->shape, impl_->requires_grad); }

    bool all_finite() const {
        for (T v : impl_->data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::shared_ptr<Impl> impl() const { return impl_; }
    Impl* raw() const { return impl_.get(); }

private:
    std::shared_ptr<Impl> impl_;
};

namespace detail {

/// Builds the output node for a primitive op. `backward` receives the output
/// impl (whose .grad is populated) and must accumulate into the parents.
template <typename T>
Tensor<T> make_op_node(Shape out_shape, std::vector<T> out_data,
                       std::vector<Tensor<T>> inputs,
                       std::function<void(TensorImpl<T>&)> backward) {
    auto out = Tensor<T>::from_data(std::move(out_data), std::move(out_shape));
    bool needs = false;
    if (GradMode::enabled()) {
        for (const auto& in : inputs)
            if (in.requires_grad()) {
                needs = true;
                break;
            }
    }
    if (needs) {
        auto impl = out.impl();
        impl->requires_grad = true;
        impl->is_leaf = false;
        impl->parents.reserve(inputs.size());
        for (const auto& in : inputs) impl->parents.push_back(in.impl());
        impl->backward_fn = std::move(backward);
    }
    return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every reachable leaf that requires grad; call zero_grad between
/// optimization steps.
template <typename T>
void backward(const Tensor<T>& loss) {
    check(loss.numel() == 1,
          "backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    using Impl = detail::TensorImpl<T>;
    Impl* root = loss.raw();
    if (!root->requires_grad) return;

    // Iterative post-order DFS: topological order, each node once.
    std::vector<Impl*> order;
    std::unordered_set<Impl*> visited;
    std::vector<std::pair<Impl*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Impl* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Non-leaf grads are scratch space for this sweep; only leaves accumulate
    // across repeated backward calls.
    for (Impl* node : order)
        if (!node->is_leaf) node->grad.clear();

    root->ensure_grad();
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Impl* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
}

}  // namespace volseg
