#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "modmoe/rng.hpp"

namespace modmoe {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (const int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline void check_shape(const Shape& s) {
    if (s.empty()) throw std::runtime_error("tensor shape must have at least one dimension");
    for (const int d : s) {
        if (d <= 0) throw std::runtime_error("tensor dimensions must be positive, got " + shape_str(s));
    }
}

// Reverse-mode autodiff node. Ops build a DAG of these; backward() walks it in
// reverse topological order. Leaf nodes (no parents) with requires_grad are
// parameters; their grad buffers accumulate across backward calls until
// zero_grad.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first needed
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

namespace detail {
inline thread_local bool g_grad_enabled = true;
}

inline bool grad_enabled() { return detail::g_grad_enabled; }

// Disables graph construction in scope (used for teacher forwards and eval).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(Shape shape, T v, bool requires_grad = false) {
        check_shape(shape);
        auto n = std::make_shared<Node<T>>();
        n->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        check_shape(shape);
        if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
            throw std::runtime_error("tensor data length " + std::to_string(data.size()) +
                                     " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        check_shape(shape);
        auto n = std::make_shared<Node<T>>();
        n->value.resize(static_cast<size_t>(shape_numel(shape)));
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        for (auto& x : n->value) x = static_cast<T>(rng.normal()) * stddev;
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return filled({1}, v, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    const std::string& name() const { return node_->name; }
    Tensor& set_name(std::string n) {
        node_->name = std::move(n);
        return *this;
    }

    std::vector<T>& value() { return node_->value; }
    const std::vector<T>& value() const { return node_->value; }
    std::vector<T>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }

    T item() const {
        if (numel() != 1) throw std::runtime_error("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    }

    // releases the buffer entirely; has_grad() turns false until the next backward
    void clear_grad() { node_->grad.clear(); }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    // identity by node, used for parameter dedup
    bool same_as(const Tensor& other) const { return node_.get() == other.node_.get(); }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
void topo_collect(Node<T>* root, std::vector<Node<T>*>& order) {
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx].get();
            ++idx;
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Accumulates dLoss/dtheta into every reachable parameter's grad buffer.
// Parameter grads are preserved across calls (gradient accumulation);
// intermediate grads are reset at the start of each call.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
        throw std::runtime_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    std::vector<Node<T>*> order;  // parents-before-children
    detail::topo_collect(loss.node().get(), order);
    for (Node<T>* n : order) {
        if (!n->parents.empty()) {
            n->grad.assign(n->value.size(), T(0));
        }
    }
    Node<T>* root = loss.node().get();
    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace modmoe
