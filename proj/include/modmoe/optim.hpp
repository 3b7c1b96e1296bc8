#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "modmoe/tensor.hpp"

namespace modmoe {

// Global L2 norm clip. Norm is accumulated in double over the given order, so
// the result does not depend on how the caller grouped the parameters.
// Returns the pre-clip norm.
template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
    double total = 0.0;
    for (const auto& p : params) {
        if (!p.has_grad()) continue;
        for (const T v : p.node()->grad) {
            if (!std::isfinite(static_cast<double>(v)))
                throw std::runtime_error("non-finite gradient in " + (p.name().empty() ? std::string("<unnamed>") : p.name()));
            total += static_cast<double>(v) * static_cast<double>(v);
        }
    }
    total = std::sqrt(total);
    if (total > max_norm && total > 0.0) {
        const T s = static_cast<T>(max_norm / total);
        for (const auto& p : params) {
            if (!p.has_grad()) continue;
            for (T& v : p.node()->grad) v *= s;
        }
    }
    return total;
}

// AdamW with decoupled weight decay applied to every parameter it owns.
// Parameters without an allocated gradient are skipped entirely, including
// decay and step count, so an optimizer over a superset of the touched
// parameters leaves the untouched ones bit-identical.
template <typename T>
class AdamW {
public:
    struct Options {
        double lr = 3e-4;
        double beta1 = 0.9;
        double beta2 = 0.95;
        double eps = 1e-8;
        double weight_decay = 0.1;
    };

    AdamW() = default;
    explicit AdamW(std::vector<Tensor<T>> params, Options opt = {}) : opt_(opt) {
        for (auto& p : params) add_param(p);
    }

    void add_param(const Tensor<T>& p) {
        for (const auto& q : params_)
            if (q.same_as(p)) return;
        params_.push_back(p);
        state_.push_back(State{std::vector<T>(p.numel(), T(0)), std::vector<T>(p.numel(), T(0)), 0});
    }

    const std::vector<Tensor<T>>& params() const { return params_; }
    double lr() const { return opt_.lr; }
    void set_lr(double lr) { opt_.lr = lr; }
    const Options& options() const { return opt_; }

    void step() {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            auto& st = state_[i];
            ++st.t;
            const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(st.t));
            const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(st.t));
            const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
            const T ob1 = static_cast<T>(1.0 - opt_.beta1), ob2 = static_cast<T>(1.0 - opt_.beta2);
            const T inv_bc1 = static_cast<T>(1.0 / bc1), inv_bc2 = static_cast<T>(1.0 / bc2);
            const T lr_t = static_cast<T>(opt_.lr), eps_t = static_cast<T>(opt_.eps);
            const T decay = static_cast<T>(opt_.lr * opt_.weight_decay);
            const std::vector<T>& g = p.grad();
            std::vector<T>& w = p.value();
            for (size_t j = 0; j < w.size(); ++j) {
                st.m[j] = b1 * st.m[j] + ob1 * g[j];
                st.v[j] = b2 * st.v[j] + ob2 * g[j] * g[j];
                const T mhat = st.m[j] * inv_bc1;
                const T vhat = st.v[j] * inv_bc2;
                w[j] -= lr_t * mhat / (std::sqrt(vhat) + eps_t) + decay * w[j];
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.clear_grad();
    }

private:
    struct State {
        std::vector<T> m, v;
        int64_t t = 0;
    };
    std::vector<Tensor<T>> params_;
    std::vector<State> state_;
    Options opt_;
};

using AdamWF = AdamW<float>;

}  // namespace modmoe
