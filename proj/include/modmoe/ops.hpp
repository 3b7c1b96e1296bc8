#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modmoe/tensor.hpp"

namespace modmoe {

namespace detail {

// C += A * B, row-major. ikj order so the inner loop runs contiguously over
// rows of B and C and autovectorizes. Fixed iteration order keeps results
// bit-deterministic.
template <typename T>
void mm_nn(const T* A, const T* B, T* C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* a = A + static_cast<size_t>(i) * k;
        T* c = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = a[p];
            const T* b = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <typename T>
std::vector<T> transposed(const T* A, int rows, int cols) {
    std::vector<T> out(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(j) * rows + i] = A[static_cast<size_t>(i) * cols + j];
    return out;
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
    return n->requires_grad;
}

template <typename T, typename F>
void attach(Tensor<T>& out, std::vector<Tensor<T>> inputs, F&& fn) {
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return;
    auto& node = *out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& t : inputs) node.parents.push_back(t.node());
    node.backward_fn = std::forward<F>(fn);
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::runtime_error(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) detail::shape_error("matmul", a.shape(), b.shape());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::zeros({m, n});
    detail::mm_nn(a.value().data(), b.value().data(), out.value().data(), m, k, n);
    auto an = a.node();
    auto bn = b.node();
    detail::attach(out, {a, b}, [an, bn, m, k, n](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B^T
            auto bt = detail::transposed(bn->value.data(), k, n);
            detail::mm_nn(g, bt.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += A^T * dC, expressed as row updates so the inner loop vectorizes
            const T* av = an->value.data();
            T* dB = bn->grad.data();
            for (int i = 0; i < m; ++i) {
                const T* gi = g + static_cast<size_t>(i) * n;
                const T* ai = av + static_cast<size_t>(i) * k;
                for (int p = 0; p < k; ++p) {
                    const T s = ai[p];
                    T* db = dB + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) db[j] += s * gi[j];
                }
            }
        }
    });
    return out;
}

// a [m,k] times b^T where b is [n,k]; used for the weight-tied output head
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) detail::shape_error("matmul_nt", a.shape(), b.shape());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    auto out = Tensor<T>::zeros({m, n});
    {
        auto bt = detail::transposed(b.value().data(), n, k);  // [k,n]
        detail::mm_nn(a.value().data(), bt.data(), out.value().data(), m, k, n);
    }
    auto an = a.node();
    auto bn = b.node();
    detail::attach(out, {a, b}, [an, bn, m, k, n](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B
            detail::mm_nn(g, bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB[j,:] += sum_i dC[i,j] * A[i,:]
            const T* av = an->value.data();
            T* dB = bn->grad.data();
            for (int i = 0; i < m; ++i) {
                const T* gi = g + static_cast<size_t>(i) * n;
                const T* ai = av + static_cast<size_t>(i) * k;
                for (int j = 0; j < n; ++j) {
                    const T s = gi[j];
                    if (s == T(0)) continue;
                    T* db = dB + static_cast<size_t>(j) * k;
                    for (int c = 0; c < k; ++c) db[c] += s * ai[c];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise and broadcast
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) detail::shape_error("add", a.shape(), b.shape());
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    auto an = a.node();
    auto bn = b.node();
    detail::attach(out, {a, b}, [an, bn](Node<T>& self) {
        for (auto* p : {an.get(), bn.get()}) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
    return out;
}

// a [m,n] plus b [p,n] where m % p == 0; row r of a gets row (r % p) of b.
// p == 1 is a bias add, p == T adds positional rows across a batch.
template <typename T>
Tensor<T> add_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1) || a.dim(0) % b.dim(0) != 0)
        detail::shape_error("add_rows", a.shape(), b.shape());
    const int m = a.dim(0), n = a.dim(1), p = b.dim(0);
    auto out = Tensor<T>::zeros(a.shape());
    const T* av = a.value().data();
    const T* bv = b.value().data();
    T* ov = out.value().data();
    for (int r = 0; r < m; ++r) {
        const T* br = bv + static_cast<size_t>(r % p) * n;
        const T* ar = av + static_cast<size_t>(r) * n;
        T* orow = ov + static_cast<size_t>(r) * n;
        for (int j = 0; j < n; ++j) orow[j] = ar[j] + br[j];
    }
    auto an = a.node();
    auto bn = b.node();
    detail::attach(out, {a, b}, [an, bn, m, n, p](Node<T>& self) {
        const T* g = self.grad.data();
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += g[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            T* db = bn->grad.data();
            for (int r = 0; r < m; ++r) {
                T* dbr = db + static_cast<size_t>(r % p) * n;
                const T* gr = g + static_cast<size_t>(r) * n;
                for (int j = 0; j < n; ++j) dbr[j] += gr[j];
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    auto out = Tensor<T>::zeros(a.shape());
    const auto& av = a.value();
    auto& ov = out.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    auto an = a.node();
    detail::attach(out, {a}, [an, s](Node<T>& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += s * self.grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (const T v : a.value()) acc += static_cast<double>(v);
    auto out = Tensor<T>::scalar(static_cast<T>(acc));
    auto an = a.node();
    detail::attach(out, {a}, [an](Node<T>& self) {
        an->ensure_grad();
        const T g = self.grad[0];
        for (auto& d : an->grad) d += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    double acc = 0.0;
    for (const T v : a.value()) acc += static_cast<double>(v);
    const double inv = 1.0 / static_cast<double>(a.numel());
    auto out = Tensor<T>::scalar(static_cast<T>(acc * inv));
    auto an = a.node();
    detail::attach(out, {a}, [an, inv](Node<T>& self) {
        an->ensure_grad();
        const T g = self.grad[0] * static_cast<T>(inv);
        for (auto& d : an->grad) d += g;
    });
    return out;
}

// weighted sum against fixed coefficients; handy for reducing an op output to
// a scalar in gradient checks
template <typename T>
Tensor<T> dot_const(const Tensor<T>& a, std::vector<T> w) {
    if (static_cast<int64_t>(w.size()) != a.numel())
        throw std::runtime_error("dot_const: weight length does not match tensor " + shape_str(a.shape()));
    double acc = 0.0;
    const auto& av = a.value();
    for (size_t i = 0; i < av.size(); ++i) acc += static_cast<double>(av[i]) * static_cast<double>(w[i]);
    auto out = Tensor<T>::scalar(static_cast<T>(acc));
    auto an = a.node();
    detail::attach(out, {a}, [an, w = std::move(w)](Node<T>& self) {
        an->ensure_grad();
        const T g = self.grad[0];
        for (size_t i = 0; i < w.size(); ++i) an->grad[i] += g * w[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// lookup and slicing
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int32_t> ids) {
    if (table.ndim() != 2) throw std::runtime_error("embedding_lookup: table must be 2-D, got " + shape_str(table.shape()));
    const int v = table.dim(0), d = table.dim(1);
    const int n = static_cast<int>(ids.size());
    if (n == 0) throw std::runtime_error("embedding_lookup: empty id list");
    for (const int32_t id : ids) {
        if (id < 0 || id >= v)
            throw std::runtime_error("embedding_lookup: id " + std::to_string(id) + " out of range for vocab " + std::to_string(v));
    }
    auto out = Tensor<T>::zeros({n, d});
    const T* tv = table.value().data();
    T* ov = out.value().data();
    for (int i = 0; i < n; ++i)
        std::copy_n(tv + static_cast<size_t>(ids[i]) * d, d, ov + static_cast<size_t>(i) * d);
    auto tn = table.node();
    std::vector<int32_t> ids_copy(ids.begin(), ids.end());
    detail::attach(out, {table}, [tn, ids_copy = std::move(ids_copy), d](Node<T>& self) {
        tn->ensure_grad();
        const T* g = self.grad.data();
        T* tg = tn->grad.data();
        for (size_t i = 0; i < ids_copy.size(); ++i) {
            T* row = tg + static_cast<size_t>(ids_copy[i]) * d;
            const T* gr = g + i * d;
            for (int j = 0; j < d; ++j) row[j] += gr[j];
        }
    });
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int count) {
    if (a.ndim() != 2 || start < 0 || count <= 0 || start + count > a.dim(0))
        throw std::runtime_error("slice_rows: rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                                 ") invalid for " + shape_str(a.shape()));
    const int n = a.dim(1);
    auto out = Tensor<T>::zeros({count, n});
    std::copy_n(a.value().data() + static_cast<size_t>(start) * n, static_cast<size_t>(count) * n, out.value().data());
    auto an = a.node();
    detail::attach(out, {a}, [an, start, n](Node<T>& self) {
        an->ensure_grad();
        T* dst = an->grad.data() + static_cast<size_t>(start) * n;
        for (size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int start, int count) {
    if (a.ndim() != 2 || start < 0 || count <= 0 || start + count > a.dim(1))
        throw std::runtime_error("slice_cols: cols [" + std::to_string(start) + "," + std::to_string(start + count) +
                                 ") invalid for " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    auto out = Tensor<T>::zeros({m, count});
    const T* av = a.value().data();
    T* ov = out.value().data();
    for (int i = 0; i < m; ++i)
        std::copy_n(av + static_cast<size_t>(i) * n + start, count, ov + static_cast<size_t>(i) * count);
    auto an = a.node();
    detail::attach(out, {a}, [an, start, count, m, n](Node<T>& self) {
        an->ensure_grad();
        const T* g = self.grad.data();
        T* ag = an->grad.data();
        for (int i = 0; i < m; ++i) {
            T* dst = ag + static_cast<size_t>(i) * n + start;
            const T* src = g + static_cast<size_t>(i) * count;
            for (int j = 0; j < count; ++j) dst[j] += src[j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

// softmax over the last dimension
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    const int cols = a.dim(a.ndim() - 1);
    const int rows = static_cast<int>(a.numel() / cols);
    auto out = Tensor<T>::zeros(a.shape());
    const T* av = a.value().data();
    T* ov = out.value().data();
    for (int r = 0; r < rows; ++r) {
        const T* x = av + static_cast<size_t>(r) * cols;
        T* y = ov + static_cast<size_t>(r) * cols;
        T mx = x[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
        double denom = 0.0;
        for (int j = 0; j < cols; ++j) {
            y[j] = std::exp(x[j] - mx);
            denom += static_cast<double>(y[j]);
        }
        const T inv = static_cast<T>(1.0 / denom);
        for (int j = 0; j < cols; ++j) y[j] *= inv;
    }
    auto an = a.node();
    detail::attach(out, {a}, [an, rows, cols](Node<T>& self) {
        an->ensure_grad();
        const T* p = self.value.data();
        const T* g = self.grad.data();
        T* da = an->grad.data();
        for (int r = 0; r < rows; ++r) {
            const T* pr = p + static_cast<size_t>(r) * cols;
            const T* gr = g + static_cast<size_t>(r) * cols;
            T* dr = da + static_cast<size_t>(r) * cols;
            double dot = 0.0;
            for (int j = 0; j < cols; ++j) dot += static_cast<double>(pr[j]) * static_cast<double>(gr[j]);
            const T d = static_cast<T>(dot);
            for (int j = 0; j < cols; ++j) dr[j] += pr[j] * (gr[j] - d);
        }
    });
    return out;
}

// layer norm over the last dimension with affine parameters
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    const int cols = x.dim(x.ndim() - 1);
    if (gamma.numel() != cols || beta.numel() != cols) detail::shape_error("layer_norm", x.shape(), gamma.shape());
    const int rows = static_cast<int>(x.numel() / cols);
    auto out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(x.value().size());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    const T* xv = x.value().data();
    const T* gv = gamma.value().data();
    const T* bv = beta.value().data();
    T* ov = out.value().data();
    for (int r = 0; r < rows; ++r) {
        const T* xr = xv + static_cast<size_t>(r) * cols;
        T* hr = xhat->data() + static_cast<size_t>(r) * cols;
        T* yr = ov + static_cast<size_t>(r) * cols;
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += static_cast<double>(xr[j]);
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double dv = static_cast<double>(xr[j]) - mu;
            var += dv * dv;
        }
        var /= cols;
        const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*rstd)[r] = rs;
        const T mu_t = static_cast<T>(mu);
        for (int j = 0; j < cols; ++j) {
            hr[j] = (xr[j] - mu_t) * rs;
            yr[j] = gv[j] * hr[j] + bv[j];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    detail::attach(out, {x, gamma, beta}, [xn, gn, bn, xhat, rstd, rows, cols](Node<T>& self) {
        const T* g = self.grad.data();
        if (gn->requires_grad) {
            gn->ensure_grad();
            T* dg = gn->grad.data();
            for (int r = 0; r < rows; ++r) {
                const T* gr = g + static_cast<size_t>(r) * cols;
                const T* hr = xhat->data() + static_cast<size_t>(r) * cols;
                for (int j = 0; j < cols; ++j) dg[j] += gr[j] * hr[j];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            T* db = bn->grad.data();
            for (int r = 0; r < rows; ++r) {
                const T* gr = g + static_cast<size_t>(r) * cols;
                for (int j = 0; j < cols; ++j) db[j] += gr[j];
            }
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            const T* gv2 = gn->value.data();
            T* dx = xn->grad.data();
            for (int r = 0; r < rows; ++r) {
                const T* gr = g + static_cast<size_t>(r) * cols;
                const T* hr = xhat->data() + static_cast<size_t>(r) * cols;
                T* dr = dx + static_cast<size_t>(r) * cols;
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (int j = 0; j < cols; ++j) {
                    const double dh = static_cast<double>(gr[j]) * static_cast<double>(gv2[j]);
                    sum_dh += dh;
                    sum_dh_h += dh * static_cast<double>(hr[j]);
                }
                const T m1 = static_cast<T>(sum_dh / cols);
                const T m2 = static_cast<T>(sum_dh_h / cols);
                const T rs = (*rstd)[r];
                for (int j = 0; j < cols; ++j) {
                    const T dh = gr[j] * gv2[j];
                    dr[j] += rs * (dh - m1 - hr[j] * m2);
                }
            }
        }
    });
    return out;
}

// tanh-approximation gelu
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double kC = 0.044715;
    const double s = std::sqrt(2.0 / std::numbers::pi);
    auto out = Tensor<T>::zeros(x.shape());
    const T* xv = x.value().data();
    T* ov = out.value().data();
    const size_t n = x.value().size();
    for (size_t i = 0; i < n; ++i) {
        const double v = static_cast<double>(xv[i]);
        const double u = s * (v + kC * v * v * v);
        ov[i] = static_cast<T>(0.5 * v * (1.0 + std::tanh(u)));
    }
    auto xn = x.node();
    detail::attach(out, {x}, [xn, s](Node<T>& self) {
        constexpr double kC = 0.044715;
        xn->ensure_grad();
        const T* xv2 = xn->value.data();
        const T* g = self.grad.data();
        T* dx = xn->grad.data();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double v = static_cast<double>(xv2[i]);
            const double u = s * (v + kC * v * v * v);
            const double th = std::tanh(u);
            const double sech2 = 1.0 - th * th;
            const double du = s * (1.0 + 3.0 * kC * v * v);
            const double d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * du;
            dx[i] += g[i] * static_cast<T>(d);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// attention
// ---------------------------------------------------------------------------

// q, k are [B*T, H*Dh] row-major; output is [B*H*T, T] of scaled dot products
// with entries above the diagonal set to -inf so a following softmax gives
// them exactly zero probability.
template <typename T>
Tensor<T> causal_attention_scores(const Tensor<T>& q, const Tensor<T>& k, int batch, int time, int heads) {
    if (q.shape() != k.shape() || q.ndim() != 2 || q.dim(0) != batch * time || q.dim(1) % heads != 0)
        detail::shape_error("causal_attention_scores", q.shape(), k.shape());
    const int d = q.dim(1);
    const int dh = d / heads;
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    auto out = Tensor<T>::zeros({batch * heads * time, time});
    const T* qv = q.value().data();
    const T* kv = k.value().data();
    T* ov = out.value().data();
    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::vector<T> kht(static_cast<size_t>(dh) * time);  // head slice of k, transposed to [dh, T]
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int j = 0; j < time; ++j) {
                const T* kr = kv + static_cast<size_t>(b * time + j) * d + h * dh;
                for (int c = 0; c < dh; ++c) kht[static_cast<size_t>(c) * time + j] = kr[c];
            }
            for (int i = 0; i < time; ++i) {
                const T* qr = qv + static_cast<size_t>(b * time + i) * d + h * dh;
                T* row = ov + static_cast<size_t>((b * heads + h) * time + i) * time;
                for (int c = 0; c < dh; ++c) {
                    const T qc = qr[c];
                    const T* kc = kht.data() + static_cast<size_t>(c) * time;
                    for (int j = 0; j < time; ++j) row[j] += qc * kc[j];
                }
                for (int j = 0; j <= i; ++j) row[j] *= inv_sqrt_dh;
                for (int j = i + 1; j < time; ++j) row[j] = neg_inf;
            }
        }
    }
    auto qn = q.node();
    auto kn = k.node();
    detail::attach(out, {q, k}, [qn, kn, batch, time, heads, d, dh, inv_sqrt_dh](Node<T>& self) {
        const T* g = self.grad.data();
        const T* qv2 = qn->value.data();
        const T* kv2 = kn->value.data();
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < time; ++i) {
                    const T* grow = g + static_cast<size_t>((b * heads + h) * time + i) * time;
                    const T* qr = qv2 + static_cast<size_t>(b * time + i) * d + h * dh;
                    T* dq = qn->requires_grad ? qn->grad.data() + static_cast<size_t>(b * time + i) * d + h * dh : nullptr;
                    for (int j = 0; j <= i; ++j) {
                        const T gs = grow[j] * inv_sqrt_dh;
                        if (gs == T(0)) continue;
                        const T* kr = kv2 + static_cast<size_t>(b * time + j) * d + h * dh;
                        if (dq) {
                            for (int c = 0; c < dh; ++c) dq[c] += gs * kr[c];
                        }
                        if (kn->requires_grad) {
                            T* dk = kn->grad.data() + static_cast<size_t>(b * time + j) * d + h * dh;
                            for (int c = 0; c < dh; ++c) dk[c] += gs * qr[c];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// probs [B*H*T, T] (rows softmaxed, causal zeros above diagonal), v [B*T, H*Dh]
template <typename T>
Tensor<T> attention_apply(const Tensor<T>& probs, const Tensor<T>& v, int batch, int time, int heads) {
    const int d = v.dim(1);
    const int dh = d / heads;
    if (probs.ndim() != 2 || probs.dim(0) != batch * heads * time || probs.dim(1) != time || v.dim(0) != batch * time ||
        d % heads != 0)
        detail::shape_error("attention_apply", probs.shape(), v.shape());
    auto out = Tensor<T>::zeros({batch * time, d});
    const T* pv = probs.value().data();
    const T* vv = v.value().data();
    T* ov = out.value().data();
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < time; ++i) {
                const T* prow = pv + static_cast<size_t>((b * heads + h) * time + i) * time;
                T* orow = ov + static_cast<size_t>(b * time + i) * d + h * dh;
                for (int j = 0; j <= i; ++j) {
                    const T p = prow[j];
                    if (p == T(0)) continue;
                    const T* vr = vv + static_cast<size_t>(b * time + j) * d + h * dh;
                    for (int c = 0; c < dh; ++c) orow[c] += p * vr[c];
                }
            }
        }
    }
    auto pn = probs.node();
    auto vn = v.node();
    detail::attach(out, {probs, v}, [pn, vn, batch, time, heads, d, dh](Node<T>& self) {
        const T* g = self.grad.data();
        const T* pv2 = pn->value.data();
        const T* vv2 = vn->value.data();
        if (pn->requires_grad) pn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();
        for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
                for (int i = 0; i < time; ++i) {
                    const T* grow = g + static_cast<size_t>(b * time + i) * d + h * dh;
                    const T* prow = pv2 + static_cast<size_t>((b * heads + h) * time + i) * time;
                    T* dprow =
                        pn->requires_grad ? pn->grad.data() + static_cast<size_t>((b * heads + h) * time + i) * time : nullptr;
                    for (int j = 0; j <= i; ++j) {
                        const T* vr = vv2 + static_cast<size_t>(b * time + j) * d + h * dh;
                        if (dprow) {
                            double acc = 0.0;
                            for (int c = 0; c < dh; ++c) acc += static_cast<double>(grow[c]) * static_cast<double>(vr[c]);
                            dprow[j] += static_cast<T>(acc);
                        }
                        if (vn->requires_grad) {
                            const T p = prow[j];
                            if (p == T(0)) continue;
                            T* dv = vn->grad.data() + static_cast<size_t>(b * time + j) * d + h * dh;
                            for (int c = 0; c < dh; ++c) dv[c] += p * grow[c];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

inline constexpr int32_t kIgnoreIndex = -1;

// mean next-token cross-entropy in nats over targets != ignore_index
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int32_t> targets, int32_t ignore_index = kIgnoreIndex) {
    if (logits.ndim() != 2) throw std::runtime_error("cross_entropy: logits must be 2-D, got " + shape_str(logits.shape()));
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n)
        throw std::runtime_error("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                                 " rows");
    for (const int32_t t : targets) {
        if (t != ignore_index && (t < 0 || t >= v))
            throw std::runtime_error("cross_entropy: target id " + std::to_string(t) + " out of range for vocab " +
                                     std::to_string(v));
    }
    auto probs = std::make_shared<std::vector<T>>(logits.value().size());
    const T* lv = logits.value().data();
    double nll = 0.0;
    int64_t count = 0;
    for (int r = 0; r < n; ++r) {
        const T* row = lv + static_cast<size_t>(r) * v;
        T* prow = probs->data() + static_cast<size_t>(r) * v;
        T mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < v; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += static_cast<double>(prow[j]);
        }
        const T inv = static_cast<T>(1.0 / denom);
        for (int j = 0; j < v; ++j) prow[j] *= inv;
        if (targets[r] == ignore_index) continue;
        const double lse = std::log(denom) + static_cast<double>(mx);
        nll += lse - static_cast<double>(row[targets[r]]);
        ++count;
    }
    if (count == 0) throw std::runtime_error("cross_entropy: all positions masked");
    auto out = Tensor<T>::scalar(static_cast<T>(nll / static_cast<double>(count)));
    auto ln = logits.node();
    std::vector<int32_t> tcopy(targets.begin(), targets.end());
    detail::attach(out, {logits}, [ln, probs, tcopy = std::move(tcopy), n, v, count, ignore_index](Node<T>& self) {
        ln->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(count);
        T* dl = ln->grad.data();
        for (int r = 0; r < n; ++r) {
            if (tcopy[r] == ignore_index) continue;
            const T* prow = probs->data() + static_cast<size_t>(r) * v;
            T* drow = dl + static_cast<size_t>(r) * v;
            for (int j = 0; j < v; ++j) drow[j] += g * prow[j];
            drow[tcopy[r]] -= g;
        }
    });
    return out;
}

}  // namespace modmoe
