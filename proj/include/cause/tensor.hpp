#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace cause {

// Dense row-major matrices with reverse-mode autodiff. A Tensor is a value
// type sharing storage; an op whose input is tracked records a tape node
// holding the backward closure. backward(loss) replays nodes in reverse
// creation order, which is a valid reverse-topological order because every
// node is created after its inputs.
//
// The op set is fixed and closed; there is no general broadcasting beyond
// row-wise bias add. Scalars are 1x1 tensors.

namespace detail {

inline thread_local bool grad_enabled = true;
inline thread_local bool checked_mode = false;
inline thread_local std::int64_t next_node_id = 0;

}  // namespace detail

inline void set_checked_mode(bool on) { detail::checked_mode = on; }
inline bool checked_mode() { return detail::checked_mode; }

// Disables graph construction for the guarded scope (inference, timing).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct TapeNode {
    std::int64_t id = 0;
    std::function<void()> backprop;
    std::vector<std::shared_ptr<TapeNode<T>>> parents;
};

template <class T>
class Tensor {
public:
    using Storage = std::vector<T>;

    Tensor() = default;

    Tensor(std::int64_t rows, std::int64_t cols)
        : rows_(rows), cols_(cols), data_(std::make_shared<Storage>(static_cast<std::size_t>(rows * cols), T(0))) {
        if (rows < 0 || cols < 0) throw std::invalid_argument("tensor: negative shape");
    }

    static Tensor from_data(std::int64_t rows, std::int64_t cols, Storage values) {
        if (static_cast<std::size_t>(rows * cols) != values.size()) {
            throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(rows, cols));
        }
        Tensor t;
        t.rows_ = rows;
        t.cols_ = cols;
        t.data_ = std::make_shared<Storage>(std::move(values));
        if (detail::checked_mode) t.check_finite("from_data");
        return t;
    }

    static Tensor scalar(T v) { return from_data(1, 1, {v}); }

    std::int64_t rows() const { return rows_; }
    std::int64_t cols() const { return cols_; }
    std::int64_t size() const { return rows_ * cols_; }
    bool empty() const { return data_ == nullptr || size() == 0; }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    T& at(std::int64_t r, std::int64_t c) { return (*data_)[static_cast<std::size_t>(r * cols_ + c)]; }
    T at(std::int64_t r, std::int64_t c) const { return (*data_)[static_cast<std::size_t>(r * cols_ + c)]; }
    T item() const {
        if (size() != 1) throw std::invalid_argument("item: tensor is not scalar, shape " + shape_str(rows_, cols_));
        return (*data_)[0];
    }

    // Marks this tensor as a leaf whose gradient should be accumulated.
    Tensor& set_requires_grad() {
        if (!grad_) grad_ = std::make_shared<Storage>(static_cast<std::size_t>(size()), T(0));
        return *this;
    }

    bool tracked() const { return grad_ != nullptr; }
    T* grad() { return grad_->data(); }
    const T* grad() const { return grad_->data(); }
    T grad_at(std::int64_t r, std::int64_t c) const { return (*grad_)[static_cast<std::size_t>(r * cols_ + c)]; }

    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
    }

    void check_finite(const char* op) const {
        for (T v : *data_) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw std::runtime_error(std::string(op) + ": non-finite value in tensor of shape " +
                                         shape_str(rows_, cols_));
            }
        }
    }

    static std::string shape_str(std::int64_t r, std::int64_t c) {
        return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
    }
    std::string shape_str() const { return shape_str(rows_, cols_); }

    // Internal graph plumbing, public for the free-function ops.
    std::shared_ptr<Storage> data_ptr() const { return data_; }
    std::shared_ptr<Storage> grad_ptr() const { return grad_; }
    std::shared_ptr<TapeNode<T>> node() const { return node_; }
    void set_node(std::shared_ptr<TapeNode<T>> n) { node_ = std::move(n); }

private:
    std::int64_t rows_ = 0;
    std::int64_t cols_ = 0;
    std::shared_ptr<Storage> data_;
    std::shared_ptr<Storage> grad_;
    std::shared_ptr<TapeNode<T>> node_;
};

namespace detail {

template <class T>
bool any_tracked(std::initializer_list<const Tensor<T>*> ins) {
    if (!grad_enabled) return false;
    for (const auto* t : ins) {
        if (t->tracked()) return true;
    }
    return false;
}

// Attaches a tape node to `out` if tracking is active. `parents` are the
// nodes of tracked inputs (leaves contribute no node but their grad buffers
// are captured inside `fn`).
template <class T>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> ins, std::function<void()> fn) {
    out.set_requires_grad();
    auto node = std::make_shared<TapeNode<T>>();
    node->id = next_node_id++;
    node->backprop = std::move(fn);
    for (const auto* t : ins) {
        if (t->node()) node->parents.push_back(t->node());
    }
    out.set_node(std::move(node));
}

template <class T>
void check_out(const Tensor<T>& out, const char* op) {
    if (checked_mode) out.check_finite(op);
}

// C[m,n] (+)= op(A) * op(B) with optional transposes; row-major throughout.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
          bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    if (!trans_a && !trans_b) {
        // A[m,k] * B[k,n]
        for (std::int64_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (std::int64_t p = 0; p < k; ++p) {
                const T av = arow[p];
                if (av == T(0)) continue;
                const T* brow = b + p * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // A[m,k] * B^T, B[n,k]
        for (std::int64_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = T(0);
                for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // A^T, A[k,m] * B[k,n]
        for (std::int64_t p = 0; p < k; ++p) {
            const T* arow = a + p * m;
            const T* brow = b + p * n;
            for (std::int64_t i = 0; i < m; ++i) {
                const T av = arow[i];
                if (av == T(0)) continue;
                T* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        // A^T * B^T, A[k,m], B[n,k]
        for (std::int64_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = T(0);
                for (std::int64_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
                crow[j] += acc;
            }
        }
    }
}

}  // namespace detail

// Sentinel for "masked out" entries of an additive softmax mask.
template <class T>
constexpr T mask_off = T(-1e30);

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false) {
    const std::int64_t m = trans_a ? a.cols() : a.rows();
    const std::int64_t ka = trans_a ? a.rows() : a.cols();
    const std::int64_t kb = trans_b ? b.cols() : b.rows();
    const std::int64_t n = trans_b ? b.rows() : b.cols();
    if (ka != kb) {
        throw std::invalid_argument("matmul: shape mismatch " + a.shape_str() + (trans_a ? "^T" : "") + " * " +
                                    b.shape_str() + (trans_b ? "^T" : ""));
    }
    Tensor<T> out(m, n);
    detail::gemm(trans_a, trans_b, m, n, ka, a.data(), b.data(), out.data(), false);
    detail::check_out(out, "matmul");

    if (detail::any_tracked<T>({&a, &b})) {
        auto ad = a.data_ptr(), bd = b.data_ptr();
        auto ag = a.grad_ptr(), bg = b.grad_ptr();
        const std::int64_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
        detail::attach(out, {&a, &b}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            const T* g = og->data();
            if (ag) {
                if (!trans_a && !trans_b) detail::gemm(false, true, ar, ac, n, g, bd->data(), ag->data(), true);   // dA = G B^T
                else if (!trans_a && trans_b) detail::gemm(false, false, ar, ac, n, g, bd->data(), ag->data(), true);  // dA = G B
                else if (trans_a && !trans_b) detail::gemm(false, true, ar, ac, n, bd->data(), g, ag->data(), true);   // dA = B G^T
                else detail::gemm(true, true, ar, ac, n, bd->data(), g, ag->data(), true);  // dA = B^T G^T
            }
            if (bg) {
                if (!trans_a && !trans_b) detail::gemm(true, false, br, bc, m, ad->data(), g, bg->data(), true);   // dB = A^T G
                else if (!trans_a && trans_b) detail::gemm(true, false, br, bc, m, g, ad->data(), bg->data(), true);   // dB = G^T A
                else if (trans_a && !trans_b) detail::gemm(false, false, br, bc, m, ad->data(), g, bg->data(), true);  // dB = A G
                else detail::gemm(true, true, br, bc, m, g, ad->data(), bg->data(), true);  // dB = G^T A^T
            }
        };
    }
    return out;
}

namespace detail {

template <class T, class Fwd, class DLhs, class DRhs>
Tensor<T> elementwise_binary(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DLhs dl, DRhs dr) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(name) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> out(a.rows(), a.cols());
    const std::int64_t sz = a.size();
    for (std::int64_t i = 0; i < sz; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
    check_out(out, name);
    if (any_tracked<T>({&a, &b})) {
        auto ad = a.data_ptr(), bd = b.data_ptr(), ag = a.grad_ptr(), bg = b.grad_ptr();
        attach(out, {&a, &b}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < sz; ++i) {
                const T g = (*og)[i];
                if (ag) (*ag)[i] += dl((*ad)[i], (*bd)[i]) * g;
                if (bg) (*bg)[i] += dr((*ad)[i], (*bd)[i]) * g;
            }
        };
    }
    return out;
}

template <class T, class Fwd, class Deriv>
Tensor<T> elementwise_unary(const char* name, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
    Tensor<T> out(a.rows(), a.cols());
    const std::int64_t sz = a.size();
    for (std::int64_t i = 0; i < sz; ++i) out.data()[i] = fwd(a.data()[i]);
    check_out(out, name);
    if (any_tracked<T>({&a})) {
        auto ad = a.data_ptr(), ag = a.grad_ptr();
        attach(out, {&a}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < sz; ++i) (*ag)[i] += deriv((*ad)[i]) * (*og)[i];
        };
    }
    return out;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::elementwise_binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::elementwise_unary<T>(
        "scale", a, [s](T x) { return x * s; }, [s](T) { return s; });
}

template <class T>
Tensor<T> log_elem(const Tensor<T>& a) {
    return detail::elementwise_unary<T>(
        "log", a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

template <class T>
Tensor<T> exp_elem(const Tensor<T>& a) {
    return detail::elementwise_unary<T>(
        "exp", a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt2pi = T(0.39894228040143267794);
    return detail::elementwise_unary<T>(
        "gelu", a,
        [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [=](T x) {
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        });
}

// Row-wise broadcast add: a[m,n] + bias[1,n].
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) {
        throw std::invalid_argument("add_rowvec: bias " + bias.shape_str() + " does not match " + a.shape_str());
    }
    const std::int64_t m = a.rows(), n = a.cols();
    Tensor<T> out(m, n);
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) out.at(i, j) = a.at(i, j) + bias.at(0, j);
    }
    detail::check_out(out, "add_rowvec");
    if (detail::any_tracked<T>({&a, &bias})) {
        auto ag = a.grad_ptr(), bg = bias.grad_ptr();
        detail::attach(out, {&a, &bias}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) {
                    const T g = (*og)[static_cast<std::size_t>(i * n + j)];
                    if (ag) (*ag)[static_cast<std::size_t>(i * n + j)] += g;
                    if (bg) (*bg)[static_cast<std::size_t>(j)] += g;
                }
            }
        };
    }
    return out;
}

// Mean over rows for each column: a[m,n] -> [1,n].
template <class T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty tensor");
    const std::int64_t m = a.rows(), n = a.cols();
    Tensor<T> out(1, n);
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) out.at(0, j) += a.at(i, j);
    }
    for (std::int64_t j = 0; j < n; ++j) out.at(0, j) /= T(m);
    detail::check_out(out, "mean_rows");
    if (detail::any_tracked<T>({&a})) {
        auto ag = a.grad_ptr();
        detail::attach(out, {&a}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            const T inv = T(1) / T(m);
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) (*ag)[static_cast<std::size_t>(i * n + j)] += (*og)[static_cast<std::size_t>(j)] * inv;
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Tensor<T> out(1, 1);
    T acc = T(0);
    for (std::int64_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    detail::check_out(out, "sum");
    if (detail::any_tracked<T>({&a})) {
        auto ag = a.grad_ptr();
        const std::int64_t sz = a.size();
        detail::attach(out, {&a}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            const T g = (*og)[0];
            for (std::int64_t i = 0; i < sz; ++i) (*ag)[i] += g;
        };
    }
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
    return scale(sum_all(a), T(1) / T(a.size()));
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const std::int64_t n = parts.front().cols();
    std::int64_t m = 0;
    for (const auto& p : parts) {
        if (p.cols() != n) {
            throw std::invalid_argument("concat: column mismatch " + p.shape_str() + " vs [?x" + std::to_string(n) + "]");
        }
        m += p.rows();
    }
    Tensor<T> out(m, n);
    std::int64_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), out.data() + row * n);
        row += p.rows();
    }
    detail::check_out(out, "concat");
    bool tracked = false;
    if (detail::grad_enabled) {
        for (const auto& p : parts) tracked = tracked || p.tracked();
    }
    if (tracked) {
        std::vector<std::shared_ptr<typename Tensor<T>::Storage>> grads;
        std::vector<std::int64_t> offsets, sizes;
        std::int64_t off = 0;
        for (const auto& p : parts) {
            grads.push_back(p.grad_ptr());
            offsets.push_back(off);
            sizes.push_back(p.size());
            off += p.size();
        }
        out.set_requires_grad();
        auto node = std::make_shared<TapeNode<T>>();
        node->id = detail::next_node_id++;
        for (const auto& p : parts) {
            if (p.node()) node->parents.push_back(p.node());
        }
        auto og = out.grad_ptr();
        node->backprop = [=]() {
            for (std::size_t i = 0; i < grads.size(); ++i) {
                if (!grads[i]) continue;
                const T* g = og->data() + offsets[i];
                for (std::int64_t j = 0; j < sizes[i]; ++j) (*grads[i])[j] += g[j];
            }
        };
        out.set_node(std::move(node));
    }
    return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::int64_t r0, std::int64_t r1) {
    if (r0 < 0 || r1 > a.rows() || r0 > r1) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                    ") out of " + a.shape_str());
    }
    const std::int64_t n = a.cols(), m = r1 - r0;
    Tensor<T> out(m, n);
    std::copy(a.data() + r0 * n, a.data() + r1 * n, out.data());
    if (detail::any_tracked<T>({&a})) {
        auto ag = a.grad_ptr();
        detail::attach(out, {&a}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < m * n; ++i) (*ag)[static_cast<std::size_t>(r0 * n + i)] += (*og)[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::int64_t c0, std::int64_t c1) {
    if (c0 < 0 || c1 > a.cols() || c0 > c1) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                    ") out of " + a.shape_str());
    }
    const std::int64_t m = a.rows(), n = a.cols(), w = c1 - c0;
    Tensor<T> out(m, w);
    for (std::int64_t i = 0; i < m; ++i) {
        std::copy(a.data() + i * n + c0, a.data() + i * n + c1, out.data() + i * w);
    }
    if (detail::any_tracked<T>({&a})) {
        auto ag = a.grad_ptr();
        detail::attach(out, {&a}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < w; ++j) (*ag)[static_cast<std::size_t>(i * n + c0 + j)] += (*og)[static_cast<std::size_t>(i * w + j)];
            }
        };
    }
    return out;
}

// Embedding lookup: rows of `table` selected by `ids`; backward scatter-adds,
// so repeated ids accumulate.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::int64_t>& ids) {
    const std::int64_t n = table.cols();
    Tensor<T> out(static_cast<std::int64_t>(ids.size()), n);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const std::int64_t id = ids[i];
        if (id < 0 || id >= table.rows()) {
            throw std::invalid_argument("gather_rows: id " + std::to_string(id) + " out of " + table.shape_str());
        }
        std::copy(table.data() + id * n, table.data() + (id + 1) * n, out.data() + static_cast<std::int64_t>(i) * n);
    }
    if (detail::any_tracked<T>({&table})) {
        auto tg = table.grad_ptr();
        detail::attach(out, {&table}, std::function<void()>());
        auto og = out.grad_ptr();
        auto ids_copy = ids;
        out.node()->backprop = [=]() {
            for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                const T* g = og->data() + static_cast<std::int64_t>(i) * n;
                T* dst = tg->data() + ids_copy[i] * n;
                for (std::int64_t j = 0; j < n; ++j) dst[j] += g[j];
            }
        };
    }
    return out;
}

// Grouped embedding pooling: row g of the output is the mean of the table
// rows listed in groups[g] (empty group -> zero row). Backward scatter-adds
// grad/|group| into each member row.
template <class T>
Tensor<T> gather_mean_rows(const Tensor<T>& table, const std::vector<std::vector<std::int64_t>>& groups) {
    const std::int64_t n = table.cols();
    Tensor<T> out(static_cast<std::int64_t>(groups.size()), n);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (groups[g].empty()) continue;
        T* dst = out.data() + static_cast<std::int64_t>(g) * n;
        for (std::int64_t id : groups[g]) {
            if (id < 0 || id >= table.rows()) {
                throw std::invalid_argument("gather_mean_rows: id " + std::to_string(id) + " out of " +
                                            table.shape_str());
            }
            const T* src = table.data() + id * n;
            for (std::int64_t j = 0; j < n; ++j) dst[j] += src[j];
        }
        const T inv = T(1) / static_cast<T>(groups[g].size());
        for (std::int64_t j = 0; j < n; ++j) dst[j] *= inv;
    }
    detail::check_out(out, "gather_mean_rows");
    if (detail::any_tracked<T>({&table})) {
        auto tg = table.grad_ptr();
        auto groups_copy = std::make_shared<std::vector<std::vector<std::int64_t>>>(groups);
        detail::attach(out, {&table}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::size_t g = 0; g < groups_copy->size(); ++g) {
                const auto& ids = (*groups_copy)[g];
                if (ids.empty()) continue;
                const T inv = T(1) / static_cast<T>(ids.size());
                const T* grow = og->data() + static_cast<std::int64_t>(g) * n;
                for (std::int64_t id : ids) {
                    T* dst = tg->data() + id * n;
                    for (std::int64_t j = 0; j < n; ++j) dst[j] += grow[j] * inv;
                }
            }
        };
    }
    return out;
}

// Row-wise softmax with an additive mask of {0, mask_off}. Fully-masked rows
// produce all-zero output so padded positions stay inert.
template <class T>
Tensor<T> softmax_masked(const Tensor<T>& a, const Tensor<T>& mask) {
    if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
        throw std::invalid_argument("softmax_masked: mask " + mask.shape_str() + " vs input " + a.shape_str());
    }
    const std::int64_t m = a.rows(), n = a.cols();
    Tensor<T> out(m, n);
    for (std::int64_t i = 0; i < m; ++i) {
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < n; ++j) {
            if (mask.at(i, j) == T(0)) maxv = std::max(maxv, a.at(i, j));
        }
        if (maxv == -std::numeric_limits<T>::infinity()) continue;  // fully masked row
        T sum = T(0);
        for (std::int64_t j = 0; j < n; ++j) {
            if (mask.at(i, j) == T(0)) {
                const T e = std::exp(a.at(i, j) - maxv);
                out.at(i, j) = e;
                sum += e;
            }
        }
        for (std::int64_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    detail::check_out(out, "softmax_masked");
    if (detail::any_tracked<T>({&a})) {
        auto ag = a.grad_ptr();
        auto od = out.data_ptr();
        detail::attach(out, {&a}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < m; ++i) {
                T dot = T(0);
                for (std::int64_t j = 0; j < n; ++j) dot += (*od)[static_cast<std::size_t>(i * n + j)] * (*og)[static_cast<std::size_t>(i * n + j)];
                for (std::int64_t j = 0; j < n; ++j) {
                    const T p = (*od)[static_cast<std::size_t>(i * n + j)];
                    (*ag)[static_cast<std::size_t>(i * n + j)] += p * ((*og)[static_cast<std::size_t>(i * n + j)] - dot);
                }
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    Tensor<T> no_mask(a.rows(), a.cols());
    return softmax_masked(a, no_mask);
}

// Row-wise layer norm with learned gain/bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (gamma.rows() != 1 || gamma.cols() != x.cols() || beta.rows() != 1 || beta.cols() != x.cols()) {
        throw std::invalid_argument("layer_norm: parameter shapes " + gamma.shape_str() + "/" + beta.shape_str() +
                                    " do not match " + x.shape_str());
    }
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor<T> out(m, n);
    auto xhat = std::make_shared<typename Tensor<T>::Storage>(static_cast<std::size_t>(m * n));
    auto inv_sigma = std::make_shared<typename Tensor<T>::Storage>(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        T mean = T(0);
        for (std::int64_t j = 0; j < n; ++j) mean += x.at(i, j);
        mean /= T(n);
        T var = T(0);
        for (std::int64_t j = 0; j < n; ++j) {
            const T d = x.at(i, j) - mean;
            var += d * d;
        }
        var /= T(n);
        const T inv = T(1) / std::sqrt(var + eps);
        (*inv_sigma)[i] = inv;
        for (std::int64_t j = 0; j < n; ++j) {
            const T h = (x.at(i, j) - mean) * inv;
            (*xhat)[static_cast<std::size_t>(i * n + j)] = h;
            out.at(i, j) = h * gamma.at(0, j) + beta.at(0, j);
        }
    }
    detail::check_out(out, "layer_norm");
    if (detail::any_tracked<T>({&x, &gamma, &beta})) {
        auto xg = x.grad_ptr(), gg = gamma.grad_ptr(), bg = beta.grad_ptr();
        auto gd = gamma.data_ptr();
        detail::attach(out, {&x, &gamma, &beta}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < m; ++i) {
                const T* grow = og->data() + i * n;
                const T* hrow = xhat->data() + i * n;
                T sum_gy = T(0), sum_gyh = T(0);
                for (std::int64_t j = 0; j < n; ++j) {
                    const T gy = grow[j] * (*gd)[static_cast<std::size_t>(j)];
                    sum_gy += gy;
                    sum_gyh += gy * hrow[j];
                }
                if (xg) {
                    const T inv = (*inv_sigma)[i];
                    for (std::int64_t j = 0; j < n; ++j) {
                        const T gy = grow[j] * (*gd)[static_cast<std::size_t>(j)];
                        (*xg)[static_cast<std::size_t>(i * n + j)] += inv * (gy - sum_gy / T(n) - hrow[j] * sum_gyh / T(n));
                    }
                }
                for (std::int64_t j = 0; j < n; ++j) {
                    if (gg) (*gg)[static_cast<std::size_t>(j)] += grow[j] * hrow[j];
                    if (bg) (*bg)[static_cast<std::size_t>(j)] += grow[j];
                }
            }
        };
    }
    return out;
}

// Fused causal multi-head scaled dot-product attention over a flattened
// batch: q/k/v are [B*L, D] with suffix padding inside each length-L block.
// Position t of a block attends to positions [0, t] of the same block.
template <class T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::int64_t n_heads,
                           std::int64_t seq_len) {
    const std::int64_t rows = q.rows(), dim = q.cols();
    if (k.rows() != rows || v.rows() != rows || k.cols() != dim || v.cols() != dim) {
        throw std::invalid_argument("causal_attention: q/k/v shapes differ " + q.shape_str() + " " + k.shape_str() +
                                    " " + v.shape_str());
    }
    if (seq_len <= 0 || rows % seq_len != 0) {
        throw std::invalid_argument("causal_attention: rows " + std::to_string(rows) + " not a multiple of seq_len " +
                                    std::to_string(seq_len));
    }
    if (n_heads <= 0 || dim % n_heads != 0) {
        throw std::invalid_argument("causal_attention: dim " + std::to_string(dim) + " not divisible by heads " +
                                    std::to_string(n_heads));
    }
    const std::int64_t batch = rows / seq_len;
    const std::int64_t dh = dim / n_heads;
    const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

    const bool tracked = detail::any_tracked<T>({&q, &k, &v});
    Tensor<T> out(rows, dim);

    // probs layout: [batch][head][t][s], lower-triangular rows; only
    // materialized when a backward pass will need it.
    std::shared_ptr<typename Tensor<T>::Storage> probs;
    if (tracked) probs = std::make_shared<typename Tensor<T>::Storage>(static_cast<std::size_t>(batch * n_heads * seq_len * seq_len), T(0));

    std::vector<T> scores(static_cast<std::size_t>(seq_len));
    for (std::int64_t b = 0; b < batch; ++b) {
        const std::int64_t base = b * seq_len;
        for (std::int64_t h = 0; h < n_heads; ++h) {
            const std::int64_t c0 = h * dh;
            for (std::int64_t t = 0; t < seq_len; ++t) {
                const T* qrow = q.data() + (base + t) * dim + c0;
                T maxv = -std::numeric_limits<T>::infinity();
                for (std::int64_t s = 0; s <= t; ++s) {
                    const T* krow = k.data() + (base + s) * dim + c0;
                    T acc = T(0);
                    for (std::int64_t j = 0; j < dh; ++j) acc += qrow[j] * krow[j];
                    scores[s] = acc * att_scale;
                    maxv = std::max(maxv, scores[s]);
                }
                T sum = T(0);
                for (std::int64_t s = 0; s <= t; ++s) {
                    scores[s] = std::exp(scores[s] - maxv);
                    sum += scores[s];
                }
                T* orow = out.data() + (base + t) * dim + c0;
                for (std::int64_t s = 0; s <= t; ++s) {
                    const T p = scores[s] / sum;
                    if (tracked) (*probs)[static_cast<std::size_t>(((b * n_heads + h) * seq_len + t) * seq_len + s)] = p;
                    const T* vrow = v.data() + (base + s) * dim + c0;
                    for (std::int64_t j = 0; j < dh; ++j) orow[j] += p * vrow[j];
                }
            }
        }
    }
    detail::check_out(out, "causal_attention");

    if (tracked) {
        auto qd = q.data_ptr(), kd = k.data_ptr(), vd = v.data_ptr();
        auto qg = q.grad_ptr(), kg = k.grad_ptr(), vg = v.grad_ptr();
        detail::attach(out, {&q, &k, &v}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            std::vector<T> dprob(static_cast<std::size_t>(seq_len));
            for (std::int64_t b = 0; b < batch; ++b) {
                const std::int64_t base = b * seq_len;
                for (std::int64_t h = 0; h < n_heads; ++h) {
                    const std::int64_t c0 = h * dh;
                    for (std::int64_t t = 0; t < seq_len; ++t) {
                        const T* grow = og->data() + (base + t) * dim + c0;
                        const T* prow = probs->data() + ((b * n_heads + h) * seq_len + t) * seq_len;
                        // dV and dP
                        T pdot = T(0);
                        for (std::int64_t s = 0; s <= t; ++s) {
                            const T* vrow = vd->data() + (base + s) * dim + c0;
                            T acc = T(0);
                            for (std::int64_t j = 0; j < dh; ++j) acc += grow[j] * vrow[j];
                            dprob[s] = acc;
                            pdot += prow[s] * acc;
                            if (vg) {
                                T* dvrow = vg->data() + (base + s) * dim + c0;
                                for (std::int64_t j = 0; j < dh; ++j) dvrow[j] += prow[s] * grow[j];
                            }
                        }
                        // dS = P .* (dP - sum(P .* dP)), then into q/k
                        const T* qrow = qd->data() + (base + t) * dim + c0;
                        for (std::int64_t s = 0; s <= t; ++s) {
                            const T ds = prow[s] * (dprob[s] - pdot) * att_scale;
                            if (ds == T(0)) continue;
                            const T* krow = kd->data() + (base + s) * dim + c0;
                            if (qg) {
                                T* dqrow = qg->data() + (base + t) * dim + c0;
                                for (std::int64_t j = 0; j < dh; ++j) dqrow[j] += ds * krow[j];
                            }
                            if (kg) {
                                T* dkrow = kg->data() + (base + s) * dim + c0;
                                for (std::int64_t j = 0; j < dh; ++j) dkrow[j] += ds * qrow[j];
                            }
                        }
                    }
                }
            }
        };
    }
    return out;
}

// Sampled dot-product scores: logits[p][c] = <queries[p], table[ids[p][c]]> / tau.
// Shared machinery for the InfoNCE head and candidate scoring.
template <class T>
Tensor<T> sampled_scores(const Tensor<T>& queries, const Tensor<T>& table,
                         const std::vector<std::vector<std::int64_t>>& ids, T tau) {
    if (tau <= T(0)) throw std::invalid_argument("sampled_scores: tau must be positive");
    const std::int64_t p_count = queries.rows(), dim = queries.cols();
    if (table.cols() != dim) {
        throw std::invalid_argument("sampled_scores: table " + table.shape_str() + " vs queries " + queries.shape_str());
    }
    if (static_cast<std::int64_t>(ids.size()) != p_count) {
        throw std::invalid_argument("sampled_scores: ids count " + std::to_string(ids.size()) + " vs rows " +
                                    std::to_string(p_count));
    }
    const std::int64_t width = p_count > 0 ? static_cast<std::int64_t>(ids.front().size()) : 0;
    Tensor<T> out(p_count, width);
    const T inv_tau = T(1) / tau;
    for (std::int64_t p = 0; p < p_count; ++p) {
        if (static_cast<std::int64_t>(ids[p].size()) != width) {
            throw std::invalid_argument("sampled_scores: ragged candidate lists");
        }
        const T* qrow = queries.data() + p * dim;
        for (std::int64_t c = 0; c < width; ++c) {
            const std::int64_t id = ids[p][c];
            if (id < 0 || id >= table.rows()) {
                throw std::invalid_argument("sampled_scores: id " + std::to_string(id) + " out of " + table.shape_str());
            }
            const T* trow = table.data() + id * dim;
            T acc = T(0);
            for (std::int64_t j = 0; j < dim; ++j) acc += qrow[j] * trow[j];
            out.at(p, c) = acc * inv_tau;
        }
    }
    detail::check_out(out, "sampled_scores");
    if (detail::any_tracked<T>({&queries, &table})) {
        auto qd = queries.data_ptr(), td = table.data_ptr();
        auto qg = queries.grad_ptr(), tg = table.grad_ptr();
        auto ids_copy = std::make_shared<std::vector<std::vector<std::int64_t>>>(ids);
        detail::attach(out, {&queries, &table}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t p = 0; p < p_count; ++p) {
                const T* qrow = qd->data() + p * dim;
                for (std::int64_t c = 0; c < width; ++c) {
                    const T g = (*og)[static_cast<std::size_t>(p * width + c)] * inv_tau;
                    if (g == T(0)) continue;
                    const std::int64_t id = (*ids_copy)[p][c];
                    const T* trow = td->data() + id * dim;
                    if (qg) {
                        T* dq = qg->data() + p * dim;
                        for (std::int64_t j = 0; j < dim; ++j) dq[j] += g * trow[j];
                    }
                    if (tg) {
                        T* dt = tg->data() + id * dim;
                        for (std::int64_t j = 0; j < dim; ++j) dt[j] += g * qrow[j];
                    }
                }
            }
        };
    }
    return out;
}

// Per-row softmax cross-entropy against integer labels, stabilized by
// max-logit subtraction. Returns an [m,1] column of losses.
template <class T>
Tensor<T> cross_entropy_rows(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
    const std::int64_t m = logits.rows(), n = logits.cols();
    if (static_cast<std::int64_t>(labels.size()) != m) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                    std::to_string(m) + " rows");
    }
    Tensor<T> out(m, 1);
    auto probs = std::make_shared<typename Tensor<T>::Storage>(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i) {
        if (labels[i] < 0 || labels[i] >= n) {
            throw std::invalid_argument("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
                                        std::to_string(n) + ")");
        }
        T maxv = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < n; ++j) maxv = std::max(maxv, logits.at(i, j));
        T sum = T(0);
        for (std::int64_t j = 0; j < n; ++j) {
            const T e = std::exp(logits.at(i, j) - maxv);
            (*probs)[static_cast<std::size_t>(i * n + j)] = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < n; ++j) (*probs)[static_cast<std::size_t>(i * n + j)] /= sum;
        out.at(i, 0) = std::log(sum) + maxv - logits.at(i, labels[i]);
    }
    detail::check_out(out, "cross_entropy");
    if (detail::any_tracked<T>({&logits})) {
        auto lg = logits.grad_ptr();
        auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels);
        detail::attach(out, {&logits}, std::function<void()>());
        auto og = out.grad_ptr();
        out.node()->backprop = [=]() {
            for (std::int64_t i = 0; i < m; ++i) {
                const T g = (*og)[static_cast<std::size_t>(i)];
                if (g == T(0)) continue;
                for (std::int64_t j = 0; j < n; ++j) {
                    T d = (*probs)[static_cast<std::size_t>(i * n + j)];
                    if (j == (*labels_copy)[i]) d -= T(1);
                    (*lg)[static_cast<std::size_t>(i * n + j)] += g * d;
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class T>
void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + loss.shape_str());
    if (!loss.node()) throw std::invalid_argument("backward: loss is not connected to the tape");
    (*loss.grad_ptr())[0] = T(1);

    // Collect reachable nodes, then replay in descending creation order.
    std::vector<std::shared_ptr<TapeNode<T>>> nodes;
    std::vector<TapeNode<T>*> stack{loss.node().get()};
    std::vector<const TapeNode<T>*> seen;
    nodes.push_back(loss.node());
    seen.push_back(loss.node().get());
    while (!stack.empty()) {
        TapeNode<T>* cur = stack.back();
        stack.pop_back();
        for (const auto& p : cur->parents) {
            if (std::find(seen.begin(), seen.end(), p.get()) == seen.end()) {
                seen.push_back(p.get());
                nodes.push_back(p);
                stack.push_back(p.get());
            }
        }
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });
    for (auto& n : nodes) n->backprop();
}

// ---------------------------------------------------------------------------
// gradient verification
// ---------------------------------------------------------------------------

// Central-difference check of analytic gradients for a scalar-valued function
// of the given leaves. Returns the max relative error over all coordinates,
// with denominator max(|analytic|, |numeric|, 1e-8).
template <class T, class F>
double finite_diff_check(F f, std::vector<Tensor<T>*> leaves, double eps = 1e-5) {
    for (auto* leaf : leaves) {
        leaf->set_requires_grad();
        leaf->zero_grad();
    }
    {
        Tensor<T> loss = f();
        backward(loss);
    }
    double max_err = 0.0;
    for (auto* leaf : leaves) {
        for (std::int64_t i = 0; i < leaf->size(); ++i) {
            const T saved = leaf->data()[i];
            leaf->data()[i] = saved + static_cast<T>(eps);
            double up, down;
            {
                NoGradGuard ng;
                up = static_cast<double>(f().item());
                leaf->data()[i] = saved - static_cast<T>(eps);
                down = static_cast<double>(f().item());
            }
            leaf->data()[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double analytic = static_cast<double>(leaf->grad()[i]);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            max_err = std::max(max_err, std::abs(analytic - numeric) / denom);
        }
    }
    return max_err;
}

}  // namespace cause
