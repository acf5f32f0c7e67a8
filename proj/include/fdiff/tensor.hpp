#ifndef FDIFF_TENSOR_HPP
#define FDIFF_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fdiff/errors.hpp"
#include "fdiff/rng.hpp"

namespace fdiff {

// Dense row-major tensor with a reverse-mode tape. A Tensor is a cheap value
// handle; copies share storage. Results of ops carry a Node linking back to
// their inputs; backward() walks the tape once in reverse topological order.
// Scalar type is a template parameter: float for training/sampling, double
// for gradient checks.

template <typename T>
struct Tensor;

template <typename T>
struct Node {
    std::vector<Tensor<T>> parents;
    // Receives the op result (with its grad populated) and accumulates into
    // parents' grads.
    std::function<void(const Tensor<T>&)> backward;
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = prev; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<std::vector<T>> grad;  // allocated when requires_grad
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node;

    Tensor() = default;

    size_t numel() const { return data ? data->size() : 0; }
    int dim(int i) const { return shape[i < 0 ? shape.size() + i : i]; }
    int ndim() const { return static_cast<int>(shape.size()); }
    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T* gptr() { return grad->data(); }
    const std::vector<T>& vals() const { return *data; }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        t.shape = std::move(shape);
        for (int d : t.shape)
            if (d <= 0) throw DimError("tensor extent must be positive, got shape " + shape_str(t.shape));
        t.data = std::make_shared<std::vector<T>>(shape_numel(t.shape), T(0));
        t.requires_grad = requires_grad;
        if (requires_grad) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
        return t;
    }

    static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (values.size() != t.numel())
            throw DimError("from_data: " + std::to_string(values.size()) + " values for shape " + shape_str(t.shape));
        *t.data = std::move(values);
        return t;
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }

    void ensure_grad() {
        if (!grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
    }

    bool finite() const {
        for (T v : *data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

// i.i.d. standard normals; advances rng deterministically.
template <typename T>
Tensor<T> normal_draw(Rng& rng, std::vector<int> shape) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    rng.normal_fill(*t.data);
    return t;
}

namespace detail {

template <typename T>
Tensor<T> make_result(std::vector<int> shape, std::vector<Tensor<T>> parents,
                      std::function<void(const Tensor<T>&)> bw) {
    Tensor<T> out = Tensor<T>::zeros(std::move(shape));
    bool need = false;
    if (grad_enabled())
        for (const auto& p : parents)
            if (p.requires_grad) need = true;
    if (need) {
        out.requires_grad = true;
        out.grad = std::make_shared<std::vector<T>>(out.data->size(), T(0));
        out.node = std::make_shared<Node<T>>();
        out.node->parents = std::move(parents);
        out.node->backward = std::move(bw);
    }
    return out;
}

template <typename T>
std::vector<T>* grad_of(const Tensor<T>& out, size_t parent_idx) {
    Tensor<T>& p = const_cast<Tensor<T>&>(out.node->parents[parent_idx]);
    if (!p.requires_grad) return nullptr;
    p.ensure_grad();
    return p.grad.get();
}

// C(m,n) += A(m,k) * B(k,n)
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<size_t>(i) * k;
        T* cr = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = ar[p];
            if (av == T(0)) continue;
            const T* br = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<size_t>(i) * k;
        T* cr = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T* br = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] += acc;
        }
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* ar = a + static_cast<size_t>(i) * k;
        const T* br = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = ar[p];
            if (av == T(0)) continue;
            T* cr = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw DimError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>(a.shape, {a, b}, [](const Tensor<T>& o) {
        for (size_t pi = 0; pi < 2; ++pi)
            if (auto* g = detail::grad_of(o, pi))
                for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += (*o.grad)[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw DimError("sub: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>(a.shape, {a, b}, [](const Tensor<T>& o) {
        if (auto* g = detail::grad_of(o, 0))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += (*o.grad)[i];
        if (auto* g = detail::grad_of(o, 1))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] -= (*o.grad)[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] - (*b.data)[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw DimError("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<T> out = detail::make_result<T>(a.shape, {a, b}, [](const Tensor<T>& o) {
        const auto& av = *o.node->parents[0].data;
        const auto& bv = *o.node->parents[1].data;
        if (auto* g = detail::grad_of(o, 0))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += (*o.grad)[i] * bv[i];
        if (auto* g = detail::grad_of(o, 1))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += (*o.grad)[i] * av[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = detail::make_result<T>(a.shape, {a}, [c](const Tensor<T>& o) {
        if (auto* g = detail::grad_of(o, 0))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += c * (*o.grad)[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = c * (*a.data)[i];
    return out;
}

// x + p where p.shape equals a trailing suffix of x.shape (bias over the last
// axis, positional tables over the last two, ...).
template <typename T>
Tensor<T> add_broadcast(const Tensor<T>& x, const Tensor<T>& p) {
    if (p.ndim() > x.ndim())
        throw DimError("add_broadcast: " + shape_str(p.shape) + " does not broadcast onto " + shape_str(x.shape));
    for (int i = 0; i < p.ndim(); ++i)
        if (p.shape[p.ndim() - 1 - i] != x.shape[x.ndim() - 1 - i])
            throw DimError("add_broadcast: " + shape_str(p.shape) + " does not broadcast onto " + shape_str(x.shape));
    const size_t pn = p.numel();
    Tensor<T> out = detail::make_result<T>(x.shape, {x, p}, [pn](const Tensor<T>& o) {
        if (auto* g = detail::grad_of(o, 0))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += (*o.grad)[i];
        if (auto* g = detail::grad_of(o, 1))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i % pn] += (*o.grad)[i];
    });
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*x.data)[i] + (*p.data)[i % pn];
    return out;
}

// Batched matmul. a: [*, m, k]; b: [k, n] / [n, k] shared across the batch, or
// [*, k, n] / [*, n, k] with matching leading dims. trans_b applies to b's
// last two axes.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
    if (a.ndim() < 2 || b.ndim() < 2)
        throw DimError("matmul: need >=2-d operands, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
    const int m = a.dim(-2), k = a.dim(-1);
    const int bk = trans_b ? b.dim(-1) : b.dim(-2);
    const int n = trans_b ? b.dim(-2) : b.dim(-1);
    if (bk != k)
        throw DimError("matmul: inner dimensions disagree, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t batch = a.numel() / (static_cast<size_t>(m) * k);
    const size_t b_batch = b.numel() / (static_cast<size_t>(k) * n);
    if (b_batch != 1 && b_batch != batch)
        throw DimError("matmul: batch mismatch, " + shape_str(a.shape) + " vs " + shape_str(b.shape));

    std::vector<int> out_shape(a.shape.begin(), a.shape.end() - 1);
    out_shape.push_back(n);

    auto bw = [m, k, n, batch, b_batch, trans_b](const Tensor<T>& o) {
        const T* av = o.node->parents[0].data->data();
        const T* bv = o.node->parents[1].data->data();
        const T* og = o.grad->data();
        const size_t as = static_cast<size_t>(m) * k, bs = static_cast<size_t>(k) * n,
                     os = static_cast<size_t>(m) * n;
        if (auto* ga = detail::grad_of(o, 0)) {
            for (size_t bi = 0; bi < batch; ++bi) {
                const T* bp = bv + (b_batch == 1 ? 0 : bi * bs);
                if (!trans_b)
                    detail::mm_nt(og + bi * os, bp, ga->data() + bi * as, m, n, k);
                else
                    detail::mm_nn(og + bi * os, bp, ga->data() + bi * as, m, n, k);
            }
        }
        if (auto* gb = detail::grad_of(o, 1)) {
            for (size_t bi = 0; bi < batch; ++bi) {
                T* gp = gb->data() + (b_batch == 1 ? 0 : bi * bs);
                if (!trans_b)
                    detail::mm_tn(av + bi * as, og + bi * os, gp, m, k, n);
                else
                    detail::mm_tn(og + bi * os, av + bi * as, gp, m, n, k);
            }
        }
    };
    Tensor<T> out = detail::make_result<T>(out_shape, {a, b}, bw);
    const size_t as = static_cast<size_t>(m) * k, bs = static_cast<size_t>(k) * n,
                 os = static_cast<size_t>(m) * n;
    for (size_t bi = 0; bi < batch; ++bi) {
        const T* bp = b.ptr() + (b_batch == 1 ? 0 : bi * bs);
        if (!trans_b)
            detail::mm_nn(a.ptr() + bi * as, bp, out.ptr() + bi * os, m, k, n);
        else
            detail::mm_nt(a.ptr() + bi * as, bp, out.ptr() + bi * os, m, k, n);
    }
    return out;
}

// Affine map over the last axis: x[..., d_in] * W[d_in, d_out] + b[d_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.dim(-1) != w.dim(0))
        throw DimError("linear: x " + shape_str(x.shape) + " incompatible with W " + shape_str(w.shape));
    if (b.ndim() != 1 || b.dim(0) != w.dim(1))
        throw DimError("linear: bias " + shape_str(b.shape) + " incompatible with W " + shape_str(w.shape));
    return add_broadcast(matmul(x, w), b);
}

// Softmax over the last axis, row-max subtracted for stability.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    const int n = x.dim(-1);
    const size_t rows = x.numel() / n;
    auto bw = [n, rows](const Tensor<T>& o) {
        auto* g = detail::grad_of(o, 0);
        if (!g) return;
        const T* y = o.data->data();
        const T* gy = o.grad->data();
        for (size_t r = 0; r < rows; ++r) {
            const size_t base = r * n;
            T dot = T(0);
            for (int j = 0; j < n; ++j) dot += gy[base + j] * y[base + j];
            for (int j = 0; j < n; ++j) (*g)[base + j] += y[base + j] * (gy[base + j] - dot);
        }
    };
    Tensor<T> out = detail::make_result<T>(x.shape, {x}, bw);
    for (size_t r = 0; r < rows; ++r) {
        const size_t base = r * n;
        T mx = (*x.data)[base];
        for (int j = 1; j < n; ++j) mx = std::max(mx, (*x.data)[base + j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            T e = std::exp((*x.data)[base + j] - mx);
            (*out.data)[base + j] = e;
            sum += e;
        }
        for (int j = 0; j < n; ++j) (*out.data)[base + j] /= sum;
    }
    return out;
}

// Per-last-axis-slice normalization to mean 0 / variance 1 (eps 1e-5 in the
// denominator), then gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    const int n = x.dim(-1);
    if (gain.ndim() != 1 || gain.dim(0) != n || bias.ndim() != 1 || bias.dim(0) != n)
        throw DimError("layer_norm: gain/bias " + shape_str(gain.shape) + "/" + shape_str(bias.shape) +
                       " must match last axis of " + shape_str(x.shape));
    const size_t rows = x.numel() / n;
    const T eps = T(1e-5);

    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);

    auto bw = [n, rows, xhat, inv_std](const Tensor<T>& o) {
        const T* gy = o.grad->data();
        const T* gv = o.node->parents[1].data->data();
        auto* gx = detail::grad_of(o, 0);
        auto* gg = detail::grad_of(o, 1);
        auto* gb = detail::grad_of(o, 2);
        for (size_t r = 0; r < rows; ++r) {
            const size_t base = r * n;
            T sum_dxh = T(0), sum_dxh_xh = T(0);
            for (int j = 0; j < n; ++j) {
                T dxh = gy[base + j] * gv[j];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * (*xhat)[base + j];
            }
            if (gx) {
                const T is = (*inv_std)[r];
                for (int j = 0; j < n; ++j) {
                    T dxh = gy[base + j] * gv[j];
                    (*gx)[base + j] += is * (dxh - sum_dxh / n - (*xhat)[base + j] * sum_dxh_xh / n);
                }
            }
            if (gg)
                for (int j = 0; j < n; ++j) (*gg)[j] += gy[base + j] * (*xhat)[base + j];
            if (gb)
                for (int j = 0; j < n; ++j) (*gb)[j] += gy[base + j];
        }
    };
    Tensor<T> out = detail::make_result<T>(x.shape, {x, gain, bias}, bw);
    for (size_t r = 0; r < rows; ++r) {
        const size_t base = r * n;
        T mean = T(0);
        for (int j = 0; j < n; ++j) mean += (*x.data)[base + j];
        mean /= n;
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            T d = (*x.data)[base + j] - mean;
            var += d * d;
        }
        var /= n;
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int j = 0; j < n; ++j) {
            T xh = ((*x.data)[base + j] - mean) * is;
            (*xhat)[base + j] = xh;
            (*out.data)[base + j] = gain.vals()[j] * xh + bias.vals()[j];
        }
    }
    return out;
}

// tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T a = static_cast<T>(0.044715);
    auto bw = [c, a](const Tensor<T>& o) {
        auto* g = detail::grad_of(o, 0);
        if (!g) return;
        const auto& xv = *o.node->parents[0].data;
        for (size_t i = 0; i < o.numel(); ++i) {
            T v = xv[i];
            T u = c * (v + a * v * v * v);
            T t = std::tanh(u);
            T du = c * (T(1) + T(3) * a * v * v);
            T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
            (*g)[i] += (*o.grad)[i] * d;
        }
    };
    Tensor<T> out = detail::make_result<T>(x.shape, {x}, bw);
    for (size_t i = 0; i < out.numel(); ++i) {
        T v = (*x.data)[i];
        (*out.data)[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + a * v * v * v)));
    }
    return out;
}

// Concatenate [B, L_i, d] sequences along the token axis.
template <typename T>
Tensor<T> concat_tokens(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ArgError("concat_tokens: no inputs");
    const int B = parts[0].dim(0), d = parts[0].dim(2);
    int total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 3 || p.dim(0) != B || p.dim(2) != d)
            throw DimError("concat_tokens: incompatible part " + shape_str(p.shape));
        total += p.dim(1);
    }
    std::vector<int> lens;
    for (const auto& p : parts) lens.push_back(p.dim(1));
    auto bw = [B, d, total, lens](const Tensor<T>& o) {
        const T* gy = o.grad->data();
        for (int b = 0; b < B; ++b) {
            size_t off = static_cast<size_t>(b) * total * d;
            for (size_t pi = 0; pi < lens.size(); ++pi) {
                const size_t chunk = static_cast<size_t>(lens[pi]) * d;
                if (auto* g = detail::grad_of(o, pi)) {
                    const size_t pbase = static_cast<size_t>(b) * chunk;
                    for (size_t i = 0; i < chunk; ++i) (*g)[pbase + i] += gy[off + i];
                }
                off += chunk;
            }
        }
    };
    Tensor<T> out = detail::make_result<T>({B, total, d}, parts, bw);
    for (int b = 0; b < B; ++b) {
        size_t off = static_cast<size_t>(b) * total * d;
        for (const auto& p : parts) {
            const size_t chunk = static_cast<size_t>(p.dim(1)) * d;
            std::copy_n(p.ptr() + static_cast<size_t>(b) * chunk, chunk, out.ptr() + off);
            off += chunk;
        }
    }
    return out;
}

// Concatenate two tensors along the last axis (equal leading dims).
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != b.ndim())
        throw DimError("concat_last: rank mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    for (int i = 0; i < a.ndim() - 1; ++i)
        if (a.shape[i] != b.shape[i])
            throw DimError("concat_last: leading dims differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const int da = a.dim(-1), db = b.dim(-1);
    const size_t rows = a.numel() / da;
    std::vector<int> out_shape = a.shape;
    out_shape.back() = da + db;
    auto bw = [rows, da, db](const Tensor<T>& o) {
        const T* gy = o.grad->data();
        auto* ga = detail::grad_of(o, 0);
        auto* gb = detail::grad_of(o, 1);
        for (size_t r = 0; r < rows; ++r) {
            const size_t base = r * (da + db);
            if (ga)
                for (int j = 0; j < da; ++j) (*ga)[r * da + j] += gy[base + j];
            if (gb)
                for (int j = 0; j < db; ++j) (*gb)[r * db + j] += gy[base + da + j];
        }
    };
    Tensor<T> out = detail::make_result<T>(out_shape, {a, b}, bw);
    for (size_t r = 0; r < rows; ++r) {
        std::copy_n(a.ptr() + r * da, da, out.ptr() + r * (da + db));
        std::copy_n(b.ptr() + r * db, db, out.ptr() + r * (da + db) + da);
    }
    return out;
}

// out[:, i, :] = x[:, idx[i], :]; backward scatter-adds.
template <typename T>
Tensor<T> select_tokens(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.ndim() != 3) throw DimError("select_tokens: expected [B,L,d], got " + shape_str(x.shape));
    const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
    for (int i : idx)
        if (i < 0 || i >= L) throw ArgError("select_tokens: index " + std::to_string(i) + " out of range");
    const int Lo = static_cast<int>(idx.size());
    auto bw = [B, L, d, Lo, idx](const Tensor<T>& o) {
        auto* g = detail::grad_of(o, 0);
        if (!g) return;
        const T* gy = o.grad->data();
        for (int b = 0; b < B; ++b)
            for (int i = 0; i < Lo; ++i) {
                const size_t src = (static_cast<size_t>(b) * Lo + i) * d;
                const size_t dst = (static_cast<size_t>(b) * L + idx[i]) * d;
                for (int j = 0; j < d; ++j) (*g)[dst + j] += gy[src + j];
            }
    };
    Tensor<T> out = detail::make_result<T>({B, Lo, d}, {x}, bw);
    for (int b = 0; b < B; ++b)
        for (int i = 0; i < Lo; ++i)
            std::copy_n(x.ptr() + (static_cast<size_t>(b) * L + idx[i]) * d, d,
                        out.ptr() + (static_cast<size_t>(b) * Lo + i) * d);
    return out;
}

// Per-batch-item gather: x viewed as [B, n_in]; out[b][i] = x[b][idx[i]].
// Covers patchify/un-patchify as pure index maps.
template <typename T>
Tensor<T> gather_items(const Tensor<T>& x, const std::vector<int>& idx, std::vector<int> item_shape) {
    const int B = x.dim(0);
    const size_t n_in = x.numel() / B;
    for (int i : idx)
        if (i < 0 || static_cast<size_t>(i) >= n_in)
            throw ArgError("gather_items: index " + std::to_string(i) + " out of range");
    const size_t n_out = idx.size();
    if (shape_numel(item_shape) != n_out)
        throw DimError("gather_items: item shape " + shape_str(item_shape) + " != index count");
    std::vector<int> out_shape{B};
    out_shape.insert(out_shape.end(), item_shape.begin(), item_shape.end());
    auto bw = [B, n_in, n_out, idx](const Tensor<T>& o) {
        auto* g = detail::grad_of(o, 0);
        if (!g) return;
        const T* gy = o.grad->data();
        for (int b = 0; b < B; ++b)
            for (size_t i = 0; i < n_out; ++i)
                (*g)[b * n_in + idx[i]] += gy[b * n_out + i];
    };
    Tensor<T> out = detail::make_result<T>(out_shape, {x}, bw);
    for (int b = 0; b < B; ++b)
        for (size_t i = 0; i < n_out; ++i)
            (*out.data)[b * n_out + i] = (*x.data)[b * n_in + idx[i]];
    return out;
}

// Axis permutation (copying).
template <typename T>
Tensor<T> permute_axes(const Tensor<T>& x, const std::vector<int>& perm) {
    if (perm.size() != x.shape.size()) throw DimError("permute_axes: rank mismatch");
    const int nd = x.ndim();
    std::vector<int> out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[i] = x.shape[perm[i]];
    std::vector<size_t> in_strides(nd, 1);
    for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    // index map: out linear -> in linear
    auto map = std::make_shared<std::vector<size_t>>(x.numel());
    {
        std::vector<int> coord(nd, 0);
        for (size_t o = 0; o < x.numel(); ++o) {
            size_t src = 0;
            for (int i = 0; i < nd; ++i) src += static_cast<size_t>(coord[i]) * in_strides[perm[i]];
            (*map)[o] = src;
            for (int i = nd - 1; i >= 0; --i) {
                if (++coord[i] < out_shape[i]) break;
                coord[i] = 0;
            }
        }
    }
    auto bw = [map](const Tensor<T>& o) {
        auto* g = detail::grad_of(o, 0);
        if (!g) return;
        for (size_t i = 0; i < o.numel(); ++i) (*g)[(*map)[i]] += (*o.grad)[i];
    };
    Tensor<T> out = detail::make_result<T>(out_shape, {x}, bw);
    for (size_t i = 0; i < out.numel(); ++i) (*out.data)[i] = (*x.data)[(*map)[i]];
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw DimError("reshape: " + shape_str(x.shape) + " -> " + shape_str(new_shape));
    auto bw = [](const Tensor<T>& o) {
        if (auto* g = detail::grad_of(o, 0))
            for (size_t i = 0; i < o.numel(); ++i) (*g)[i] += (*o.grad)[i];
    };
    Tensor<T> out = detail::make_result<T>(std::move(new_shape), {x}, bw);
    std::copy(x.data->begin(), x.data->end(), out.data->begin());
    return out;
}

// Row lookup: table [V, dim], ids flattened [B*L] -> out [B, L, dim].
template <typename T>
Tensor<T> embedding_rows(const Tensor<T>& table, const std::vector<int>& ids, int B, int L) {
    if (table.ndim() != 2) throw DimError("embedding_rows: table must be 2-d");
    const int V = table.dim(0), dim = table.dim(1);
    if (static_cast<int>(ids.size()) != B * L) throw DimError("embedding_rows: id count != B*L");
    for (int id : ids)
        if (id < 0 || id >= V) throw DataError("embedding_rows: id " + std::to_string(id) + " out of vocabulary");
    auto bw = [ids, dim](const Tensor<T>& o) {
        auto* g = detail::grad_of(o, 0);
        if (!g) return;
        const T* gy = o.grad->data();
        for (size_t i = 0; i < ids.size(); ++i)
            for (int j = 0; j < dim; ++j)
                (*g)[static_cast<size_t>(ids[i]) * dim + j] += gy[i * dim + j];
    };
    Tensor<T> out = detail::make_result<T>({B, L, dim}, {table}, bw);
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy_n(table.ptr() + static_cast<size_t>(ids[i]) * dim, dim, out.ptr() + i * dim);
    return out;
}

// Mean squared error, scalar output.
template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape != b.shape)
        throw DimError("mse: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const size_t n = a.numel();
    auto bw = [n](const Tensor<T>& o) {
        const T g = (*o.grad)[0] * T(2) / static_cast<T>(n);
        const auto& av = *o.node->parents[0].data;
        const auto& bv = *o.node->parents[1].data;
        if (auto* ga = detail::grad_of(o, 0))
            for (size_t i = 0; i < n; ++i) (*ga)[i] += g * (av[i] - bv[i]);
        if (auto* gb = detail::grad_of(o, 1))
            for (size_t i = 0; i < n; ++i) (*gb)[i] -= g * (av[i] - bv[i]);
    };
    Tensor<T> out = detail::make_result<T>({1}, {a, b}, bw);
    T acc = T(0);
    for (size_t i = 0; i < n; ++i) {
        T d = (*a.data)[i] - (*b.data)[i];
        acc += d * d;
    }
    (*out.data)[0] = acc / static_cast<T>(n);
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto bw = [](const Tensor<T>& o) {
        if (auto* g = detail::grad_of(o, 0))
            for (size_t i = 0; i < g->size(); ++i) (*g)[i] += (*o.grad)[0];
    };
    Tensor<T> out = detail::make_result<T>({1}, {x}, bw);
    T acc = T(0);
    for (T v : *x.data) acc += v;
    (*out.data)[0] = acc;
    return out;
}

// Reverse pass from a scalar root. Single-owner: grads of all reachable
// leaves with requires_grad are accumulated (not cleared first).
template <typename T>
void backward(Tensor<T>& root) {
    if (root.numel() != 1) throw ArgError("backward: root must be scalar");
    if (!root.requires_grad) return;

    std::vector<Tensor<T>> order;
    std::unordered_set<const void*> seen;
    // iterative post-order DFS
    struct Frame {
        Tensor<T> t;
        size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root.data.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.t.node && f.next < f.t.node->parents.size()) {
            Tensor<T> p = f.t.node->parents[f.next++];
            if (p.node && !seen.count(p.data.get())) {
                seen.insert(p.data.get());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }
    root.ensure_grad();
    (*root.grad)[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (it->node && it->node->backward) it->node->backward(*it);
}

}  // namespace fdiff

#endif
