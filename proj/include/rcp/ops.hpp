#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "rcp/error.hpp"
#include "rcp/tensor.hpp"

// Differentiable primitives. Every op computes the forward value eagerly and,
// when a Tape is active and some input wants gradients, records one backward
// node. Gradient accumulation across fan-out is by summation, in fixed
// reverse-forward order, so repeated builds are bit-identical.
namespace rcp {

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() +
                             " vs " + b.shape_str());
    }
}

inline bool taped(const Tensor& t) { return wants_grad(t.impl()); }

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    const bool na = detail::taped(a), nb = detail::taped(b);
    if (na || nb) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (na) touched.push_back(ai);
        if (nb) touched.push_back(bi);
        detail::record_node(oi, std::move(touched), [=]() {
            for (std::size_t i = 0; i < n; ++i) {
                if (na) ai->grad[i] += oi->grad[i];
                if (nb) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    const bool na = detail::taped(a), nb = detail::taped(b);
    if (na || nb) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (na) touched.push_back(ai);
        if (nb) touched.push_back(bi);
        detail::record_node(oi, std::move(touched), [=]() {
            for (std::size_t i = 0; i < n; ++i) {
                if (na) ai->grad[i] += oi->grad[i];
                if (nb) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    const bool na = detail::taped(a), nb = detail::taped(b);
    if (na || nb) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (na) touched.push_back(ai);
        if (nb) touched.push_back(bi);
        detail::record_node(oi, std::move(touched), [=]() {
            for (std::size_t i = 0; i < n; ++i) {
                if (na) ai->grad[i] += oi->grad[i] * bi->data[i];
                if (nb) bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton: y_i = f(x_i), dx_i += g_i * dfdx(x_i, y_i).
template <typename F, typename DF>
Tensor unary_op(const Tensor& x, F f, DF dfdx) {
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = f(x.data()[i]);
    if (taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < n; ++i) {
                xi->grad[i] += oi->grad[i] * dfdx(xi->data[i], oi->data[i]);
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor neg(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

// a*x + b with compile-time constants (covers scaling and shifting).
inline Tensor affine(const Tensor& x, double a, double b) {
    return detail::unary_op(
        x, [=](double v) { return a * v + b; }, [=](double, double) { return a; });
}

inline Tensor scale(const Tensor& x, double a) { return affine(x, a, 0.0); }

inline Tensor exp(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline double sigmoid_scalar(double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

// Elementwise logistic sigmoid; d/dx = y(1-y).
inline Tensor sigmoid(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return sigmoid_scalar(v); },
        [](double, double y) { return y * (1.0 - y); });
}

inline double softplus_scalar(double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

// log(1 + e^x), overflow-safe; d/dx = sigmoid(x).
inline Tensor softplus(const Tensor& x) {
    return detail::unary_op(
        x, [](double v) { return softplus_scalar(v); },
        [](double v, double) { return sigmoid_scalar(v); });
}

// Exact GELU, x * Phi(x); d/dx = Phi(x) + x * phi(x).
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return detail::unary_op(
        x,
        [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [=](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
}

// x^p for constant p. p == 0 yields 1 with zero gradient.
inline Tensor pow_const(const Tensor& x, double p) {
    return detail::unary_op(
        x, [=](double v) { return std::pow(v, p); },
        [=](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

// Elementwise product with a constant tensor; no gradient flows into m.
inline Tensor cwise_scale(const Tensor& x, const Tensor& m) {
    detail::check_same_shape(x, m, "cwise_scale");
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * m.data()[i];
    if (detail::taped(x)) {
        auto xi = x.impl(), mi = m.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * mi->data[i];
        });
    }
    return out;
}

// x * s with a one-element tensor s; gradients flow to both.
inline Tensor mul_scalar_t(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw DimensionError("mul_scalar_t: s must have one element");
    Tensor out(x.shape());
    const std::size_t n = x.numel();
    const double sv = s.data()[0];
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * sv;
    const bool nx = detail::taped(x), ns = detail::taped(s);
    if (nx || ns) {
        auto xi = x.impl(), si = s.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (nx) touched.push_back(xi);
        if (ns) touched.push_back(si);
        detail::record_node(oi, std::move(touched), [=]() {
            const double sval = si->data[0];
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (nx) xi->grad[i] += oi->grad[i] * sval;
                acc += oi->grad[i] * xi->data[i];
            }
            if (ns) si->grad[0] += acc;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// [M x K] @ [K x N]; dA = G B^T, dB = A^T G.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw DimensionError("matmul: expects rank-2 operands, got " + a.shape_str() +
                             " and " + b.shape_str());
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree: " + a.shape_str() +
                             " @ " + b.shape_str());
    }
    Tensor out({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = pa[i * k + kk];
            const double* brow = pb + kk * n;
            double* orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    const bool na = detail::taped(a), nb = detail::taped(b);
    if (na || nb) {
        auto ai = a.impl(), bi = b.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (na) touched.push_back(ai);
        if (nb) touched.push_back(bi);
        detail::record_node(oi, std::move(touched), [=]() {
            const double* g = oi->grad.data();
            if (na) {
                double* ga = ai->grad.data();
                const double* db = bi->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (std::size_t kk = 0; kk < k; ++kk)
                            ga[i * k + kk] += gv * db[kk * n + j];
                    }
            }
            if (nb) {
                double* gb = bi->grad.data();
                const double* da = ai->data.data();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double av = da[i * k + kk];
                        for (std::size_t j = 0; j < n; ++j)
                            gb[kk * n + j] += av * g[i * n + j];
                    }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose: expects rank-2, got " + x.shape_str());
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = x.data()[i * c + j];
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xi->grad[i * c + j] += oi->grad[j * r + i];
        });
    }
    return out;
}

// Row-major relabeling; data order is unchanged.
inline Tensor reshape(const Tensor& x, std::vector<std::size_t> new_shape) {
    if (detail::shape_numel(new_shape) != x.numel()) {
        throw DimensionError("reshape: element count mismatch");
    }
    Tensor out(std::move(new_shape));
    out.data() = x.data();
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        const std::size_t n = x.numel();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
        });
    }
    return out;
}

// out[i] = x.flat[idx[i]]; backward scatter-adds. Underlies patchify.
inline Tensor gather_linear(const Tensor& x, std::vector<std::size_t> idx,
                            std::vector<std::size_t> out_shape) {
    if (detail::shape_numel(out_shape) != idx.size()) {
        throw DimensionError("gather_linear: index count does not match output shape");
    }
    Tensor out(std::move(out_shape));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= x.numel()) throw InputError("gather_linear: index out of range");
        out.data()[i] = x.data()[idx[i]];
    }
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=, ix = std::move(idx)]() {
            for (std::size_t i = 0; i < ix.size(); ++i) xi->grad[ix[i]] += oi->grad[i];
        });
    }
    return out;
}

// Embedding lookup: rows of a [V x D] table; duplicate ids accumulate.
inline Tensor row_gather(const Tensor& table, const std::vector<std::size_t>& ids) {
    if (table.rank() != 2) throw DimensionError("row_gather: table must be rank-2");
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::size_t id : ids) {
        if (id >= v) {
            throw InputError("row_gather: id " + std::to_string(id) + " out of vocabulary (" +
                             std::to_string(v) + ")");
        }
    }
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
            out.data()[i * d + j] = table.data()[ids[i] * d + j];
    if (detail::taped(table)) {
        auto ti = table.impl(), oi = out.impl();
        detail::record_node(oi, {ti}, [=, ids2 = ids]() {
            for (std::size_t i = 0; i < ids2.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    ti->grad[ids2[i] * d + j] += oi->grad[i * d + j];
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.rank() != 2) throw DimensionError("slice_rows: expects rank-2");
    if (!(r0 < r1 && r1 <= x.dim(0))) throw DimensionError("slice_rows: bad range");
    const std::size_t c = x.dim(1);
    Tensor out({r1 - r0, c});
    std::copy(x.data().begin() + r0 * c, x.data().begin() + r1 * c, out.data().begin());
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < (r1 - r0) * c; ++i) xi->grad[r0 * c + i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2) throw DimensionError("slice_cols: expects rank-2");
    if (!(c0 < c1 && c1 <= x.dim(1))) throw DimensionError("slice_cols: bad range");
    const std::size_t r = x.dim(0), c = x.dim(1), w = c1 - c0;
    Tensor out({r, w});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out.data()[i * w + j] = x.data()[i * c + c0 + j];
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    xi->grad[i * c + c0 + j] += oi->grad[i * w + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const std::size_t r = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != r) throw DimensionError("concat_cols: row mismatch");
        total += p.dim(1);
    }
    Tensor out({r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j)
                out.data()[i * total + off + j] = p.data()[i * w + j];
        off += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || detail::taped(p);
    if (any) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        std::vector<bool> need;
        std::vector<std::size_t> widths;
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        for (const auto& p : parts) {
            impls.push_back(p.impl());
            need.push_back(detail::taped(p));
            widths.push_back(p.dim(1));
            if (need.back()) touched.push_back(p.impl());
        }
        auto oi = out.impl();
        detail::record_node(oi, std::move(touched), [=]() {
            std::size_t o2 = 0;
            for (std::size_t k = 0; k < impls.size(); ++k) {
                const std::size_t w = widths[k];
                if (need[k]) {
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            impls[k]->grad[i * w + j] += oi->grad[i * total + o2 + j];
                }
                o2 += w;
            }
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const std::size_t c = parts[0].dim(1);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != c) throw DimensionError("concat_rows: column mismatch");
        total += p.dim(0);
    }
    Tensor out({total, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * c);
        off += p.dim(0);
    }
    bool any = false;
    for (const auto& p : parts) any = any || detail::taped(p);
    if (any) {
        std::vector<std::shared_ptr<detail::TensorImpl>> impls;
        std::vector<bool> need;
        std::vector<std::size_t> rows;
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        for (const auto& p : parts) {
            impls.push_back(p.impl());
            need.push_back(detail::taped(p));
            rows.push_back(p.dim(0));
            if (need.back()) touched.push_back(p.impl());
        }
        auto oi = out.impl();
        detail::record_node(oi, std::move(touched), [=]() {
            std::size_t o2 = 0;
            for (std::size_t k = 0; k < impls.size(); ++k) {
                if (need[k]) {
                    for (std::size_t i = 0; i < rows[k] * c; ++i)
                        impls[k]->grad[i] += oi->grad[o2 * c + i];
                }
                o2 += rows[k];
            }
        });
    }
    return out;
}

// Broadcast-add a [1 x C] bias over the rows of [R x C].
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 2 || b.dim(0) != 1 || b.dim(1) != x.dim(1)) {
        throw DimensionError("add_rowvec: expects [RxC] and [1xC], got " + x.shape_str() +
                             " and " + b.shape_str());
    }
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out.data()[i * c + j] = x.data()[i * c + j] + b.data()[j];
    const bool nx = detail::taped(x), nb = detail::taped(b);
    if (nx || nb) {
        auto xi = x.impl(), bi = b.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (nx) touched.push_back(xi);
        if (nb) touched.push_back(bi);
        detail::record_node(oi, std::move(touched), [=]() {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    if (nx) xi->grad[i * c + j] += oi->grad[i * c + j];
                    if (nb) bi->grad[j] += oi->grad[i * c + j];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    Tensor out({1});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        const std::size_t n = x.numel();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[0];
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// Column means of [R x C] -> [1 x C]; the pooling step of both towers.
inline Tensor mean_over_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("mean_over_rows: expects rank-2");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({1, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[j] += x.data()[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out.data()[j] /= static_cast<double>(r);
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            const double inv = 1.0 / static_cast<double>(r);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xi->grad[i * c + j] += oi->grad[j] * inv;
        });
    }
    return out;
}

// Main diagonal of a square matrix -> rank-1 vector.
inline Tensor diag_part(const Tensor& x) {
    if (x.rank() != 2 || x.dim(0) != x.dim(1)) {
        throw DimensionError("diag_part: expects a square matrix, got " + x.shape_str());
    }
    const std::size_t n = x.dim(0);
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i * n + i];
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < n; ++i) xi->grad[i * n + i] += oi->grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalizations
// ---------------------------------------------------------------------------

// Softmax along `axis` of an arbitrary-rank tensor, max-subtracted for
// stability. Rows of the result sum to 1.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];
    Tensor out(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = x.data()[base];
            for (std::size_t i = 1; i < n; ++i)
                mx = std::max(mx, x.data()[base + i * inner]);
            double denom = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = std::exp(x.data()[base + i * inner] - mx);
                out.data()[base + i * inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < n; ++i) out.data()[base + i * inner] /= denom;
        }
    }
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            // dx = y * (g - sum(g*y)) per lane
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                        dot += oi->grad[base + i * inner] * oi->data[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i)
                        xi->grad[base + i * inner] += oi->data[base + i * inner] *
                                                      (oi->grad[base + i * inner] - dot);
                }
        });
    }
    return out;
}

// log(sum_j exp(x_ij)) per row of [R x C] -> rank-1 [R], max-subtracted.
inline Tensor logsumexp_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("logsumexp_rows: expects rank-2");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({r});
    for (std::size_t i = 0; i < r; ++i) {
        double mx = x.data()[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x.data()[i * c + j]);
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += std::exp(x.data()[i * c + j] - mx);
        out.data()[i] = mx + std::log(acc);
    }
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=]() {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    xi->grad[i * c + j] +=
                        oi->grad[i] * std::exp(xi->data[i * c + j] - oi->data[i]);
        });
    }
    return out;
}

// Row-wise x / max(||x||, eps). Rows with norm above eps come out exactly
// unit-length; near-zero rows fall back to division by eps.
inline Tensor l2_normalize(const Tensor& x, double eps = 1e-6) {
    if (x.rank() != 2) throw DimensionError("l2_normalize: expects rank-2");
    if (!(eps > 0.0)) throw InputError("l2_normalize: eps must be positive");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out({r, c});
    std::vector<double> norms(r);
    for (std::size_t i = 0; i < r; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < c; ++j) sq += x.data()[i * c + j] * x.data()[i * c + j];
        norms[i] = std::sqrt(sq);
        const double denom = std::max(norms[i], eps);
        for (std::size_t j = 0; j < c; ++j) out.data()[i * c + j] = x.data()[i * c + j] / denom;
    }
    if (detail::taped(x)) {
        auto xi = x.impl(), oi = out.impl();
        detail::record_node(oi, {xi}, [=, nm = std::move(norms)]() {
            for (std::size_t i = 0; i < r; ++i) {
                // Clamped branch is plain scaling y = x/eps; otherwise the
                // usual projection (g - y (y.g)) / ||x||.
                const bool clamped = nm[i] < eps;
                const double denom = clamped ? eps : nm[i];
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j)
                    dot += oi->grad[i * c + j] * oi->data[i * c + j];
                for (std::size_t j = 0; j < c; ++j) {
                    const double correction = clamped ? 0.0 : oi->data[i * c + j] * dot;
                    xi->grad[i * c + j] += (oi->grad[i * c + j] - correction) / denom;
                }
            }
        });
    }
    return out;
}

// Row-wise layer normalization with learnable gain/bias ([1 x C] each).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.rank() != 2) throw DimensionError("layer_norm: expects rank-2 input");
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (gain.rank() != 2 || gain.dim(0) != 1 || gain.dim(1) != c ||
        bias.rank() != 2 || bias.dim(0) != 1 || bias.dim(1) != c) {
        throw DimensionError("layer_norm: gain/bias must be [1xC]");
    }
    Tensor out({r, c});
    std::vector<double> xhat(r * c), inv_std(r);
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += x.data()[i * c + j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = x.data()[i * c + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) {
            xhat[i * c + j] = (x.data()[i * c + j] - mean) * inv_std[i];
            out.data()[i * c + j] = xhat[i * c + j] * gain.data()[j] + bias.data()[j];
        }
    }
    const bool nx = detail::taped(x), ng = detail::taped(gain), nb = detail::taped(bias);
    if (nx || ng || nb) {
        auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
        std::vector<std::shared_ptr<detail::TensorImpl>> touched;
        if (nx) touched.push_back(xi);
        if (ng) touched.push_back(gi);
        if (nb) touched.push_back(bi);
        detail::record_node(oi, std::move(touched),
                            [=, xh = std::move(xhat), istd = std::move(inv_std)]() {
            for (std::size_t i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = oi->grad[i * c + j] * gi->data[j];
                    m1 += dxh;
                    m2 += dxh * xh[i * c + j];
                }
                m1 /= static_cast<double>(c);
                m2 /= static_cast<double>(c);
                for (std::size_t j = 0; j < c; ++j) {
                    const double dxh = oi->grad[i * c + j] * gi->data[j];
                    if (nx)
                        xi->grad[i * c + j] += (dxh - m1 - xh[i * c + j] * m2) * istd[i];
                    if (ng) gi->grad[j] += oi->grad[i * c + j] * xh[i * c + j];
                    if (nb) bi->grad[j] += oi->grad[i * c + j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// bilinear interpolation on [H x W x D] grids
// ---------------------------------------------------------------------------

namespace detail {

struct Corner {
    std::size_t y0, y1, x0, x1;
    double w00, w01, w10, w11;
};

inline Corner corner_weights(double fy, double fx, std::size_t h, std::size_t w) {
    fy = std::min(std::max(fy, 0.0), static_cast<double>(h - 1));
    fx = std::min(std::max(fx, 0.0), static_cast<double>(w - 1));
    Corner c;
    c.y0 = static_cast<std::size_t>(fy);
    c.x0 = static_cast<std::size_t>(fx);
    c.y1 = std::min(c.y0 + 1, h - 1);
    c.x1 = std::min(c.x0 + 1, w - 1);
    const double wy = fy - static_cast<double>(c.y0);
    const double wx = fx - static_cast<double>(c.x0);
    c.w00 = (1.0 - wy) * (1.0 - wx);
    c.w01 = (1.0 - wy) * wx;
    c.w10 = wy * (1.0 - wx);
    c.w11 = wy * wx;
    return c;
}

}  // namespace detail

// Align-corners bilinear resize of [H x W x D] to [out_h x out_w x D].
// Linear in the grid values and exact on constants; resizing to the same
// size reproduces the input.
inline Tensor bilinear_resize(const Tensor& grid, std::size_t out_h, std::size_t out_w) {
    if (grid.rank() != 3) throw DimensionError("bilinear_resize: expects [HxWxD]");
    if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize: zero-size output");
    const std::size_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
    const double sy = out_h > 1 ? static_cast<double>(h - 1) / static_cast<double>(out_h - 1) : 0.0;
    const double sx = out_w > 1 ? static_cast<double>(w - 1) / static_cast<double>(out_w - 1) : 0.0;
    Tensor out({out_h, out_w, d});
    std::vector<detail::Corner> corners(out_h * out_w);
    for (std::size_t i = 0; i < out_h; ++i) {
        for (std::size_t j = 0; j < out_w; ++j) {
            const auto c = detail::corner_weights(i * sy, j * sx, h, w);
            corners[i * out_w + j] = c;
            double* o = out.data().data() + (i * out_w + j) * d;
            const double* g = grid.data().data();
            for (std::size_t k = 0; k < d; ++k) {
                o[k] = c.w00 * g[(c.y0 * w + c.x0) * d + k] +
                       c.w01 * g[(c.y0 * w + c.x1) * d + k] +
                       c.w10 * g[(c.y1 * w + c.x0) * d + k] +
                       c.w11 * g[(c.y1 * w + c.x1) * d + k];
            }
        }
    }
    if (detail::taped(grid)) {
        auto gi = grid.impl(), oi = out.impl();
        detail::record_node(oi, {gi}, [=, cs = std::move(corners)]() {
            for (std::size_t p = 0; p < cs.size(); ++p) {
                const auto& c = cs[p];
                for (std::size_t k = 0; k < d; ++k) {
                    const double gv = oi->grad[p * d + k];
                    gi->grad[(c.y0 * w + c.x0) * d + k] += c.w00 * gv;
                    gi->grad[(c.y0 * w + c.x1) * d + k] += c.w01 * gv;
                    gi->grad[(c.y1 * w + c.x0) * d + k] += c.w10 * gv;
                    gi->grad[(c.y1 * w + c.x1) * d + k] += c.w11 * gv;
                }
            }
        });
    }
    return out;
}

// Bilinear point samples of [H x W x D] at continuous (y, x) grid coordinates
// (0..H-1, 0..W-1; clamped). Returns [N x D].
inline Tensor bilinear_sample(const Tensor& grid,
                              const std::vector<std::pair<double, double>>& points) {
    if (grid.rank() != 3) throw DimensionError("bilinear_sample: expects [HxWxD]");
    const std::size_t h = grid.dim(0), w = grid.dim(1), d = grid.dim(2);
    const std::size_t n = points.size();
    Tensor out({n, d});
    std::vector<detail::Corner> corners(n);
    for (std::size_t p = 0; p < n; ++p) {
        const auto c = detail::corner_weights(points[p].first, points[p].second, h, w);
        corners[p] = c;
        double* o = out.data().data() + p * d;
        const double* g = grid.data().data();
        for (std::size_t k = 0; k < d; ++k) {
            o[k] = c.w00 * g[(c.y0 * w + c.x0) * d + k] +
                   c.w01 * g[(c.y0 * w + c.x1) * d + k] +
                   c.w10 * g[(c.y1 * w + c.x0) * d + k] +
                   c.w11 * g[(c.y1 * w + c.x1) * d + k];
        }
    }
    if (detail::taped(grid)) {
        auto gi = grid.impl(), oi = out.impl();
        detail::record_node(oi, {gi}, [=, cs = std::move(corners)]() {
            for (std::size_t p = 0; p < n; ++p) {
                const auto& c = cs[p];
                for (std::size_t k = 0; k < d; ++k) {
                    const double gv = oi->grad[p * d + k];
                    gi->grad[(c.y0 * w + c.x0) * d + k] += c.w00 * gv;
                    gi->grad[(c.y0 * w + c.x1) * d + k] += c.w01 * gv;
                    gi->grad[(c.y1 * w + c.x0) * d + k] += c.w10 * gv;
                    gi->grad[(c.y1 * w + c.x1) * d + k] += c.w11 * gv;
                }
            }
        });
    }
    return out;
}

}  // namespace rcp
