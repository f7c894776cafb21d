// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <vector>

#include "comer/rng.hpp"
#include "comer/tensor.hpp"

namespace comer {

// Boolean mask with tensor shape, broadcastable against value tensors.
// Plain data: masks never carry gradients.
struct BoolMask {
    Shape shape;
    std::vector<std::uint8_t> v;

    BoolMask() = default;
    BoolMask(Shape s, std::vector<std::uint8_t> data) : shape(std::move(s)), v(std::move(data)) {
        check_as<DimensionError>(numel(shape) == Index(v.size()), "mask shape/buffer mismatch");
    }
    static BoolMask all_true(Shape s) {
        std::vector<std::uint8_t> data(size_t(numel(s)), 1);
        return BoolMask(std::move(s), std::move(data));
    }
    bool at(Index i) const { return v[size_t(i)] != 0; }
};

namespace detail {

inline Index normalize_axis(Index axis, Index rank) {
    if (axis < 0) axis += rank;
    check_as<DimensionError>(axis >= 0 && axis < rank, "axis out of range");
    return axis;
}

inline Shape row_major_strides(const Shape& s) {
    Shape st(s.size());
    Index acc = 1;
    for (Index i = Index(s.size()) - 1; i >= 0; --i) {
        st[size_t(i)] = acc;
        acc *= s[size_t(i)];
    }
    return st;
}

// numpy-style right-aligned broadcast of b onto a's shape.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (size_t i = 0; i < r; ++i) {
        Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        check_as<DimensionError>(da == db || da == 1 || db == 1,
                                 "shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `s` padded/zeroed so it can be walked under `out` shape.
inline Shape broadcast_strides(const Shape& s, const Shape& out) {
    Shape st = row_major_strides(s);
    Shape res(out.size(), 0);
    size_t off = out.size() - s.size();
    for (size_t i = 0; i < s.size(); ++i) res[off + i] = (s[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    return res;
}

// Walks an output shape while tracking offsets into two broadcast inputs.
template <typename F>
void broadcast_walk(const Shape& out, const Shape& stride_a, const Shape& stride_b, F&& f) {
    Index total = numel(out);
    size_t r = out.size();
    if (r == 0) {
        if (total > 0) f(0, 0, 0);
        return;
    }
    Shape idx(r, 0);
    Index oa = 0, ob = 0;
    for (Index lin = 0; lin < total; ++lin) {
        f(lin, oa, ob);
        for (Index d = Index(r) - 1; d >= 0; --d) {
            idx[size_t(d)]++;
            oa += stride_a[size_t(d)];
            ob += stride_b[size_t(d)];
            if (idx[size_t(d)] < out[size_t(d)]) break;
            oa -= stride_a[size_t(d)] * out[size_t(d)];
            ob -= stride_b[size_t(d)] * out[size_t(d)];
            idx[size_t(d)] = 0;
        }
    }
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// True when b's shape is a trailing suffix of a's (row-wise broadcast).
inline bool suffix_shape(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    for (size_t i = 0; i < b.size(); ++i)
        if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename Fwd>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, T da_coeff, T db_coeff) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (same_shape(sa, sb)) {
        Vec<T> out(size_t(a.size()));
        ConstArrMap<T> ma(a.data(), a.size()), mb(b.data(), b.size());
        ArrMap<T> mo(out.data(), a.size());
        fwd(mo, ma, mb);
        return make_op<T>(
            name, sa, std::move(out), {a, b}, [da_coeff, db_coeff](TensorNode<T>& n) {
                ConstArrMap<T> g(n.grad.data(), Index(n.grad.size()));
                for (int i = 0; i < 2; ++i) {
                    auto& p = n.parents[size_t(i)];
                    if (!p.requires_grad()) continue;
                    auto& pg = p.mutable_grad();
                    ArrMap<T>(pg.data(), Index(pg.size())) += (i == 0 ? da_coeff : db_coeff) * g;
                }
            });
    }
    Shape so = broadcast_shape(sa, sb);
    Shape sta = broadcast_strides(sa, so), stb = broadcast_strides(sb, so);
    Vec<T> out(size_t(numel(so)));
    const T* pa = a.data();
    const T* pb = b.data();
    // Fast path: b broadcast row-wise over a (bias-add pattern).
    if (same_shape(so, sa) && suffix_shape(sa, sb) && b.size() > 0) {
        Index inner = b.size(), rows = a.size() / inner;
        for (Index r = 0; r < rows; ++r) {
            ConstArrMap<T> ma(pa + r * inner, inner), mb(pb, inner);
            ArrMap<T> mo(out.data() + r * inner, inner);
            fwd(mo, ma, mb);
        }
    } else {
        broadcast_walk(so, sta, stb, [&](Index lin, Index oa, Index ob) {
            Eigen::Map<Eigen::Array<T, 1, 1>> mo(out.data() + lin);
            Eigen::Map<const Eigen::Array<T, 1, 1>> ma(pa + oa), mb(pb + ob);
            fwd(mo, ma, mb);
        });
    }
    return make_op<T>(
        name, so, std::move(out), {a, b}, [so, sta, stb, da_coeff, db_coeff](TensorNode<T>& n) {
            const T* g = n.grad.data();
            for (int i = 0; i < 2; ++i) {
                auto& p = n.parents[size_t(i)];
                if (!p.requires_grad()) continue;
                T coeff = i == 0 ? da_coeff : db_coeff;
                T* pg = p.mutable_grad().data();
                const Shape& st = i == 0 ? sta : stb;
                broadcast_walk(so, st, st, [&](Index lin, Index off, Index) { pg[off] += coeff * g[lin]; });
            }
        });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](auto& o, const auto& x, const auto& y) { o = x + y; }, T(1), T(1));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](auto& o, const auto& x, const auto& y) { o = x - y; }, T(1), T(-1));
}

// Elementwise product. Unlike add/sub the partials depend on the inputs,
// so broadcasting is handled through the generic walk in the closure.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail;
    Shape so = broadcast_shape(a.shape(), b.shape());
    Shape sta = broadcast_strides(a.shape(), so), stb = broadcast_strides(b.shape(), so);
    Vec<T> out(size_t(numel(so)));
    const T* pa = a.data();
    const T* pb = b.data();
    if (same_shape(a.shape(), b.shape())) {
        ArrMap<T>(out.data(), Index(out.size())) =
            ConstArrMap<T>(pa, a.size()) * ConstArrMap<T>(pb, b.size());
    } else {
        broadcast_walk(so, sta, stb, [&](Index lin, Index oa, Index ob) { out[size_t(lin)] = pa[oa] * pb[ob]; });
    }
    return make_op<T>(
        "mul", so, std::move(out), {a, b}, [so, sta, stb](TensorNode<T>& n) {
            const T* g = n.grad.data();
            const T* va = n.parents[0].data();
            const T* vb = n.parents[1].data();
            T* ga = n.parents[0].requires_grad() ? n.parents[0].mutable_grad().data() : nullptr;
            T* gb = n.parents[1].requires_grad() ? n.parents[1].mutable_grad().data() : nullptr;
            broadcast_walk(so, sta, stb, [&](Index lin, Index oa, Index ob) {
                if (ga) ga[oa] += g[lin] * vb[ob];
                if (gb) gb[ob] += g[lin] * va[oa];
            });
        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Vec<T> out(size_t(a.size()));
    ArrMap<T>(out.data(), a.size()) = ConstArrMap<T>(a.data(), a.size()) * c;
    return detail::make_op<T>(
        "scale", a.shape(), std::move(out), {a}, [c](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            auto& pg = n.parents[0].mutable_grad();
            ArrMap<T>(pg.data(), Index(pg.size())) += c * ConstArrMap<T>(n.grad.data(), Index(n.grad.size()));
        });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Vec<T> out(size_t(a.size()));
    ArrMap<T>(out.data(), a.size()) = ConstArrMap<T>(a.data(), a.size()).max(T(0));
    return detail::make_op<T>(
        "relu", a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            const T* x = n.parents[0].data();
            const T* g = n.grad.data();
            T* pg = n.parents[0].mutable_grad().data();
            for (size_t i = 0; i < n.grad.size(); ++i) pg[i] += x[i] > T(0) ? g[i] : T(0);
        });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
    Vec<T> out(size_t(a.size()));
    ArrMap<T>(out.data(), a.size()) = ConstArrMap<T>(a.data(), a.size()).tanh();
    return detail::make_op<T>(
        "tanh", a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            const T* y = n.values.data();
            const T* g = n.grad.data();
            T* pg = n.parents[0].mutable_grad().data();
            for (size_t i = 0; i < n.grad.size(); ++i) pg[i] += g[i] * (T(1) - y[i] * y[i]);
        });
}

// Inverted dropout: surviving activations scaled by 1/(1-p); identity in
// eval mode. The mask is drawn from the caller's stream.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng& rng) {
    check_as<ConfigError>(p >= 0.0 && p < 1.0, "dropout rate must be in [0, 1)");
    if (!training || p == 0.0) return a;
    Vec<T> mask(size_t(a.size()));
    T keep_scale = T(1.0 / (1.0 - p));
    for (auto& m : mask) m = rng.bernoulli(p) ? T(0) : keep_scale;
    Vec<T> out(size_t(a.size()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
    return detail::make_op<T>(
        "dropout", a.shape(), std::move(out), {a}, [mask = std::move(mask)](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            const T* g = n.grad.data();
            T* pg = n.parents[0].mutable_grad().data();
            for (size_t i = 0; i < mask.size(); ++i) pg[i] += g[i] * mask[i];
        });
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    Index infer = -1;
    Index prod = 1;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            check_as<DimensionError>(infer < 0, "reshape: at most one -1 dimension");
            infer = Index(i);
        } else {
            prod *= shape[i];
        }
    }
    if (infer >= 0) {
        check_as<DimensionError>(prod != 0 && a.size() % prod == 0, "reshape: cannot infer dimension");
        shape[size_t(infer)] = a.size() / prod;
    }
    check_as<DimensionError>(numel(shape) == a.size(),
                             "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + ": size mismatch");
    Vec<T> out(a.values());
    return detail::make_op<T>(
        "reshape", std::move(shape), std::move(out), {a}, [](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            auto& pg = n.parents[0].mutable_grad();
            ArrMap<T>(pg.data(), Index(pg.size())) += ConstArrMap<T>(n.grad.data(), Index(n.grad.size()));
        });
}

namespace detail {

template <typename T>
void permute_raw(const T* src, const Shape& in_shape, const std::vector<Index>& axes, T* dst, bool accumulate) {
    size_t r = in_shape.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[size_t(axes[i])];
    Shape in_strides = row_major_strides(in_shape);
    // stride to advance in src when out index d increments
    Shape walk(r);
    for (size_t i = 0; i < r; ++i) walk[i] = in_strides[size_t(axes[i])];
    Shape idx(r, 0);
    Index total = numel(in_shape);
    Index off = 0;
    for (Index lin = 0; lin < total; ++lin) {
        if (accumulate)
            dst[off] += src[lin];
        else
            dst[lin] = src[off];
        for (Index d = Index(r) - 1; d >= 0; --d) {
            idx[size_t(d)]++;
            off += walk[size_t(d)];
            if (idx[size_t(d)] < out_shape[size_t(d)]) break;
            off -= walk[size_t(d)] * out_shape[size_t(d)];
            idx[size_t(d)] = 0;
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<Index> axes) {
    check_as<DimensionError>(Index(axes.size()) == a.rank(), "permute: axes rank mismatch");
    Shape out_shape(axes.size());
    std::vector<bool> used(axes.size(), false);
    for (size_t i = 0; i < axes.size(); ++i) {
        Index ax = detail::normalize_axis(axes[i], a.rank());
        check_as<DimensionError>(!used[size_t(ax)], "permute: duplicate axis");
        used[size_t(ax)] = true;
        axes[i] = ax;
        out_shape[i] = a.dim(ax);
    }
    Vec<T> out(size_t(a.size()));
    detail::permute_raw(a.data(), a.shape(), axes, out.data(), false);
    return detail::make_op<T>(
        "permute", std::move(out_shape), std::move(out), {a}, [axes](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            detail::permute_raw(n.grad.data(), n.parents[0].shape(), axes, n.parents[0].mutable_grad().data(), true);
        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, Index axis) {
    check_as<DimensionError>(!parts.empty(), "concat: no inputs");
    Index r = parts[0].rank();
    axis = detail::normalize_axis(axis, r);
    Shape out_shape = parts[0].shape();
    Index axis_total = 0;
    for (const auto& p : parts) {
        check_as<DimensionError>(p.rank() == r, "concat: rank mismatch");
        for (Index d = 0; d < r; ++d)
            check_as<DimensionError>(d == axis || p.dim(d) == out_shape[size_t(d)],
                                     "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                         shape_str(parts[0].shape()) + " on non-concat axis");
        axis_total += p.dim(axis);
    }
    out_shape[size_t(axis)] = axis_total;

    Index outer = 1;
    for (Index d = 0; d < axis; ++d) outer *= out_shape[size_t(d)];
    Index inner = 1;
    for (Index d = axis + 1; d < r; ++d) inner *= out_shape[size_t(d)];

    Vec<T> out(size_t(numel(out_shape)));
    Index out_row = axis_total * inner;
    Index off = 0;
    std::vector<Index> blocks;
    for (const auto& p : parts) {
        Index blk = p.dim(axis) * inner;
        blocks.push_back(blk);
        for (Index o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * out_row + off, p.data() + o * blk, size_t(blk) * sizeof(T));
        off += blk;
    }
    std::vector<Tensor<T>> parents(parts.begin(), parts.end());
    return detail::make_op<T>(
        "concat", std::move(out_shape), std::move(out), std::move(parents),
        [outer, out_row, blocks](TensorNode<T>& n) {
            Index off = 0;
            for (size_t i = 0; i < n.parents.size(); ++i) {
                Index blk = blocks[i];
                if (n.parents[i].requires_grad()) {
                    T* pg = n.parents[i].mutable_grad().data();
                    const T* g = n.grad.data();
                    for (Index o = 0; o < outer; ++o)
                        ArrMap<T>(pg + o * blk, blk) += ConstArrMap<T>(g + o * out_row + off, blk);
                }
                off += blk;
            }
        });
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, Index axis) {
    return concat(std::vector<Tensor<T>>(parts), axis);
}

// Contiguous sub-range along one axis.
template <typename T>
Tensor<T> narrow(const Tensor<T>& a, Index axis, Index start, Index len) {
    axis = detail::normalize_axis(axis, a.rank());
    check_as<DimensionError>(start >= 0 && len >= 1 && start + len <= a.dim(axis), "narrow: out of range");
    Shape out_shape = a.shape();
    out_shape[size_t(axis)] = len;
    Index outer = 1;
    for (Index d = 0; d < axis; ++d) outer *= a.dim(d);
    Index inner = 1;
    for (Index d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    Index in_row = a.dim(axis) * inner;
    Index out_row = len * inner;
    Vec<T> out(size_t(outer * out_row));
    for (Index o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * out_row, a.data() + o * in_row + start * inner, size_t(out_row) * sizeof(T));
    return detail::make_op<T>(
        "narrow", std::move(out_shape), std::move(out), {a}, [outer, in_row, out_row, start, inner](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            T* pg = n.parents[0].mutable_grad().data();
            const T* g = n.grad.data();
            for (Index o = 0; o < outer; ++o)
                ArrMap<T>(pg + o * in_row + start * inner, out_row) += ConstArrMap<T>(g + o * out_row, out_row);
        });
}

// Row gather along axis 0: out[i] = a[idx[i]]. Gradient scatter-adds back.
template <typename T>
Tensor<T> index_select0(const Tensor<T>& a, const std::vector<Index>& idx) {
    check_as<DimensionError>(a.rank() >= 1, "index_select0: need rank >= 1");
    Index rows = a.dim(0);
    Index rowsz = rows == 0 ? 0 : a.size() / rows;
    for (Index i : idx)
        check_as<DimensionError>(i >= 0 && i < rows, "index_select0: row " + std::to_string(i) + " out of range");
    Shape out_shape = a.shape();
    out_shape[0] = Index(idx.size());
    Vec<T> out(idx.size() * size_t(rowsz));
    for (size_t i = 0; i < idx.size(); ++i)
        std::memcpy(out.data() + i * size_t(rowsz), a.data() + size_t(idx[i]) * size_t(rowsz),
                    size_t(rowsz) * sizeof(T));
    return detail::make_op<T>(
        "index_select0", std::move(out_shape), std::move(out), {a}, [idx, rowsz](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            T* pg = nd.parents[0].mutable_grad().data();
            const T* g = nd.grad.data();
            for (size_t i = 0; i < idx.size(); ++i)
                ArrMap<T>(pg + size_t(idx[i]) * size_t(rowsz), rowsz) +=
                    ConstArrMap<T>(g + i * size_t(rowsz), rowsz);
        });
}

// ---------------------------------------------------------------------------
// Masking.
// ---------------------------------------------------------------------------

// Writes `fill` where the mask is false. Gradient is blocked at masked
// positions, so downstream arithmetic on sentinels cannot leak back.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& a, const BoolMask& mask, T fill = mask_sentinel<T>()) {
    using namespace detail;
    Shape so = broadcast_shape(a.shape(), mask.shape);
    check_as<DimensionError>(same_shape(so, a.shape()), "apply_mask: mask does not broadcast onto tensor");
    Shape stm = broadcast_strides(mask.shape, so);
    Shape sta = row_major_strides(a.shape());
    Vec<T> out(a.values());
    std::vector<std::uint8_t> keep(out.size());
    broadcast_walk(so, sta, stm, [&](Index lin, Index, Index om) {
        keep[size_t(lin)] = mask.v[size_t(om)];
        if (!mask.v[size_t(om)]) out[size_t(lin)] = fill;
    });
    return make_op<T>(
        "apply_mask", a.shape(), std::move(out), {a}, [keep = std::move(keep)](TensorNode<T>& n) {
            if (!n.parents[0].requires_grad()) return;
            const T* g = n.grad.data();
            T* pg = n.parents[0].mutable_grad().data();
            for (size_t i = 0; i < keep.size(); ++i)
                if (keep[i]) pg[i] += g[i];
        });
}

// ---------------------------------------------------------------------------
// Softmax.
// ---------------------------------------------------------------------------

// Numerically stable softmax along `axis`. Entries at or below the mask
// threshold are excluded from normalization and come out exactly zero; a
// slice with every entry masked is an error.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, Index axis) {
    axis = detail::normalize_axis(axis, a.rank());
    Index n = a.dim(axis);
    Index inner = 1;
    for (Index d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    Index outer = a.size() / (n * inner);
    Vec<T> out(size_t(a.size()));
    const T thr = mask_threshold<T>();
    const T* x = a.data();
    for (Index o = 0; o < outer; ++o) {
        for (Index i = 0; i < inner; ++i) {
            Index base = o * n * inner + i;
            T mx = -std::numeric_limits<T>::infinity();
            for (Index k = 0; k < n; ++k) {
                T v = x[base + k * inner];
                if (v > thr && v > mx) mx = v;
            }
            if (mx == -std::numeric_limits<T>::infinity())
                throw NumericError("softmax: every position in a slice is masked");
            T sum = T(0);
            for (Index k = 0; k < n; ++k) {
                T v = x[base + k * inner];
                T e = v > thr ? std::exp(v - mx) : T(0);
                out[size_t(base + k * inner)] = e;
                sum += e;
            }
            T inv = T(1) / sum;
            for (Index k = 0; k < n; ++k) out[size_t(base + k * inner)] *= inv;
        }
    }
    return detail::make_op<T>(
        "softmax", a.shape(), std::move(out), {a}, [n, inner, outer](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            const T* y = nd.values.data();
            const T* g = nd.grad.data();
            T* pg = nd.parents[0].mutable_grad().data();
            for (Index o = 0; o < outer; ++o) {
                for (Index i = 0; i < inner; ++i) {
                    Index base = o * n * inner + i;
                    T dot = T(0);
                    for (Index k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
                    for (Index k = 0; k < n; ++k) {
                        Index idx = base + k * inner;
                        pg[idx] += y[idx] * (g[idx] - dot);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Exclusive prefix sum along an axis: out[0] = 0, out[t] = out[t-1] + in[t-1].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cumsum_exclusive(const Tensor<T>& a, Index axis = 0) {
    axis = detail::normalize_axis(axis, a.rank());
    Index n = a.dim(axis);
    check_as<DimensionError>(n >= 1, "cumsum_exclusive: empty axis");
    Index inner = 1;
    for (Index d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
    Index outer = a.size() / (n * inner);
    Vec<T> out(size_t(a.size()), T(0));
    const T* x = a.data();
    for (Index o = 0; o < outer; ++o) {
        Index base = o * n * inner;
        for (Index t = 1; t < n; ++t) {
            ArrMap<T> cur(out.data() + base + t * inner, inner);
            cur = ConstArrMap<T>(out.data() + base + (t - 1) * inner, inner) +
                  ConstArrMap<T>(x + base + (t - 1) * inner, inner);
        }
    }
    return detail::make_op<T>(
        "cumsum_exclusive", a.shape(), std::move(out), {a}, [n, inner, outer](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            // d in[t] = sum of out-grads at steps > t (reverse exclusive sum).
            const T* g = nd.grad.data();
            T* pg = nd.parents[0].mutable_grad().data();
            Vec<T> acc(static_cast<size_t>(inner));
            for (Index o = 0; o < outer; ++o) {
                Index base = o * n * inner;
                std::fill(acc.begin(), acc.end(), T(0));
                for (Index t = n - 1; t >= 1; --t) {
                    ArrMap<T> a_(acc.data(), inner);
                    a_ += ConstArrMap<T>(g + base + t * inner, inner);
                    ArrMap<T>(pg + base + (t - 1) * inner, inner) += a_;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Matrix multiply with broadcast batch dimensions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_as<DimensionError>(a.rank() >= 2 && b.rank() >= 2, "matmul: operands must have rank >= 2");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    Index m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    Index k2 = sb[sb.size() - 2], nn = sb[sb.size() - 1];
    check_as<DimensionError>(k == k2, "matmul: inner dimensions disagree, " + shape_str(sa) + " x " + shape_str(sb));
    Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
    Shape batch = detail::broadcast_shape(ba, bb);
    Shape sta = detail::broadcast_strides(ba, batch), stb = detail::broadcast_strides(bb, batch);
    // strides above are in units of matrices, scale to elements
    for (auto& s : sta) s *= m * k;
    for (auto& s : stb) s *= k * nn;
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(nn);
    Index nbatch = numel(batch);
    Vec<T> out(size_t(nbatch * m * nn));
    const T* pa = a.data();
    const T* pb = b.data();
    detail::broadcast_walk(batch, sta, stb, [&](Index lin, Index oa, Index ob) {
        MatMap<T>(out.data() + lin * m * nn, m, nn).noalias() =
            ConstMatMap<T>(pa + oa, m, k) * ConstMatMap<T>(pb + ob, k, nn);
    });
    return detail::make_op<T>(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [batch, sta, stb, m, k, nn](TensorNode<T>& nd) {
            const T* g = nd.grad.data();
            const T* pa = nd.parents[0].data();
            const T* pb = nd.parents[1].data();
            T* ga = nd.parents[0].requires_grad() ? nd.parents[0].mutable_grad().data() : nullptr;
            T* gb = nd.parents[1].requires_grad() ? nd.parents[1].mutable_grad().data() : nullptr;
            detail::broadcast_walk(batch, sta, stb, [&](Index lin, Index oa, Index ob) {
                ConstMatMap<T> mg(g + lin * m * nn, m, nn);
                if (ga) MatMap<T>(ga + oa, m, k).noalias() += mg * ConstMatMap<T>(pb + ob, k, nn).transpose();
                if (gb) MatMap<T>(gb + ob, k, nn).noalias() += ConstMatMap<T>(pa + oa, m, k).transpose() * mg;
            });
        });
}

// ---------------------------------------------------------------------------
// Embedding lookup.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<Index>& ids) {
    check_as<DimensionError>(table.rank() == 2, "embedding: table must be [vocab, dim]");
    Index v = table.dim(0), d = table.dim(1);
    for (Index id : ids)
        check_as<UsageError>(id >= 0 && id < v, "embedding: token id " + std::to_string(id) + " outside vocabulary");
    Vec<T> out(ids.size() * size_t(d));
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out.data() + i * size_t(d), table.data() + size_t(ids[i]) * size_t(d), size_t(d) * sizeof(T));
    return detail::make_op<T>(
        "embedding", Shape{Index(ids.size()), d}, std::move(out), {table}, [ids, d](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            T* pg = nd.parents[0].mutable_grad().data();
            const T* g = nd.grad.data();
            for (size_t i = 0; i < ids.size(); ++i)
                ArrMap<T>(pg + size_t(ids[i]) * size_t(d), d) += ConstArrMap<T>(g + i * size_t(d), d);
        });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = ConstArrMap<T>(a.data(), a.size()).sum();
    return detail::make_op<T>(
        "sum", Shape{}, Vec<T>{s}, {a}, [](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            auto& pg = nd.parents[0].mutable_grad();
            ArrMap<T>(pg.data(), Index(pg.size())) += nd.grad[0];
        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / T(a.size()));
}

// ---------------------------------------------------------------------------
// Cross-entropy.
// ---------------------------------------------------------------------------

// Mean token-level cross-entropy over non-pad positions of [N, V] logits.
// Pad rows contribute exactly zero to the value and the gradient.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<Index>& targets, Index pad_id) {
    check_as<DimensionError>(logits.rank() == 2, "cross_entropy: logits must be [N, V]");
    Index n = logits.dim(0), v = logits.dim(1);
    check_as<DimensionError>(Index(targets.size()) == n, "cross_entropy: target length mismatch");
    const T* x = logits.data();
    Index count = 0;
    T total = T(0);
    for (Index i = 0; i < n; ++i) {
        Index t = targets[size_t(i)];
        if (t == pad_id) continue;
        check_as<UsageError>(t >= 0 && t < v, "cross_entropy: target id outside vocabulary");
        ConstArrMap<T> row(x + i * v, v);
        T mx = row.maxCoeff();
        T lse = std::log((row - mx).exp().sum()) + mx;
        total += lse - row[t];
        ++count;
    }
    check_as<UsageError>(count > 0, "cross_entropy: every position is padding");
    return detail::make_op<T>(
        "cross_entropy", Shape{}, Vec<T>{total / T(count)}, {logits},
        [targets, pad_id, n, v, count](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            T g = nd.grad[0] / T(count);
            const T* x = nd.parents[0].data();
            T* pg = nd.parents[0].mutable_grad().data();
            for (Index i = 0; i < n; ++i) {
                Index t = targets[size_t(i)];
                if (t == pad_id) continue;
                ConstArrMap<T> row(x + i * v, v);
                T mx = row.maxCoeff();
                Eigen::Array<T, Eigen::Dynamic, 1> sm = (row - mx).exp();
                sm /= sm.sum();
                ArrMap<T> grow(pg + i * v, v);
                grow += g * sm;
                grow[t] -= g;
            }
        });
}

// Row-wise log-softmax probabilities without graph recording; used by the
// search code to score candidate tokens.
template <typename T>
Vec<T> log_softmax_row(const T* x, Index v) {
    ConstArrMap<T> row(x, v);
    T mx = row.maxCoeff();
    T lse = std::log((row - mx).exp().sum()) + mx;
    Vec<T> out(static_cast<size_t>(v));
    for (Index i = 0; i < v; ++i) out[size_t(i)] = x[i] - lse;
    return out;
}

}  // namespace comer
