// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <limits>
#include <vector>

#include "comer/tensor.hpp"

namespace comer {

// 2-D ops use channels-last layout throughout: activations are
// [batch, height, width, channels] and kernels [kh, kw, c_in, c_out].
// Convolution is cross-correlation with zero "same" padding for odd
// kernels, so output spatial dims are ceil(dim / stride).

namespace detail {

template <typename T>
using StridedMat = Eigen::Map<EigenRowMajor<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMat = Eigen::Map<const EigenRowMajor<T>, 0, Eigen::OuterStride<>>;

// Iterates the (batch row, tap) GEMM segments of a same-padded strided
// cross-correlation. f(in_off, out_off, tap, count) receives element offsets
// of the first input/output cell of a contiguous run of `count` output
// columns that all see valid input under kernel tap `tap`.
template <typename F>
void conv_segments(Index batch, Index h, Index w, Index c_in, Index h_out, Index w_out, Index c_out, Index kh,
                   Index kw, Index stride, F&& f) {
    Index ph = (kh - 1) / 2, pw = (kw - 1) / 2;
    for (Index b = 0; b < batch; ++b) {
        for (Index yo = 0; yo < h_out; ++yo) {
            Index y_base = yo * stride - ph;
            for (Index dy = 0; dy < kh; ++dy) {
                Index yi = y_base + dy;
                if (yi < 0 || yi >= h) continue;
                for (Index dx = 0; dx < kw; ++dx) {
                    // valid x_out need 0 <= x_out*stride - pw + dx < w
                    Index lo = 0;
                    if (pw - dx > 0) lo = (pw - dx + stride - 1) / stride;
                    Index hi = (w - 1 + pw - dx) / stride;
                    if (hi > w_out - 1) hi = w_out - 1;
                    if (lo > hi) continue;
                    Index xi = lo * stride - pw + dx;
                    Index in_off = ((b * h + yi) * w + xi) * c_in;
                    Index out_off = ((b * h_out + yo) * w_out + lo) * c_out;
                    f(in_off, out_off, dy * kw + dx, hi - lo + 1);
                }
            }
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias, Index stride = 1) {
    check_as<DimensionError>(input.rank() == 4, "conv2d: input must be [b, h, w, c], got " + shape_str(input.shape()));
    check_as<DimensionError>(kernel.rank() == 4, "conv2d: kernel must be [kh, kw, c_in, c_out]");
    check_as<ConfigError>(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
    Index batch = input.dim(0), h = input.dim(1), w = input.dim(2), c_in = input.dim(3);
    Index kh = kernel.dim(0), kw = kernel.dim(1), c_out = kernel.dim(3);
    check_as<ConfigError>(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel dims must be odd for same padding");
    check_as<DimensionError>(kernel.dim(2) == c_in, "conv2d: kernel expects " + std::to_string(kernel.dim(2)) +
                                                        " input channels, tensor has " + std::to_string(c_in));
    bool has_bias = bias.size() > 0;
    if (has_bias)
        check_as<DimensionError>(bias.rank() == 1 && bias.dim(0) == c_out, "conv2d: bias must be [c_out]");
    Index h_out = (h + stride - 1) / stride, w_out = (w + stride - 1) / stride;

    Vec<T> out(size_t(batch * h_out * w_out * c_out), T(0));
    if (has_bias) {
        const T* bv = bias.data();
        for (Index r = 0; r < batch * h_out * w_out; ++r)
            std::memcpy(out.data() + r * c_out, bv, size_t(c_out) * sizeof(T));
    }
    const T* in = input.data();
    const T* kv = kernel.data();
    Index in_stride = stride * c_in;
    detail::conv_segments(batch, h, w, c_in, h_out, w_out, c_out, kh, kw, stride,
                          [&](Index in_off, Index out_off, Index tap, Index count) {
                              detail::ConstStridedMat<T> seg(in + in_off, count, c_in,
                                                             Eigen::OuterStride<>(in_stride));
                              ConstMatMap<T> tapw(kv + tap * c_in * c_out, c_in, c_out);
                              MatMap<T>(out.data() + out_off, count, c_out).noalias() += seg * tapw;
                          });

    std::vector<Tensor<T>> parents = has_bias ? std::vector<Tensor<T>>{input, kernel, bias}
                                              : std::vector<Tensor<T>>{input, kernel};
    return detail::make_op<T>(
        "conv2d", Shape{batch, h_out, w_out, c_out}, std::move(out), std::move(parents),
        [batch, h, w, c_in, h_out, w_out, c_out, kh, kw, stride, in_stride, has_bias](TensorNode<T>& nd) {
            const T* g = nd.grad.data();
            const T* in = nd.parents[0].data();
            const T* kv = nd.parents[1].data();
            T* gi = nd.parents[0].requires_grad() ? nd.parents[0].mutable_grad().data() : nullptr;
            T* gk = nd.parents[1].requires_grad() ? nd.parents[1].mutable_grad().data() : nullptr;
            detail::conv_segments(
                batch, h, w, c_in, h_out, w_out, c_out, kh, kw, stride,
                [&](Index in_off, Index out_off, Index tap, Index count) {
                    ConstMatMap<T> gseg(g + out_off, count, c_out);
                    if (gi) {
                        ConstMatMap<T> tapw(kv + tap * c_in * c_out, c_in, c_out);
                        detail::StridedMat<T>(gi + in_off, count, c_in, Eigen::OuterStride<>(in_stride)).noalias() +=
                            gseg * tapw.transpose();
                    }
                    if (gk) {
                        detail::ConstStridedMat<T> seg(in + in_off, count, c_in, Eigen::OuterStride<>(in_stride));
                        MatMap<T>(gk + tap * c_in * c_out, c_in, c_out).noalias() += seg.transpose() * gseg;
                    }
                });
            if (has_bias && nd.parents[2].requires_grad()) {
                T* gb = nd.parents[2].mutable_grad().data();
                for (Index r = 0; r < batch * h_out * w_out; ++r)
                    ArrMap<T>(gb, c_out) += ConstArrMap<T>(g + r * c_out, c_out);
            }
        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, Index stride = 1) {
    return conv2d(input, kernel, Tensor<T>::zeros({0}), stride);
}

// 2x2 average pooling with stride 2. Inputs must have even spatial dims;
// odd inputs go through replication_pad_to_even first.
template <typename T>
Tensor<T> avgpool_2x2(const Tensor<T>& input) {
    check_as<DimensionError>(input.rank() == 4, "avgpool_2x2: input must be [b, h, w, c]");
    Index batch = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
    check_as<DimensionError>(h % 2 == 0 && w % 2 == 0, "avgpool_2x2: spatial dims must be even, got " +
                                                           shape_str(input.shape()));
    Index ho = h / 2, wo = w / 2;
    Vec<T> out(size_t(batch * ho * wo * c));
    const T* x = input.data();
    for (Index b = 0; b < batch; ++b)
        for (Index y = 0; y < ho; ++y)
            for (Index xo = 0; xo < wo; ++xo) {
                Index i00 = ((b * h + 2 * y) * w + 2 * xo) * c;
                ArrMap<T> o(out.data() + ((b * ho + y) * wo + xo) * c, c);
                o = (ConstArrMap<T>(x + i00, c) + ConstArrMap<T>(x + i00 + c, c) +
                     ConstArrMap<T>(x + i00 + w * c, c) + ConstArrMap<T>(x + i00 + (w + 1) * c, c)) *
                    T(0.25);
            }
    return detail::make_op<T>(
        "avgpool_2x2", Shape{batch, ho, wo, c}, std::move(out), {input}, [batch, h, w, c, ho, wo](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            const T* g = nd.grad.data();
            T* pg = nd.parents[0].mutable_grad().data();
            for (Index b = 0; b < batch; ++b)
                for (Index y = 0; y < ho; ++y)
                    for (Index xo = 0; xo < wo; ++xo) {
                        Index i00 = ((b * h + 2 * y) * w + 2 * xo) * c;
                        ConstArrMap<T> go(g + ((b * ho + y) * wo + xo) * c, c);
                        ArrMap<T>(pg + i00, c) += go * T(0.25);
                        ArrMap<T>(pg + i00 + c, c) += go * T(0.25);
                        ArrMap<T>(pg + i00 + w * c, c) += go * T(0.25);
                        ArrMap<T>(pg + i00 + (w + 1) * c, c) += go * T(0.25);
                    }
        });
}

// Max pooling with same padding; padded cells never win. Gradient flows to
// the first maximal input of each window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, Index k, Index stride) {
    check_as<DimensionError>(input.rank() == 4, "maxpool2d: input must be [b, h, w, c]");
    check_as<ConfigError>(k % 2 == 1, "maxpool2d: kernel must be odd for same padding");
    Index batch = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
    Index p = (k - 1) / 2;
    Index ho = (h + stride - 1) / stride, wo = (w + stride - 1) / stride;
    Vec<T> out(size_t(batch * ho * wo * c), std::numeric_limits<T>::lowest());
    std::vector<Index> arg(out.size(), -1);
    const T* x = input.data();
    for (Index b = 0; b < batch; ++b)
        for (Index yo = 0; yo < ho; ++yo)
            for (Index xo = 0; xo < wo; ++xo)
                for (Index dy = 0; dy < k; ++dy) {
                    Index yi = yo * stride - p + dy;
                    if (yi < 0 || yi >= h) continue;
                    for (Index dx = 0; dx < k; ++dx) {
                        Index xi = xo * stride - p + dx;
                        if (xi < 0 || xi >= w) continue;
                        Index in_off = ((b * h + yi) * w + xi) * c;
                        Index out_off = ((b * ho + yo) * wo + xo) * c;
                        for (Index ch = 0; ch < c; ++ch) {
                            T v = x[in_off + ch];
                            if (v > out[size_t(out_off + ch)]) {
                                out[size_t(out_off + ch)] = v;
                                arg[size_t(out_off + ch)] = in_off + ch;
                            }
                        }
                    }
                }
    return detail::make_op<T>(
        "maxpool2d", Shape{batch, ho, wo, c}, std::move(out), {input}, [arg = std::move(arg)](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            const T* g = nd.grad.data();
            T* pg = nd.parents[0].mutable_grad().data();
            for (size_t i = 0; i < arg.size(); ++i) pg[size_t(arg[i])] += g[i];
        });
}

// Replicates the last row/column so both spatial dims become even.
template <typename T>
Tensor<T> replication_pad_to_even(const Tensor<T>& input) {
    check_as<DimensionError>(input.rank() == 4, "replication_pad_to_even: input must be [b, h, w, c]");
    Index batch = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
    Index ho = h + (h % 2), wo = w + (w % 2);
    if (ho == h && wo == w) return input;
    Vec<T> out(size_t(batch * ho * wo * c));
    const T* x = input.data();
    for (Index b = 0; b < batch; ++b)
        for (Index y = 0; y < ho; ++y) {
            Index yi = y < h ? y : h - 1;
            for (Index xo = 0; xo < wo; ++xo) {
                Index xi = xo < w ? xo : w - 1;
                std::memcpy(out.data() + ((b * ho + y) * wo + xo) * c, x + ((b * h + yi) * w + xi) * c,
                            size_t(c) * sizeof(T));
            }
        }
    return detail::make_op<T>(
        "replication_pad_to_even", Shape{batch, ho, wo, c}, std::move(out), {input},
        [batch, h, w, c, ho, wo](TensorNode<T>& nd) {
            if (!nd.parents[0].requires_grad()) return;
            const T* g = nd.grad.data();
            T* pg = nd.parents[0].mutable_grad().data();
            for (Index b = 0; b < batch; ++b)
                for (Index y = 0; y < ho; ++y) {
                    Index yi = y < h ? y : h - 1;
                    for (Index xo = 0; xo < wo; ++xo) {
                        Index xi = xo < w ? xo : w - 1;
                        ArrMap<T>(pg + ((b * h + yi) * w + xi) * c, c) +=
                            ConstArrMap<T>(g + ((b * ho + y) * wo + xo) * c, c);
                    }
                }
        });
}

}  // namespace comer
