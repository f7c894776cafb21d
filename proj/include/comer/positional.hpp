// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "comer/tensor.hpp"

namespace comer {

// Sinusoidal encoding of (possibly fractional) positions: slot 2i holds
// sin(p * w_i), slot 2i+1 holds cos(p * w_i) with w_i = 10000^(-2i/d).
// Encodings are constants and never carry gradients.
template <typename T>
Tensor<T> sinusoid_pe(const Vec<T>& positions, Index d) {
    check_as<ConfigError>(d > 0 && d % 2 == 0, "sinusoid_pe: dimension must be positive and even");
    Index n = Index(positions.size());
    Vec<T> out(size_t(n * d));
    for (Index i = 0; i < d / 2; ++i) {
        T omega = T(std::pow(10000.0, -2.0 * double(i) / double(d)));
        for (Index p = 0; p < n; ++p) {
            T arg = positions[size_t(p)] * omega;
            out[size_t(p * d + 2 * i)] = std::sin(arg);
            out[size_t(p * d + 2 * i + 1)] = std::cos(arg);
        }
    }
    return Tensor<T>(Shape{n, d}, std::move(out));
}

// Encoding for integer token steps 0..t_max-1, shape [t_max, d].
template <typename T>
Tensor<T> word_pe(Index t_max, Index d) {
    check_as<ConfigError>(t_max > 0, "word_pe: need at least one position");
    Vec<T> pos(static_cast<size_t>(t_max));
    for (Index t = 0; t < t_max; ++t) pos[size_t(t)] = T(t);
    return sinusoid_pe(pos, d);
}

// 2-D image encoding, shape [h, w, d]: row/column coordinates are normalized
// by their extents and each half of the feature dimension encodes one axis.
template <typename T>
Tensor<T> image_pe(Index h, Index w, Index d) {
    check_as<ConfigError>(h > 0 && w > 0, "image_pe: empty grid");
    check_as<ConfigError>(d % 4 == 0, "image_pe: dimension must be divisible by 4");
    Index dh = d / 2;
    Vec<T> xs(static_cast<size_t>(h)), ys(static_cast<size_t>(w));
    for (Index x = 0; x < h; ++x) xs[size_t(x)] = T(x) / T(h);
    for (Index y = 0; y < w; ++y) ys[size_t(y)] = T(y) / T(w);
    Tensor<T> px = sinusoid_pe(xs, dh);  // [h, d/2]
    Tensor<T> py = sinusoid_pe(ys, dh);  // [w, d/2]
    Vec<T> out(size_t(h * w * d));
    for (Index x = 0; x < h; ++x)
        for (Index y = 0; y < w; ++y) {
            T* dst = out.data() + (x * w + y) * d;
            std::copy(px.data() + x * dh, px.data() + (x + 1) * dh, dst);
            std::copy(py.data() + y * dh, py.data() + (y + 1) * dh, dst + dh);
        }
    return Tensor<T>(Shape{h, w, d}, std::move(out));
}

}  // namespace comer
