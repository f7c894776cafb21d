// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "comer/conv.hpp"
#include "comer/norm.hpp"
#include "comer/ops.hpp"

namespace comer {

template <typename T>
struct LinearParams {
    Tensor<T> w;  // [in, out]
    Tensor<T> b;  // [out]

    static LinearParams zeros(Index in, Index out) {
        return {Tensor<T>::zeros({in, out}), Tensor<T>::zeros({out})};
    }
};

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& p) {
    return add(matmul(x, p.w), p.b);
}

// ---------------------------------------------------------------------------
// Multi-head attention building blocks. Activations are [batch, steps, dim];
// per-head layout is [batch, heads, steps, head_dim].
// ---------------------------------------------------------------------------

template <typename T>
struct MhaParams {
    Index heads = 1;
    LinearParams<T> q, k, v, o;

    static MhaParams zeros(Index d_model, Index heads) {
        check_as<ConfigError>(heads > 0 && d_model % heads == 0,
                              "attention: model dim must be divisible by head count");
        return {heads, LinearParams<T>::zeros(d_model, d_model), LinearParams<T>::zeros(d_model, d_model),
                LinearParams<T>::zeros(d_model, d_model), LinearParams<T>::zeros(d_model, d_model)};
    }
};

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, Index heads) {
    check_as<DimensionError>(x.rank() == 3, "split_heads: expected [batch, steps, dim]");
    Index b = x.dim(0), t = x.dim(1), d = x.dim(2);
    check_as<DimensionError>(d % heads == 0, "split_heads: dim not divisible by heads");
    return permute(reshape(x, {b, t, heads, d / heads}), {0, 2, 1, 3});
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    check_as<DimensionError>(x.rank() == 4, "merge_heads: expected [batch, heads, steps, head_dim]");
    Index b = x.dim(0), h = x.dim(1), t = x.dim(2), dk = x.dim(3);
    return reshape(permute(x, {0, 2, 1, 3}), {b, t, h * dk});
}

// Scaled dot-product scores Q K^T / sqrt(head_dim): [b,h,T,dk] x [b,h,L,dk]
// -> [b,h,T,L].
template <typename T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k) {
    check_as<DimensionError>(q.rank() == 4 && k.rank() == 4, "attention_scores: expected per-head layout");
    check_as<DimensionError>(q.dim(3) == k.dim(3), "attention_scores: head dims disagree");
    Index dk = q.dim(3);
    return scale(matmul(q, permute(k, {0, 1, 3, 2})), T(1) / std::sqrt(T(dk)));
}

// Lower-triangular mask over [steps, steps]: query t may see keys 0..t.
inline BoolMask causal_mask(Index steps) {
    std::vector<std::uint8_t> v(static_cast<size_t>(steps * steps), 0);
    for (Index t = 0; t < steps; ++t)
        for (Index l = 0; l <= t; ++l) v[size_t(t * steps + l)] = 1;
    return BoolMask(Shape{steps, steps}, std::move(v));
}

// Key-validity mask [batch, L] broadcast as [batch, 1, 1, L].
inline BoolMask key_mask(Index batch, Index l, const std::vector<std::uint8_t>& valid) {
    check_as<DimensionError>(Index(valid.size()) == batch * l, "key_mask: size mismatch");
    return BoolMask(Shape{batch, 1, 1, l}, valid);
}

// ---------------------------------------------------------------------------
// Attention refinement. The refinement term is produced from the exclusive
// coverage of past attention by a kernel-turned-feature map:
//   phi(C) = norm(max(0, conv(C) + bias)) W
// evaluated on the attention grid, one output channel per head.
// ---------------------------------------------------------------------------

template <typename T>
struct ArmParams {
    Tensor<T> kernel;    // [k, k, h_in, d_c]
    Tensor<T> bias;      // [d_c]
    Tensor<T> proj;      // [d_c, heads]
    Tensor<T> bn_gamma;  // [d_c]
    Tensor<T> bn_beta;   // [d_c]
    NormState<T> bn;

    ArmParams(Index k, Index h_in, Index d_c, Index heads)
        : kernel(Tensor<T>::zeros({k, k, h_in, d_c})),
          bias(Tensor<T>::zeros({d_c})),
          proj(Tensor<T>::zeros({d_c, heads})),
          bn_gamma(Tensor<T>::ones({d_c})),
          bn_beta(Tensor<T>::zeros({d_c})),
          bn(d_c) {
        check_as<ConfigError>(k % 2 == 1, "refinement kernel size must be odd");
    }

    Index ksize() const { return kernel.dim(0); }
    Index h_in() const { return kernel.dim(2); }
    Index d_c() const { return kernel.dim(3); }
    Index heads() const { return proj.dim(1); }
};

// Core refinement map. cov is exclusive coverage laid out on the image grid,
// [n, h_img, w_img, h_in]; the result is [n, h_img, w_img, heads].
//
// This function is under a memory budget: beyond its own output, it must not
// allocate more than a small constant multiple of the input grid (im2col-style
// patch matrices are out). Each stage reuses one handle so eval-mode peaks
// stay at in+out of a single stage.
template <typename T>
Tensor<T> arm_phi(ArmParams<T>& arm, const Tensor<T>& cov, bool training) {
    check_as<DimensionError>(cov.rank() == 4 && cov.dim(3) == arm.h_in(),
                             "refinement: coverage grid must be [n, h, w, " + std::to_string(arm.h_in()) + "]");
    Tensor<T> x = conv2d(cov, arm.kernel, arm.bias);
    x = relu(x);
    x = batchnorm(x, arm.bn_gamma, arm.bn_beta, arm.bn, training);
    x = matmul(x, arm.proj);  // [n, h_img, w_img, d_c] x [d_c, heads]
    return x;
}

// Parallel (teacher-forced) refinement over a whole attention stack.
// attn_src: [batch, h_in, steps, L] -> R: [batch, heads, steps, L].
template <typename T>
Tensor<T> arm_refinement(ArmParams<T>& arm, const Tensor<T>& attn_src, Index h_img, Index w_img, bool training) {
    check_as<DimensionError>(attn_src.rank() == 4, "refinement: expected [batch, h_in, steps, L]");
    Index b = attn_src.dim(0), h_in = attn_src.dim(1), steps = attn_src.dim(2), l = attn_src.dim(3);
    check_as<DimensionError>(h_in == arm.h_in(), "refinement: attention stack has " + std::to_string(h_in) +
                                                     " channels, kernel expects " + std::to_string(arm.h_in()));
    check_as<DimensionError>(h_img * w_img == l, "refinement: grid " + std::to_string(h_img) + "x" +
                                                     std::to_string(w_img) + " does not cover L=" + std::to_string(l));
    Tensor<T> cov = cumsum_exclusive(permute(attn_src, {0, 2, 3, 1}), 1);  // [b, steps, L, h_in]
    Tensor<T> r = arm_phi(arm, reshape(cov, {b * steps, h_img, w_img, h_in}), training);
    return permute(reshape(r, {b, steps, l, arm.heads()}), {0, 3, 1, 2});
}

}  // namespace comer
