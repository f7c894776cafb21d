// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "comer/tensor.hpp"

namespace comer {

// Running statistics for batch normalization over the trailing channel axis.
// The stat buffers are plain tensors so checkpointing can address them by
// name next to trainable parameters.
template <typename T>
struct NormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;
    bool initialized = false;
    T momentum = T(0.1);
    T eps = T(1e-5);

    explicit NormState(Index channels)
        : running_mean(Tensor<T>::zeros({channels})), running_var(Tensor<T>::ones({channels})) {}
    Index channels() const { return running_mean.dim(0); }
    // Marks the default stats (mean 0, var 1) usable in eval mode.
    void accept_defaults() { initialized = true; }
};

// Batch normalization over the last axis of x; every leading axis is part of
// the batch. Normalization uses the biased variance; the running variance is
// updated with the unbiased estimate when more than one row is present.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, NormState<T>& state,
                    bool training) {
    Index c = x.dim(x.rank() - 1);
    check_as<DimensionError>(gamma.rank() == 1 && gamma.dim(0) == c, "batchnorm: gamma must be [channels]");
    check_as<DimensionError>(beta.rank() == 1 && beta.dim(0) == c, "batchnorm: beta must be [channels]");
    check_as<DimensionError>(state.channels() == c, "batchnorm: state channel count mismatch");
    Index n = x.size() / c;
    const T* xv = x.data();
    Vec<T> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
    if (training) {
        check_as<UsageError>(n >= 1, "batchnorm: empty batch");
        ArrMap<T> m(mean.data(), c), v(var.data(), c);
        m.setZero();
        for (Index r = 0; r < n; ++r) m += ConstArrMap<T>(xv + r * c, c);
        m /= T(n);
        v.setZero();
        for (Index r = 0; r < n; ++r) v += (ConstArrMap<T>(xv + r * c, c) - m).square();
        v /= T(n);
        T unbias = n > 1 ? T(n) / T(n - 1) : T(1);
        T* rm = state.running_mean.mutable_values().data();
        T* rv = state.running_var.mutable_values().data();
        for (Index i = 0; i < c; ++i) {
            rm[i] = (T(1) - state.momentum) * rm[i] + state.momentum * mean[size_t(i)];
            rv[i] = (T(1) - state.momentum) * rv[i] + state.momentum * unbias * var[size_t(i)];
        }
        state.initialized = true;
    } else {
        check_as<StateError>(state.initialized, "batchnorm: eval mode requires initialized running statistics");
        std::copy(state.running_mean.data(), state.running_mean.data() + c, mean.begin());
        std::copy(state.running_var.data(), state.running_var.data() + c, var.begin());
    }
    Vec<T> inv_std(static_cast<size_t>(c));
    for (Index i = 0; i < c; ++i) inv_std[size_t(i)] = T(1) / std::sqrt(var[size_t(i)] + state.eps);
    Vec<T> out(size_t(x.size()));
    {
        ConstArrMap<T> mg(gamma.data(), c), mb(beta.data(), c);
        ConstArrMap<T> mm(mean.data(), c), mi(inv_std.data(), c);
        for (Index r = 0; r < n; ++r)
            ArrMap<T>(out.data() + r * c, c) = (ConstArrMap<T>(xv + r * c, c) - mm) * mi * mg + mb;
    }
    return detail::make_op<T>(
        "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
        [n, c, training, mean = std::move(mean), inv_std = std::move(inv_std)](TensorNode<T>& nd) {
            const T* xv = nd.parents[0].data();
            const T* gm = nd.parents[1].data();
            const T* g = nd.grad.data();
            ConstArrMap<T> mm(mean.data(), c), mi(inv_std.data(), c);
            // per-channel sums of dy and dy * x_hat
            Vec<T> sum_dy(size_t(c), T(0)), sum_dyx(size_t(c), T(0));
            ArrMap<T> sdy(sum_dy.data(), c), sdyx(sum_dyx.data(), c);
            for (Index r = 0; r < n; ++r) {
                ConstArrMap<T> gr(g + r * c, c);
                sdy += gr;
                sdyx += gr * (ConstArrMap<T>(xv + r * c, c) - mm) * mi;
            }
            if (nd.parents[1].requires_grad())
                ArrMap<T>(nd.parents[1].mutable_grad().data(), c) += sdyx;
            if (nd.parents[2].requires_grad())
                ArrMap<T>(nd.parents[2].mutable_grad().data(), c) += sdy;
            if (!nd.parents[0].requires_grad()) return;
            T* pg = nd.parents[0].mutable_grad().data();
            ConstArrMap<T> mgm(gm, c);
            if (training) {
                T invn = T(1) / T(n);
                for (Index r = 0; r < n; ++r) {
                    ConstArrMap<T> gr(g + r * c, c);
                    ArrMap<T>(pg + r * c, c) +=
                        mgm * mi * (gr - invn * sdy - (ConstArrMap<T>(xv + r * c, c) - mm) * mi * invn * sdyx);
                }
            } else {
                for (Index r = 0; r < n; ++r)
                    ArrMap<T>(pg + r * c, c) += ConstArrMap<T>(g + r * c, c) * mgm * mi;
            }
        });
}

// Layer normalization over the last axis.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    Index c = x.dim(x.rank() - 1);
    check_as<DimensionError>(gamma.rank() == 1 && gamma.dim(0) == c, "layernorm: gamma must be [channels]");
    check_as<DimensionError>(beta.rank() == 1 && beta.dim(0) == c, "layernorm: beta must be [channels]");
    Index n = x.size() / c;
    const T* xv = x.data();
    Vec<T> out(size_t(x.size()));
    Vec<T> inv_std(static_cast<size_t>(n)), mean(static_cast<size_t>(n));
    ConstArrMap<T> mg(gamma.data(), c), mb(beta.data(), c);
    for (Index r = 0; r < n; ++r) {
        ConstArrMap<T> row(xv + r * c, c);
        T mu = row.mean();
        T var = (row - mu).square().sum() / T(c);
        T is = T(1) / std::sqrt(var + eps);
        mean[size_t(r)] = mu;
        inv_std[size_t(r)] = is;
        ArrMap<T>(out.data() + r * c, c) = (row - mu) * is * mg + mb;
    }
    return detail::make_op<T>(
        "layernorm", x.shape(), std::move(out), {x, gamma, beta},
        [n, c, mean = std::move(mean), inv_std = std::move(inv_std)](TensorNode<T>& nd) {
            const T* xv = nd.parents[0].data();
            const T* gm = nd.parents[1].data();
            const T* g = nd.grad.data();
            T* pg = nd.parents[0].requires_grad() ? nd.parents[0].mutable_grad().data() : nullptr;
            T* pgg = nd.parents[1].requires_grad() ? nd.parents[1].mutable_grad().data() : nullptr;
            T* pgb = nd.parents[2].requires_grad() ? nd.parents[2].mutable_grad().data() : nullptr;
            ConstArrMap<T> mgm(gm, c);
            T invc = T(1) / T(c);
            for (Index r = 0; r < n; ++r) {
                ConstArrMap<T> row(xv + r * c, c), gr(g + r * c, c);
                T is = inv_std[size_t(r)];
                Eigen::Array<T, Eigen::Dynamic, 1> xhat = (row - mean[size_t(r)]) * is;
                if (pgg) ArrMap<T>(pgg, c) += gr * xhat;
                if (pgb) ArrMap<T>(pgb, c) += gr;
                if (pg) {
                    Eigen::Array<T, Eigen::Dynamic, 1> gx = gr * mgm;
                    T s1 = gx.sum(), s2 = (gx * xhat).sum();
                    ArrMap<T>(pg + r * c, c) += is * (gx - invc * s1 - xhat * invc * s2);
                }
            }
        });
}

}  // namespace comer
