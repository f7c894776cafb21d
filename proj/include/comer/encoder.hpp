// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "comer/conv.hpp"
#include "comer/norm.hpp"
#include "comer/ops.hpp"
#include "comer/rng.hpp"

namespace comer {

// Densely connected feature extractor, channels-last. Kernel layout is
// [kh, kw, c_in, c_out]; convolutions inside blocks carry no bias (the
// preceding normalization absorbs it), only the output projection does.

struct EncoderConfig {
    Index growth = 24;                        // channels added per layer
    std::vector<Index> block_layers = {16, 16, 16};
    double theta = 0.5;                       // transition compression
    bool wide_stem = false;                   // 7x7/maxpool stem vs single 3x3
    Index d_model = 256;
    double dropout = 0.2;

    Index stem_channels() const { return 2 * growth; }
    // total spatial downsample factor
    Index stride() const {
        Index s = wide_stem ? 4 : 2;
        for (size_t i = 1; i < block_layers.size(); ++i) s *= 2;
        return s;
    }
};

template <typename T>
struct DenseLayerParams {
    Tensor<T> bn1_g, bn1_b;
    NormState<T> bn1;
    Tensor<T> conv1;  // [1, 1, c_in, 4 * growth]
    Tensor<T> bn2_g, bn2_b;
    NormState<T> bn2;
    Tensor<T> conv2;  // [3, 3, 4 * growth, growth]

    DenseLayerParams(Index c_in, Index growth)
        : bn1_g(Tensor<T>::ones({c_in})),
          bn1_b(Tensor<T>::zeros({c_in})),
          bn1(c_in),
          conv1(Tensor<T>::zeros({1, 1, c_in, 4 * growth})),
          bn2_g(Tensor<T>::ones({4 * growth})),
          bn2_b(Tensor<T>::zeros({4 * growth})),
          bn2(4 * growth),
          conv2(Tensor<T>::zeros({3, 3, 4 * growth, growth})) {}
};

template <typename T>
struct TransitionParams {
    Tensor<T> bn_g, bn_b;
    NormState<T> bn;
    Tensor<T> conv;  // [1, 1, c_in, floor(theta * c_in)]

    TransitionParams(Index c_in, Index c_out)
        : bn_g(Tensor<T>::ones({c_in})), bn_b(Tensor<T>::zeros({c_in})), bn(c_in),
          conv(Tensor<T>::zeros({1, 1, c_in, c_out})) {}
};

template <typename T>
struct EncoderParams {
    EncoderConfig cfg;
    Tensor<T> stem_kernel;
    Tensor<T> stem_bn_g, stem_bn_b;
    NormState<T> stem_bn;
    std::vector<std::vector<DenseLayerParams<T>>> blocks;
    std::vector<TransitionParams<T>> transitions;
    Tensor<T> out_bn_g, out_bn_b;
    NormState<T> out_bn;
    Tensor<T> out_kernel;  // [1, 1, c_final, d_model]
    Tensor<T> out_bias;

    explicit EncoderParams(const EncoderConfig& c)
        : cfg(c),
          stem_kernel(Tensor<T>::zeros({c.wide_stem ? 7 : 3, c.wide_stem ? 7 : 3, 1, c.stem_channels()})),
          stem_bn_g(Tensor<T>::ones({c.stem_channels()})),
          stem_bn_b(Tensor<T>::zeros({c.stem_channels()})),
          stem_bn(c.stem_channels()),
          out_bn_g(Tensor<T>::ones({final_channels(c)})),
          out_bn_b(Tensor<T>::zeros({final_channels(c)})),
          out_bn(final_channels(c)),
          out_kernel(Tensor<T>::zeros({1, 1, final_channels(c), c.d_model})),
          out_bias(Tensor<T>::zeros({c.d_model})) {
        Index ch = c.stem_channels();
        for (size_t b = 0; b < c.block_layers.size(); ++b) {
            blocks.emplace_back();
            for (Index l = 0; l < c.block_layers[b]; ++l) {
                blocks.back().emplace_back(ch, c.growth);
                ch += c.growth;
            }
            if (b + 1 < c.block_layers.size()) {
                Index c_out = Index(double(ch) * c.theta);
                transitions.emplace_back(ch, c_out);
                ch = c_out;
            }
        }
    }

    static Index final_channels(const EncoderConfig& c) {
        Index ch = c.stem_channels();
        for (size_t b = 0; b < c.block_layers.size(); ++b) {
            ch += c.block_layers[b] * c.growth;
            if (b + 1 < c.block_layers.size()) ch = Index(double(ch) * c.theta);
        }
        return ch;
    }

    template <typename Fn>
    void visit(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".stem.kernel", stem_kernel);
        fn(prefix + ".stem.bn.gamma", stem_bn_g);
        fn(prefix + ".stem.bn.beta", stem_bn_b);
        for (size_t b = 0; b < blocks.size(); ++b) {
            for (size_t l = 0; l < blocks[b].size(); ++l) {
                std::string p = prefix + ".block" + std::to_string(b) + ".layer" + std::to_string(l);
                auto& dl = blocks[b][l];
                fn(p + ".bn1.gamma", dl.bn1_g);
                fn(p + ".bn1.beta", dl.bn1_b);
                fn(p + ".conv1", dl.conv1);
                fn(p + ".bn2.gamma", dl.bn2_g);
                fn(p + ".bn2.beta", dl.bn2_b);
                fn(p + ".conv2", dl.conv2);
            }
            if (b < transitions.size()) {
                std::string p = prefix + ".transition" + std::to_string(b);
                fn(p + ".bn.gamma", transitions[b].bn_g);
                fn(p + ".bn.beta", transitions[b].bn_b);
                fn(p + ".conv", transitions[b].conv);
            }
        }
        fn(prefix + ".out.bn.gamma", out_bn_g);
        fn(prefix + ".out.bn.beta", out_bn_b);
        fn(prefix + ".out.kernel", out_kernel);
        fn(prefix + ".out.bias", out_bias);
    }

    template <typename Fn>
    void visit_norm(const std::string& prefix, Fn&& fn) {
        fn(prefix + ".stem.bn", stem_bn);
        for (size_t b = 0; b < blocks.size(); ++b) {
            for (size_t l = 0; l < blocks[b].size(); ++l) {
                std::string p = prefix + ".block" + std::to_string(b) + ".layer" + std::to_string(l);
                fn(p + ".bn1", blocks[b][l].bn1);
                fn(p + ".bn2", blocks[b][l].bn2);
            }
            if (b < transitions.size()) fn(prefix + ".transition" + std::to_string(b) + ".bn", transitions[b].bn);
        }
        fn(prefix + ".out.bn", out_bn);
    }
};

// Validity mask on a [batch, h, w] grid, halved with "any valid source
// pixel marks the target cell valid" semantics.
struct GridMask {
    Index batch = 0, h = 0, w = 0;
    std::vector<std::uint8_t> v;

    bool at(Index b, Index y, Index x) const { return v[size_t((b * h + y) * w + x)] != 0; }
};

inline GridMask mask_downsample2(const GridMask& m) {
    GridMask out;
    out.batch = m.batch;
    out.h = (m.h + 1) / 2;
    out.w = (m.w + 1) / 2;
    out.v.assign(size_t(out.batch * out.h * out.w), 0);
    for (Index b = 0; b < m.batch; ++b)
        for (Index y = 0; y < m.h; ++y)
            for (Index x = 0; x < m.w; ++x)
                if (m.at(b, y, x)) out.v[size_t((b * out.h + y / 2) * out.w + x / 2)] = 1;
    return out;
}

template <typename T>
struct EncoderOut {
    Tensor<T> feat;  // [batch, h_o, w_o, d_model]
    GridMask mask;   // [batch, h_o, w_o]
};

template <typename T>
EncoderOut<T> encoder_forward(EncoderParams<T>& enc, const Tensor<T>& images, const GridMask& mask, bool training,
                              Rng& rng) {
    check_as<DimensionError>(images.rank() == 4 && images.dim(3) == 1,
                             "encoder: images must be [batch, h, w, 1], got " + shape_str(images.shape()));
    check_as<DimensionError>(mask.batch == images.dim(0) && mask.h == images.dim(1) && mask.w == images.dim(2),
                             "encoder: image/mask geometry mismatch");
    const EncoderConfig& cfg = enc.cfg;

    Tensor<T> x = conv2d(images, enc.stem_kernel, 2);
    GridMask m = mask_downsample2(mask);
    x = batchnorm(x, enc.stem_bn_g, enc.stem_bn_b, enc.stem_bn, training);
    x = relu(x);
    if (cfg.wide_stem) {
        x = maxpool2d(x, 3, 2);
        m = mask_downsample2(m);
    }

    for (size_t b = 0; b < enc.blocks.size(); ++b) {
        for (auto& dl : enc.blocks[b]) {
            Tensor<T> h = batchnorm(x, dl.bn1_g, dl.bn1_b, dl.bn1, training);
            h = relu(h);
            h = conv2d(h, dl.conv1);
            h = batchnorm(h, dl.bn2_g, dl.bn2_b, dl.bn2, training);
            h = relu(h);
            h = conv2d(h, dl.conv2);
            h = dropout(h, cfg.dropout, training, rng);
            x = concat({x, h}, 3);
        }
        if (b < enc.transitions.size()) {
            auto& tr = enc.transitions[b];
            Tensor<T> h = batchnorm(x, tr.bn_g, tr.bn_b, tr.bn, training);
            h = relu(h);
            h = conv2d(h, tr.conv);
            x = avgpool_2x2(replication_pad_to_even(h));
            m = mask_downsample2(m);
        }
    }
    x = batchnorm(x, enc.out_bn_g, enc.out_bn_b, enc.out_bn, training);
    x = relu(x);
    x = conv2d(x, enc.out_kernel, enc.out_bias);
    return {x, m};
}

}  // namespace comer
