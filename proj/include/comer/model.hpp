// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "comer/decoder.hpp"
#include "comer/encoder.hpp"
#include "comer/positional.hpp"

namespace comer {

struct ModelConfig {
    EncoderConfig encoder;
    DecoderConfig decoder;
};

template <typename T>
struct Memory {
    Tensor<T> mem;  // [batch, L, d_model]
    BoolMask key;   // [batch, 1, 1, L]
    GridMask grid;  // [batch, h_o, w_o]

    Index h() const { return grid.h; }
    Index w() const { return grid.w; }
};

template <typename T>
struct Model {
    ModelConfig cfg;
    EncoderParams<T> encoder;
    DecoderParams<T> decoder;

    explicit Model(const ModelConfig& c) : cfg(c), encoder(c.encoder), decoder(c.decoder) {
        check_as<ConfigError>(c.encoder.d_model == c.decoder.d_model,
                              "model: encoder and decoder feature dims disagree");
    }

    template <typename Fn>
    void visit(Fn&& fn) {
        encoder.visit("encoder", fn);
        decoder.visit("decoder", fn);
    }
    template <typename Fn>
    void visit_norm(Fn&& fn) {
        encoder.visit_norm("encoder", fn);
        decoder.visit_norm("decoder", fn);
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> out;
        visit([&](const std::string&, Tensor<T>& t) { out.push_back(t); });
        return out;
    }

    Index parameter_count() {
        Index n = 0;
        visit([&](const std::string&, Tensor<T>& t) { n += t.size(); });
        return n;
    }

    void set_requires_grad(bool rg) {
        visit([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(rg); });
    }

    void zero_grad() {
        visit([&](const std::string&, Tensor<T>& t) { t.zero_grad(); });
    }

    // Marks every running-stat state usable at its (0, 1) defaults.
    void accept_norm_defaults() {
        visit_norm([&](const std::string&, NormState<T>& s) { s.accept_defaults(); });
    }
};

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// Fan-balanced uniform init for weights; biases and shift terms start at
// zero, normalization scales at one. Each parameter draws from a stream
// keyed on its name, so shared substructures initialize identically across
// model variants.
template <typename T>
auto make_initializer(std::uint64_t seed) {
    return [root = Rng(seed).split(rng_tag::init)](const std::string& name, Tensor<T>& t) mutable {
        Rng stream = root.split(fnv1a(name));
        using detail::ends_with;
        if (ends_with(name, ".gamma")) {
            std::fill(t.mutable_values().begin(), t.mutable_values().end(), T(1));
            return;
        }
        if (ends_with(name, ".beta") || ends_with(name, ".b") || ends_with(name, ".bias")) {
            std::fill(t.mutable_values().begin(), t.mutable_values().end(), T(0));
            return;
        }
        Index fan_in, fan_out;
        if (t.rank() == 4) {  // [kh, kw, c_in, c_out]
            Index rf = t.dim(0) * t.dim(1);
            fan_in = rf * t.dim(2);
            fan_out = rf * t.dim(3);
        } else if (t.rank() == 2) {
            fan_in = t.dim(0);
            fan_out = t.dim(1);
        } else {
            throw StateError("init: unclassified parameter " + name);
        }
        T limit = T(std::sqrt(6.0 / double(fan_in + fan_out)));
        for (auto& v : t.mutable_values()) v = T(stream.uniform(-limit, limit));
    };
}

template <typename T>
void init_model(Model<T>& m, std::uint64_t seed) {
    auto init = make_initializer<T>(seed);
    m.visit(init);
}

// Runs the feature extractor and attaches the 2-D positional code, flattening
// the grid to an attention memory.
template <typename T>
Memory<T> encode(Model<T>& m, const Tensor<T>& images, const GridMask& mask, bool training, Rng& rng) {
    EncoderOut<T> eo = encoder_forward(m.encoder, images, mask, training, rng);
    Index b = eo.feat.dim(0), h = eo.feat.dim(1), w = eo.feat.dim(2), d = eo.feat.dim(3);
    Tensor<T> mem = reshape(add(eo.feat, image_pe<T>(h, w, d)), {b, h * w, d});
    BoolMask key(Shape{b, 1, 1, h * w}, eo.mask.v);
    return {mem, key, eo.mask};
}

}  // namespace comer
