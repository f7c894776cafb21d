// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <vector>

#include "comer/attention.hpp"
#include "comer/rng.hpp"
#include "gradcheck.hpp"

using namespace comer;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<size_t>(numel(s)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(std::move(s), std::move(v));
}

// Independent reference for the refinement map phi on one grid cell.
double phi_ref(const ArmParams<double>& arm, const Tensor<double>& cov, Index n, Index y, Index x, Index head) {
    Index k = arm.ksize(), h_in = arm.h_in(), d_c = arm.d_c();
    Index h = cov.dim(1), w = cov.dim(2);
    Index p = (k - 1) / 2;
    double out = 0.0;
    for (Index c = 0; c < d_c; ++c) {
        double acc = arm.bias.at({c});
        for (Index dy = 0; dy < k; ++dy)
            for (Index dx = 0; dx < k; ++dx) {
                Index yi = y - p + dy, xi = x - p + dx;
                if (yi < 0 || yi >= h || xi < 0 || xi >= w) continue;
                for (Index ic = 0; ic < h_in; ++ic)
                    acc += cov.at({n, yi, xi, ic}) * arm.kernel.at({dy, dx, ic, c});
            }
        acc = std::max(0.0, acc);
        double mean = arm.bn.running_mean.at({c});
        double var = arm.bn.running_var.at({c});
        acc = (acc - mean) / std::sqrt(var + arm.bn.eps) * arm.bn_gamma.at({c}) + arm.bn_beta.at({c});
        out += acc * arm.proj.at({c, head});
    }
    return out;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("scaled score and softmax hand oracle") {
    // one query at sqrt(2) * e1 against orthonormal keys: scores (1, 0)
    Tensor<double> q(Shape{1, 1, 1, 2}, {std::sqrt(2.0), 0.0});
    Tensor<double> k(Shape{1, 1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto e = attention_scores(q, k);
    CHECK(e.shape() == Shape{1, 1, 1, 2});
    CHECK(e.at({0, 0, 0, 0}) == doctest::Approx(1.0));
    CHECK(e.at({0, 0, 0, 1}) == doctest::Approx(0.0));
    auto a = softmax(e, -1);
    CHECK(a.at({0, 0, 0, 0}) == doctest::Approx(0.7310585786).epsilon(1e-8));
    CHECK(a.at({0, 0, 0, 1}) == doctest::Approx(0.2689414214).epsilon(1e-8));
}

TEST_CASE("split/merge heads roundtrip") {
    Rng rng(21);
    auto x = random_tensor({2, 3, 8}, rng);
    auto s = split_heads(x, 4);
    CHECK(s.shape() == Shape{2, 4, 3, 2});
    auto m = merge_heads(s);
    CHECK(m.shape() == x.shape());
    for (Index i = 0; i < x.size(); ++i) CHECK(m.values()[size_t(i)] == x.values()[size_t(i)]);
    CHECK_THROWS_AS(split_heads(x, 3), DimensionError);
}

TEST_CASE("causal mask zeroes future weights and blocks information flow") {
    Rng rng(22);
    Index b = 1, t = 4, d = 6, heads = 2;
    auto x = random_tensor({b, t, d}, rng);
    auto wq = random_tensor({d, d}, rng), wk = random_tensor({d, d}, rng), wv = random_tensor({d, d}, rng);
    BoolMask cm = causal_mask(t);

    auto run = [&](const Tensor<double>& inp) {
        auto q = split_heads(matmul(inp, wq), heads);
        auto k = split_heads(matmul(inp, wk), heads);
        auto v = split_heads(matmul(inp, wv), heads);
        auto a = softmax(apply_mask(attention_scores(q, k), cm), -1);
        return std::pair{a, merge_heads(matmul(a, v))};
    };
    auto [a, out] = run(x);
    for (Index h = 0; h < heads; ++h)
        for (Index i = 0; i < t; ++i)
            for (Index j = i + 1; j < t; ++j) CHECK(a.at({0, h, i, j}) == 0.0);

    // perturbing the last token must not change earlier output rows
    auto x2 = x.detach();
    for (Index c = 0; c < d; ++c) x2.mutable_values()[size_t((t - 1) * d + c)] += 3.0;
    auto [a2, out2] = run(x2);
    for (Index i = 0; i < t - 1; ++i)
        for (Index c = 0; c < d; ++c) CHECK(out.at({0, i, c}) == out2.at({0, i, c}));
}

TEST_CASE("refinement map matches naive reference in eval mode") {
    Rng rng(23);
    ArmParams<double> arm(3, 2, 3, 2);
    arm.kernel = random_tensor({3, 3, 2, 3}, rng);
    arm.bias = random_tensor({3}, rng);
    arm.proj = random_tensor({3, 2}, rng);
    arm.bn_gamma = random_tensor({3}, rng, 0.5, 1.5);
    arm.bn_beta = random_tensor({3}, rng);
    for (Index c = 0; c < 3; ++c) {
        arm.bn.running_mean.mutable_values()[size_t(c)] = rng.uniform(-0.2, 0.2);
        arm.bn.running_var.mutable_values()[size_t(c)] = rng.uniform(0.5, 1.5);
    }
    arm.bn.accept_defaults();

    auto cov = random_tensor({2, 3, 4, 2}, rng, 0.0, 1.0);
    auto r = arm_phi(arm, cov, false);
    CHECK(r.shape() == Shape{2, 3, 4, 2});
    for (Index n = 0; n < 2; ++n)
        for (Index y = 0; y < 3; ++y)
            for (Index x = 0; x < 4; ++x)
                for (Index h = 0; h < 2; ++h)
                    CHECK(r.at({n, y, x, h}) == doctest::Approx(phi_ref(arm, cov, n, y, x, h)).epsilon(1e-10));
}

TEST_CASE("zero-initialized refinement is exactly zero") {
    Rng rng(24);
    ArmParams<double> arm(3, 2, 4, 2);
    arm.bn.accept_defaults();
    auto attn = random_tensor({2, 2, 3, 6}, rng, 0.0, 1.0);
    auto r_eval = arm_refinement(arm, attn, 2, 3, false);
    for (auto v : r_eval.values()) CHECK(v == 0.0);
    auto r_train = arm_refinement(arm, attn, 2, 3, true);
    for (auto v : r_train.values()) CHECK(v == 0.0);
}

TEST_CASE("refinement consumes exclusive coverage of the attention stack") {
    Rng rng(25);
    ArmParams<double> arm(3, 2, 3, 2);
    arm.kernel = random_tensor({3, 3, 2, 3}, rng);
    arm.bias = random_tensor({3}, rng);
    arm.proj = random_tensor({3, 2}, rng);
    arm.bn.accept_defaults();

    Index b = 2, h_in = 2, steps = 4, hg = 2, wg = 3, l = hg * wg;
    auto attn = random_tensor({b, h_in, steps, l}, rng, 0.0, 1.0);

    // naive exclusive coverage per (batch, step): sum over strictly earlier steps
    std::vector<double> cov(static_cast<size_t>(b * steps * l * h_in), 0.0);
    for (Index bb = 0; bb < b; ++bb)
        for (Index t = 0; t < steps; ++t)
            for (Index ll = 0; ll < l; ++ll)
                for (Index c = 0; c < h_in; ++c) {
                    double s = 0;
                    for (Index u = 0; u < t; ++u) s += attn.at({bb, c, u, ll});
                    cov[size_t(((bb * steps + t) * l + ll) * h_in + c)] = s;
                }
    Tensor<double> cov_grid(Shape{b * steps, hg, wg, h_in}, std::move(cov));
    auto want = arm_phi(arm, cov_grid, false);  // [b*steps, hg, wg, heads]

    auto got = arm_refinement(arm, attn, hg, wg, false);  // [b, heads, steps, l]
    for (Index bb = 0; bb < b; ++bb)
        for (Index h = 0; h < 2; ++h)
            for (Index t = 0; t < steps; ++t)
                for (Index ll = 0; ll < l; ++ll)
                    CHECK(got.at({bb, h, t, ll}) ==
                          doctest::Approx(want.at({bb * steps + t, ll / wg, ll % wg, h})).epsilon(1e-12));

    CHECK_THROWS_AS(arm_refinement(arm, attn, 2, 4, false), DimensionError);
    CHECK_THROWS_AS(arm_refinement(arm, random_tensor({b, 3, steps, l}, rng), hg, wg, false), DimensionError);
}

TEST_CASE("refinement stays within its allocation budget") {
    Rng rng(26);
    Index t = 8, hg = 8, wg = 8, h_in = 4, d_c = 8, heads = 4;
    Index l = hg * wg;
    ArmParams<double> arm(3, h_in, d_c, heads);
    arm.kernel = random_tensor({3, 3, h_in, d_c}, rng, -0.1, 0.1);
    arm.proj = random_tensor({d_c, heads}, rng, -0.1, 0.1);
    arm.bn.accept_defaults();
    auto cov = random_tensor({t, hg, wg, h_in}, rng, 0.0, 1.0);
    Index budget = 4 * t * l * std::max(h_in, d_c);

    auto& stats = AllocStats::instance();
    {
        NoGradGuard ng;
        Index c0 = stats.current();
        stats.reset_peak();
        auto r = arm_phi(arm, cov, false);
        CHECK(stats.peak() - c0 <= budget);
    }
    {
        for (auto* p : {&arm.kernel, &arm.bias, &arm.proj, &arm.bn_gamma, &arm.bn_beta}) p->set_requires_grad(true);
        Index c0 = stats.current();
        stats.reset_peak();
        auto r = arm_phi(arm, cov, false);
        CHECK(stats.peak() - c0 <= budget);
        CHECK(r.requires_grad());
    }
}

TEST_CASE("gradients flow through the refinement pipeline") {
    Rng rng(27);
    ArmParams<double> arm(3, 2, 3, 2);
    arm.kernel = random_tensor({3, 3, 2, 3}, rng, -0.5, 0.5);
    arm.bias = random_tensor({3}, rng, 0.1, 0.3);
    arm.proj = random_tensor({3, 2}, rng, -0.5, 0.5);
    arm.bn_gamma = random_tensor({3}, rng, 0.8, 1.2);
    arm.bn_beta = random_tensor({3}, rng);
    for (auto* p : {&arm.kernel, &arm.bias, &arm.proj, &arm.bn_gamma, &arm.bn_beta}) p->set_requires_grad(true);

    auto attn = random_tensor({1, 2, 3, 6}, rng, 0.05, 1.0);
    attn.set_requires_grad(true);
    auto probe = random_tensor({1, 2, 3, 6}, rng);
    auto res = comer::testing::gradcheck(
        [&] { return sum(mul(arm_refinement(arm, attn, 2, 3, true), probe)); },
        {arm.kernel, arm.bias, arm.proj, arm.bn_gamma, arm.bn_beta, attn});
    CHECK(res.max_rel_err < 1e-6);
}

}  // TEST_SUITE
