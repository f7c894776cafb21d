// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "comer/data.hpp"

using namespace comer;

namespace {

// Brace/marker discipline every generated sequence must obey.
void check_well_formed(const std::vector<Index>& toks, const Vocab& v) {
    Index depth = 0, max_depth = 0;
    for (size_t i = 0; i < toks.size(); ++i) {
        REQUIRE(toks[i] >= v.first_symbol());  // no control ids in payloads
        const std::string& s = v.token(toks[i]);
        if (s == "^" || s == "_") {
            REQUIRE(i + 1 < toks.size());
            REQUIRE(v.token(toks[i + 1]) == "{");
        } else if (s == "{") {
            ++depth;
            max_depth = std::max(max_depth, depth);
        } else if (s == "}") {
            --depth;
            REQUIRE(depth >= 0);
        }
    }
    REQUIRE(depth == 0);
    REQUIRE(max_depth <= 2);
}

struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& stem) {
        path = std::filesystem::temp_directory_path() / (stem + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_SUITE("data") {

TEST_CASE("vocabulary reserves the four control ids") {
    const Vocab& v = default_vocab();
    CHECK(Vocab::pad == 0);
    CHECK(Vocab::sos_l2r == 1);
    CHECK(Vocab::eos == 2);
    CHECK(Vocab::sos_r2l == 3);
    CHECK(v.token(0) == "<pad>");
    CHECK(v.first_symbol() == 4);
    CHECK(v.size() == 4 + Index(default_symbols().size()));

    auto ids = v.tokenize("x ^ { 2 }");
    CHECK(v.detokenize(ids) == "x ^ { 2 }");
    CHECK_THROWS_AS(v.id("Q"), UsageError);
    CHECK_THROWS_AS(v.token(v.size()), UsageError);
    CHECK_THROWS_AS(Vocab({"a", "a"}), ConfigError);
}

TEST_CASE("glyph atlas covers every drawable symbol") {
    const GlyphAtlas& atlas = default_atlas();
    for (const auto& s : default_symbols()) {
        CHECK(atlas.has(s));
        Index ink = 0;
        for (auto b : atlas.tile(s)) ink += b;
        CHECK(ink > 0);  // no blank glyphs
    }
    CHECK(!atlas.has("<pad>"));
    CHECK_THROWS_AS(atlas.tile("<pad>"), StateError);
}

TEST_CASE("generated sequences are well formed and mix lengths") {
    GrammarConfig g;
    const Vocab& v = default_vocab();
    Rng rng(7);
    Index long_count = 0;
    const Index n = 2000;
    for (Index i = 0; i < n; ++i) {
        auto toks = generate_tokens(g, v, rng);
        REQUIRE(!toks.empty());
        REQUIRE(Index(toks.size()) <= g.max_len);
        check_well_formed(toks, v);

        // Per-sequence alphabet: few distinct content symbols.
        std::set<Index> distinct;
        for (Index t : toks) {
            const std::string& s = v.token(t);
            if (s != "^" && s != "_" && s != "{" && s != "}") distinct.insert(t);
        }
        CHECK(Index(distinct.size()) <= g.alphabet_max);
        if (Index(toks.size()) >= 15) ++long_count;
    }
    CHECK(long_count >= 50);  // long sequences keep real support
}

TEST_CASE("same seed reproduces the corpus bit for bit") {
    GrammarConfig g;
    RenderConfig r;
    auto a = generate(g, r, default_vocab(), default_atlas(), 42, 20);
    auto b = generate(g, r, default_vocab(), default_atlas(), 42, 20);
    auto c = generate(g, r, default_vocab(), default_atlas(), 43, 20);
    REQUIRE(a.size() == 20);
    bool any_diff = false;
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].tokens == b[i].tokens);
        REQUIRE(a[i].image.pix == b[i].image.pix);
        if (i < c.size() && a[i].tokens != c[i].tokens) any_diff = true;
    }
    CHECK(any_diff);  // a different seed actually changes the draw
}

TEST_CASE("render geometry follows the tile layout") {
    RenderConfig r;
    const Vocab& v = default_vocab();
    CHECK(r.tile() == 8);
    CHECK(r.canvas_h() == 30);
    CHECK(r.canvas_w(1) == r.tile() + 2 * r.margin);  // single glyph: tile plus margins
    CHECK(r.canvas_w(4) == 2 * 3 + 4 * 8 + 3 * 2);

    Rng rng(5);
    auto img = render(v.tokenize("x"), v, default_atlas(), r, rng);
    CHECK(img.h == 30);
    CHECK(img.w == 14);
    Rng r2(5);
    auto again = render(v.tokenize("x"), v, default_atlas(), r, r2);
    CHECK(img.pix == again.pix);  // fixed jitter seed is bit-identical

    RenderConfig big;
    big.scale = 2;
    CHECK(big.tile() == 16);
    CHECK(big.canvas_h() == 54);

    CHECK_THROWS_AS(render({}, v, default_atlas(), r, rng), UsageError);
}

TEST_CASE("superscripts raise the glyph band") {
    RenderConfig r;
    r.jitter = 0;  // deterministic placement for the geometry check
    const Vocab& v = default_vocab();
    Rng rng(1);
    auto img = render(v.tokenize("x ^ { x }"), v, default_atlas(), r, rng);

    // Ink centroid row within a tile's column band.
    auto centroid_row = [&](Index tile_idx) {
        Index x0 = r.margin + tile_idx * (r.tile() + r.gap);
        double num = 0, den = 0;
        for (Index y = 0; y < img.h; ++y)
            for (Index x = x0; x < x0 + r.tile(); ++x) {
                num += double(y) * img.at(y, x);
                den += img.at(y, x);
            }
        REQUIRE(den > 0);
        return num / den;
    };
    // Glyph 3 is the same 'x' one level up: exactly half a tile higher.
    CHECK(centroid_row(0) - centroid_row(3) == doctest::Approx(r.tile() / 2).epsilon(1e-12));
}

TEST_CASE("bilinear rescale keeps shape and intensity") {
    Image src;
    src.h = 100;
    src.w = 200;
    src.pix.resize(100 * 200);
    double mean_src = 0;
    for (Index y = 0; y < src.h; ++y)
        for (Index x = 0; x < src.w; ++x) {
            float val = float(x) / float(src.w - 1);  // smooth horizontal ramp
            src.pix[size_t(y * src.w + x)] = val;
            mean_src += val;
        }
    mean_src /= double(src.h * src.w);

    auto down = bilinear_resize(src, 70, 140);  // factor 0.7
    CHECK(down.h == 70);
    CHECK(down.w == 140);
    double mean_down = 0;
    for (float p : down.pix) mean_down += p;
    mean_down /= double(down.h * down.w);
    CHECK(std::abs(mean_down - mean_src) < 0.05 * mean_src);

    Rng rng(11);
    for (int i = 0; i < 20; ++i) {
        auto aug = scale_augment(src, rng);
        CHECK(aug.h >= Index(std::floor(0.7 * 100)));
        CHECK(aug.h <= Index(std::ceil(1.4 * 100)));
        // Aspect ratio is preserved up to rounding.
        CHECK(std::abs(double(aug.w) / double(aug.h) - 2.0) < 0.05);
    }
}

TEST_CASE("collate pads to the batch extent and masks the rest") {
    Image a;
    a.h = 30;
    a.w = 64;
    a.pix.assign(30 * 64, 0.5f);
    Image b;
    b.h = 30;
    b.w = 96;
    b.pix.assign(30 * 96, 0.25f);
    auto batch = collate_images<double>({&a, &b});
    CHECK(batch.images.shape() == Shape{2, 30, 96, 1});
    CHECK(batch.mask.at(0, 10, 63));
    CHECK(!batch.mask.at(0, 10, 64));  // beyond sample 0's width
    CHECK(!batch.mask.at(0, 29, 95));
    CHECK(batch.mask.at(1, 29, 95));
    // Padding pixels are zero, valid pixels carry the source values.
    CHECK(batch.images.values()[size_t((0 * 30 + 10) * 96 + 63)] == 0.5);
    CHECK(batch.images.values()[size_t((0 * 30 + 10) * 96 + 64)] == 0.0);
    CHECK(batch.images.values()[size_t((1 * 30 + 10) * 96 + 64)] == 0.25);

    CHECK_THROWS_AS(collate_images<double>({}), UsageError);
}

TEST_CASE("dataset round-trips through the on-disk format") {
    TempDir tmp("comer_data_");
    GrammarConfig g;
    RenderConfig r;
    auto samples = generate(g, r, default_vocab(), default_atlas(), 9, 12);
    save_dataset(tmp.path.string(), samples, default_vocab());

    CHECK(std::filesystem::exists(tmp.path / "labels.tsv"));
    CHECK(std::filesystem::exists(tmp.path / "images" / "0000.pgm"));
    CHECK(std::filesystem::exists(tmp.path / "images" / "0011.pgm"));

    auto loaded = load_dataset(tmp.path.string(), default_vocab());
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].tokens == samples[i].tokens);
        CHECK(loaded[i].image.h == samples[i].image.h);
        CHECK(loaded[i].image.w == samples[i].image.w);
        // Rendered ink is binary, so quantization to 8 bits is lossless.
        CHECK(loaded[i].image.pix == samples[i].image.pix);
    }

    CHECK_THROWS_AS(load_dataset((tmp.path / "nope").string(), default_vocab()), IoError);

    // Fractional intensities survive within one quantization step.
    Image frac;
    frac.h = 4;
    frac.w = 5;
    frac.pix = {0.f,    0.1f, 0.2f, 0.3f,  0.4f, 0.5f,  0.6f, 0.7f, 0.8f, 0.9f,
                0.333f, 1.f,  0.f,  0.25f, 0.f,  0.75f, 0.f,  1.f,  0.f,  0.663f};
    write_pgm((tmp.path / "frac.pgm").string(), frac);
    auto back = read_pgm((tmp.path / "frac.pgm").string());
    REQUIRE(back.pix.size() == frac.pix.size());
    // Half a quantization step, padded for ties rounded away from zero.
    for (size_t i = 0; i < frac.pix.size(); ++i) CHECK(std::abs(back.pix[i] - frac.pix[i]) <= 0.501f / 255.0f);
}

}  // TEST_SUITE
