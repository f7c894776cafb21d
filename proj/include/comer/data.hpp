// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "comer/encoder.hpp"
#include "comer/glyphs.hpp"
#include "comer/rng.hpp"
#include "comer/tensor.hpp"
#include "comer/vocab.hpp"

namespace comer {

// ---------------------------------------------------------------------------
// Grammar: random well-bracketed formulas over a small per-sequence alphabet.
// Restricting each sequence to a few distinct symbols forces repeated glyphs,
// which is what makes coverage informative downstream.
// ---------------------------------------------------------------------------

struct GrammarConfig {
    Index max_len = 30;        // token count upper bound, every length reachable
    double len_decay = 0.82;   // geometric length component
    double len_tail = 0.012;   // uniform floor so long sequences keep support
    Index alphabet_min = 3;    // distinct content symbols per sequence
    Index alphabet_max = 6;
    double p_script = 0.25;    // chance of opening a sup/sub group
    Index max_depth = 2;       // script nesting bound
};

namespace detail {

// Content pool: every drawable symbol that is not a marker or brace.
inline const std::vector<std::string>& content_pool() {
    static const std::vector<std::string> pool = [] {
        std::vector<std::string> p;
        for (const auto& s : default_symbols())
            if (s != "^" && s != "_" && s != "{" && s != "}") p.push_back(s);
        return p;
    }();
    return pool;
}

inline Index sample_length(const GrammarConfig& cfg, Rng& rng) {
    double total = 0;
    for (Index l = 1; l <= cfg.max_len; ++l) total += std::pow(cfg.len_decay, double(l)) + cfg.len_tail;
    double u = rng.next_double() * total;
    for (Index l = 1; l <= cfg.max_len; ++l) {
        u -= std::pow(cfg.len_decay, double(l)) + cfg.len_tail;
        if (u <= 0) return l;
    }
    return cfg.max_len;
}

// Emits exactly `len` tokens; a script group costs base + marker + braces
// (4 tokens) plus its inner length.
inline void build_sequence(const GrammarConfig& cfg, const std::vector<Index>& alphabet, Index len, Index depth,
                           Rng& rng, const Vocab& vocab, std::vector<Index>& out) {
    while (len > 0) {
        if (len >= 5 && depth < cfg.max_depth && rng.bernoulli(cfg.p_script)) {
            Index inner = rng.uniform_int(1, std::min<Index>(6, len - 4));
            out.push_back(alphabet[size_t(rng.uniform_int(0, Index(alphabet.size()) - 1))]);
            out.push_back(vocab.id(rng.bernoulli(0.5) ? "^" : "_"));
            out.push_back(vocab.id("{"));
            build_sequence(cfg, alphabet, inner, depth + 1, rng, vocab, out);
            out.push_back(vocab.id("}"));
            len -= 4 + inner;
        } else {
            out.push_back(alphabet[size_t(rng.uniform_int(0, Index(alphabet.size()) - 1))]);
            len -= 1;
        }
    }
}

}  // namespace detail

inline std::vector<Index> generate_tokens(const GrammarConfig& cfg, const Vocab& vocab, Rng& rng) {
    check_as<ConfigError>(cfg.max_len >= 1 && cfg.alphabet_min >= 1 && cfg.alphabet_max >= cfg.alphabet_min,
                          "grammar: inconsistent configuration");
    const auto& pool = detail::content_pool();
    Index k = rng.uniform_int(cfg.alphabet_min, std::min<Index>(cfg.alphabet_max, Index(pool.size())));
    std::vector<Index> candidates;
    for (const auto& s : pool) candidates.push_back(vocab.id(s));
    for (Index i = 0; i < k; ++i) {
        Index j = rng.uniform_int(i, Index(candidates.size()) - 1);
        std::swap(candidates[size_t(i)], candidates[size_t(j)]);
    }
    candidates.resize(size_t(k));

    std::vector<Index> out;
    detail::build_sequence(cfg, candidates, detail::sample_length(cfg, rng), 0, rng, vocab, out);
    return out;
}

// ---------------------------------------------------------------------------
// Rendering: horizontal glyph layout with seeded per-glyph jitter; script
// groups shift the baseline by half a tile per nesting level.
// ---------------------------------------------------------------------------

struct RenderConfig {
    Index scale = 1;   // tile edge = 8 * scale pixels
    Index margin = 3;  // frame around the glyph band
    Index gap = 2;     // horizontal space between tiles
    Index jitter = 2;  // per-glyph displacement bound (pixels)

    Index tile() const { return kGlyphBase * scale; }
    Index canvas_h() const { return 2 * margin + 3 * tile(); }
    Index canvas_w(Index n) const { return 2 * margin + n * tile() + (n - 1) * gap; }
};

// Grayscale image in [0, 1], row-major, 1 = ink.
struct Image {
    Index h = 0, w = 0;
    std::vector<float> pix;

    float at(Index y, Index x) const { return pix[size_t(y * w + x)]; }
};

inline Image render(const std::vector<Index>& tokens, const Vocab& vocab, const GlyphAtlas& atlas,
                    const RenderConfig& cfg, Rng& rng) {
    check_as<UsageError>(!tokens.empty(), "render: empty token sequence");
    Image img;
    img.h = cfg.canvas_h();
    img.w = cfg.canvas_w(Index(tokens.size()));
    img.pix.assign(size_t(img.h * img.w), 0.0f);

    const Index tile = cfg.tile();
    const Index half = tile / 2;
    const Index y_base = cfg.margin + tile;  // leaves room for two raised levels

    Index level = 0, pending = 0;
    std::vector<Index> stack;
    for (size_t i = 0; i < tokens.size(); ++i) {
        const std::string& sym = vocab.token(tokens[i]);
        const auto& bits = atlas.tile(sym);
        Index jx = rng.uniform_int(-cfg.jitter, cfg.jitter);
        Index jy = rng.uniform_int(-cfg.jitter, cfg.jitter);
        Index x0 = cfg.margin + Index(i) * (tile + cfg.gap) + jx;
        Index y0 = y_base + level * half + jy;
        for (Index gy = 0; gy < kGlyphBase; ++gy)
            for (Index gx = 0; gx < kGlyphBase; ++gx) {
                if (!bits[size_t(gy * kGlyphBase + gx)]) continue;
                for (Index sy = 0; sy < cfg.scale; ++sy)
                    for (Index sx = 0; sx < cfg.scale; ++sx) {
                        Index y = y0 + gy * cfg.scale + sy, x = x0 + gx * cfg.scale + sx;
                        if (y >= 0 && y < img.h && x >= 0 && x < img.w) img.pix[size_t(y * img.w + x)] = 1.0f;
                    }
            }
        if (sym == "^") {
            pending = -1;
        } else if (sym == "_") {
            pending = 1;
        } else if (sym == "{") {
            stack.push_back(level);
            level += pending;
            pending = 0;
        } else if (sym == "}") {
            if (!stack.empty()) {
                level = stack.back();
                stack.pop_back();
            }
        } else {
            pending = 0;
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Augmentation: aspect-preserving bilinear rescale.
// ---------------------------------------------------------------------------

inline Image bilinear_resize(const Image& src, Index oh, Index ow) {
    check_as<UsageError>(oh >= 1 && ow >= 1, "resize: target must be at least 1x1");
    Image out;
    out.h = oh;
    out.w = ow;
    out.pix.assign(size_t(oh * ow), 0.0f);
    double sy = double(src.h) / double(oh), sx = double(src.w) / double(ow);
    for (Index y = 0; y < oh; ++y)
        for (Index x = 0; x < ow; ++x) {
            double fy = (double(y) + 0.5) * sy - 0.5, fx = (double(x) + 0.5) * sx - 0.5;
            Index y0 = Index(std::floor(fy)), x0 = Index(std::floor(fx));
            double wy = fy - double(y0), wx = fx - double(x0);
            auto sample = [&](Index yy, Index xx) {
                yy = std::clamp<Index>(yy, 0, src.h - 1);
                xx = std::clamp<Index>(xx, 0, src.w - 1);
                return double(src.pix[size_t(yy * src.w + xx)]);
            };
            double v = (1 - wy) * ((1 - wx) * sample(y0, x0) + wx * sample(y0, x0 + 1)) +
                       wy * ((1 - wx) * sample(y0 + 1, x0) + wx * sample(y0 + 1, x0 + 1));
            out.pix[size_t(y * ow + x)] = float(v);
        }
    return out;
}

// Random scale in [0.7, 1.4], same factor on both axes.
inline Image scale_augment(const Image& src, Rng& rng) {
    double s = rng.uniform(0.7, 1.4);
    Index oh = std::max<Index>(1, Index(std::lround(double(src.h) * s)));
    Index ow = std::max<Index>(1, Index(std::lround(double(src.w) * s)));
    return bilinear_resize(src, oh, ow);
}

// ---------------------------------------------------------------------------
// Corpus generation and on-disk format (PGM images plus a TSV label table).
// ---------------------------------------------------------------------------

struct Sample {
    std::vector<Index> tokens;
    Image image;
};

inline std::vector<Sample> generate(const GrammarConfig& grammar, const RenderConfig& rendercfg, const Vocab& vocab,
                                    const GlyphAtlas& atlas, std::uint64_t seed, Index n) {
    Rng root(seed);
    Rng gram = root.split(rng_tag::grammar);
    std::vector<Sample> out;
    out.reserve(size_t(n));
    for (Index i = 0; i < n; ++i) {
        Sample s;
        s.tokens = generate_tokens(grammar, vocab, gram);
        Rng rrng = root.split(rng_tag::render).split(std::uint64_t(i));
        s.image = render(s.tokens, vocab, atlas, rendercfg, rrng);
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_pgm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check_as<IoError>(bool(os), "cannot open '" + path + "' for writing");
    os << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(size_t(img.w));
    for (Index y = 0; y < img.h; ++y) {
        for (Index x = 0; x < img.w; ++x)
            row[size_t(x)] = (unsigned char)(std::lround(std::clamp(img.at(y, x), 0.0f, 1.0f) * 255.0f));
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    check_as<IoError>(bool(os), "write to '" + path + "' failed");
}

inline Image read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    check_as<IoError>(bool(is), "cannot open '" + path + "'");
    std::string magic;
    is >> magic;
    check_as<IoError>(magic == "P5", "'" + path + "' is not a binary PGM");
    // '#' starts a header comment line (heatmap exports carry one)
    auto next_field = [&is](Index& v) {
        int c = is.peek();
        while (is && (c == '#' || std::isspace(c))) {
            if (c == '#') {
                std::string skip;
                std::getline(is, skip);
            } else {
                is.get();
            }
            c = is.peek();
        }
        is >> v;
    };
    Index w = 0, h = 0, maxval = 0;
    next_field(w);
    next_field(h);
    next_field(maxval);
    check_as<IoError>(bool(is) && w > 0 && h > 0 && maxval == 255, "'" + path + "': unsupported PGM header");
    is.get();  // single whitespace after header
    Image img;
    img.h = h;
    img.w = w;
    img.pix.resize(size_t(h * w));
    std::vector<unsigned char> buf(size_t(h * w));
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    check_as<IoError>(bool(is), "'" + path + "': truncated pixel data");
    for (size_t i = 0; i < buf.size(); ++i) img.pix[i] = float(buf[i]) / 255.0f;
    return img;
}

inline std::string sample_stem(Index i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04lld", (long long)i);
    return buf;
}

inline void save_dataset(const std::string& dir, const std::vector<Sample>& samples, const Vocab& vocab) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    std::ofstream labels(fs::path(dir) / "labels.tsv", std::ios::trunc);
    check_as<IoError>(bool(labels), "cannot open labels.tsv under '" + dir + "'");
    for (size_t i = 0; i < samples.size(); ++i) {
        std::string stem = sample_stem(Index(i));
        write_pgm((fs::path(dir) / "images" / (stem + ".pgm")).string(), samples[i].image);
        labels << stem << "\t" << vocab.detokenize(samples[i].tokens) << "\n";
    }
    check_as<IoError>(bool(labels), "write to labels.tsv failed");
}

inline std::vector<Sample> load_dataset(const std::string& dir, const Vocab& vocab) {
    namespace fs = std::filesystem;
    std::ifstream labels(fs::path(dir) / "labels.tsv");
    check_as<IoError>(bool(labels), "cannot open labels.tsv under '" + dir + "'");
    std::vector<Sample> out;
    std::string line;
    while (std::getline(labels, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        check_as<IoError>(tab != std::string::npos, "labels.tsv: malformed line '" + line + "'");
        Sample s;
        s.tokens = vocab.tokenize(line.substr(tab + 1));
        s.image = read_pgm((fs::path(dir) / "images" / (line.substr(0, tab) + ".pgm")).string());
        out.push_back(std::move(s));
    }
    check_as<UsageError>(!out.empty(), "dataset under '" + dir + "' is empty");
    return out;
}

// ---------------------------------------------------------------------------
// Batching: zero-pad images to the batch extent, mask the valid region.
// ---------------------------------------------------------------------------

template <typename T>
struct ImageBatch {
    Tensor<T> images;  // [batch, H, W, 1]
    GridMask mask;     // valid extent per sample
};

template <typename T>
ImageBatch<T> collate_images(const std::vector<const Image*>& imgs) {
    check_as<UsageError>(!imgs.empty(), "collate: empty batch");
    Index b = Index(imgs.size()), hh = 0, ww = 0;
    for (const Image* im : imgs) {
        hh = std::max(hh, im->h);
        ww = std::max(ww, im->w);
    }
    Vec<T> buf(size_t(b * hh * ww), T(0));
    GridMask mask;
    mask.batch = b;
    mask.h = hh;
    mask.w = ww;
    mask.v.assign(size_t(b * hh * ww), 0);
    for (Index i = 0; i < b; ++i) {
        const Image& im = *imgs[size_t(i)];
        for (Index y = 0; y < im.h; ++y) {
            for (Index x = 0; x < im.w; ++x) {
                buf[size_t((i * hh + y) * ww + x)] = T(im.at(y, x));
                mask.v[size_t((i * hh + y) * ww + x)] = 1;
            }
        }
    }
    return {Tensor<T>(Shape{b, hh, ww, 1}, std::move(buf)), std::move(mask)};
}

}  // namespace comer
