// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "comer/common.hpp"

namespace comer {

// Fixed 8x8 binary tiles, one per drawable symbol. Tiles are scaled by
// pixel replication at render time, so the same atlas serves every canvas
// resolution.
inline constexpr Index kGlyphBase = 8;

namespace detail {

struct GlyphRows {
    const char* symbol;
    std::array<const char*, 8> rows;
};

inline const std::vector<GlyphRows>& glyph_table() {
    static const std::vector<GlyphRows> rows = {
        {"a", {"........", "..###...", ".....#..", "..####..", ".#...#..", ".#...#..", "..####..", "........"}},
        {"b", {".#......", ".#......", ".####...", ".#...#..", ".#...#..", ".#...#..", ".####...", "........"}},
        {"c", {"........", "..####..", ".#......", ".#......", ".#......", ".#......", "..####..", "........"}},
        {"d", {".....#..", ".....#..", "..####..", ".#...#..", ".#...#..", ".#...#..", "..####..", "........"}},
        {"x", {"........", ".#...#..", "..#.#...", "...#....", "...#....", "..#.#...", ".#...#..", "........"}},
        {"y", {"........", ".#...#..", ".#...#..", "..####..", ".....#..", ".....#..", ".####...", "........"}},
        {"z", {"........", ".#####..", "....#...", "...#....", "..#.....", ".#......", ".#####..", "........"}},
        {"1", {"...#....", "..##....", "...#....", "...#....", "...#....", "...#....", "..###...", "........"}},
        {"2", {"..###...", ".#...#..", ".....#..", "....#...", "...#....", "..#.....", ".#####..", "........"}},
        {"3", {"..###...", ".#...#..", ".....#..", "...##...", ".....#..", ".#...#..", "..###...", "........"}},
        {"4", {"....#...", "...##...", "..#.#...", ".#..#...", ".#####..", "....#...", "....#...", "........"}},
        {"5", {".#####..", ".#......", ".####...", ".....#..", ".....#..", ".#...#..", "..###...", "........"}},
        {"6", {"..###...", ".#......", ".####...", ".#...#..", ".#...#..", ".#...#..", "..###...", "........"}},
        {"7", {".#####..", ".....#..", "....#...", "....#...", "...#....", "...#....", "...#....", "........"}},
        {"+", {"........", "...#....", "...#....", ".#####..", "...#....", "...#....", "........", "........"}},
        {"-", {"........", "........", "........", ".#####..", "........", "........", "........", "........"}},
        {"=", {"........", "........", ".#####..", "........", ".#####..", "........", "........", "........"}},
        {"^", {"...#....", "..#.#...", ".#...#..", "........", "........", "........", "........", "........"}},
        {"_", {"........", "........", "........", "........", "........", "........", "........", ".######."}},
        {"{", {"....##..", "...#....", "...#....", "..#.....", "...#....", "...#....", "....##..", "........"}},
        {"}", {"..##....", "....#...", "....#...", ".....#..", "....#...", "....#...", "..##....", "........"}},
    };
    return rows;
}

}  // namespace detail

// symbol -> row-major 8x8 bitmap (1 = ink).
class GlyphAtlas {
public:
    GlyphAtlas() {
        for (const auto& g : detail::glyph_table()) {
            std::array<std::uint8_t, 64> tile{};
            for (Index y = 0; y < kGlyphBase; ++y)
                for (Index x = 0; x < kGlyphBase; ++x) tile[size_t(y * kGlyphBase + x)] = g.rows[size_t(y)][x] == '#';
            tiles_.emplace(g.symbol, tile);
        }
    }

    const std::array<std::uint8_t, 64>& tile(const std::string& symbol) const {
        auto it = tiles_.find(symbol);
        check_as<StateError>(it != tiles_.end(), "glyph atlas has no tile for token '" + symbol + "'");
        return it->second;
    }

    bool has(const std::string& symbol) const { return tiles_.count(symbol) != 0; }

private:
    std::map<std::string, std::array<std::uint8_t, 64>> tiles_;
};

inline const GlyphAtlas& default_atlas() {
    static const GlyphAtlas a;
    return a;
}

}  // namespace comer
