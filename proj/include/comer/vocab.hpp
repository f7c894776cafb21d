// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "comer/common.hpp"

namespace comer {

// Token table with four reserved control ids followed by the drawable
// symbols. Control ids never appear inside a label payload.
class Vocab {
public:
    static constexpr Index pad = 0;
    static constexpr Index sos_l2r = 1;
    static constexpr Index eos = 2;
    static constexpr Index sos_r2l = 3;

    explicit Vocab(const std::vector<std::string>& symbols) {
        tokens_ = {"<pad>", "<sos>", "<eos>", "<sos-rev>"};
        for (const auto& s : symbols) tokens_.push_back(s);
        for (size_t i = 0; i < tokens_.size(); ++i) {
            check_as<ConfigError>(ids_.emplace(tokens_[i], Index(i)).second,
                                  "vocab: duplicate token '" + tokens_[i] + "'");
        }
    }

    Index size() const { return Index(tokens_.size()); }
    Index first_symbol() const { return 4; }

    Index id(const std::string& tok) const {
        auto it = ids_.find(tok);
        check_as<UsageError>(it != ids_.end(), "vocab: unknown token '" + tok + "'");
        return it->second;
    }

    const std::string& token(Index id) const {
        check_as<UsageError>(id >= 0 && id < size(), "vocab: id " + std::to_string(id) + " out of range");
        return tokens_[size_t(id)];
    }

    std::vector<Index> tokenize(const std::string& text) const {
        std::istringstream is(text);
        std::vector<Index> out;
        std::string tok;
        while (is >> tok) out.push_back(id(tok));
        return out;
    }

    std::string detokenize(const std::vector<Index>& ids) const {
        std::string out;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += token(ids[i]);
        }
        return out;
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, Index> ids_;
};

// The symbol set the grammar draws from: content glyphs, infix operators,
// the script markers and their braces.
inline const std::vector<std::string>& default_symbols() {
    static const std::vector<std::string> syms = {"a", "b", "c", "d", "x", "y", "z", "1", "2", "3", "4",
                                                  "5", "6", "7", "+", "-", "=", "^", "_", "{", "}"};
    return syms;
}

inline const Vocab& default_vocab() {
    static const Vocab v(default_symbols());
    return v;
}

}  // namespace comer
