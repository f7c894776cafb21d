// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "comer/checkpoint.hpp"
#include "comer/data.hpp"
#include "comer/model.hpp"
#include "comer/train.hpp"

namespace comer {

namespace detail {

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

// Run configuration: a flat INI file of [section] headers and key = value
// lines. '#' or ';' starts a comment. Every key present in the file must be
// consumed by a getter before reject_unknown() -- a misspelled key is an error
// rather than a silently applied default.
class RunConfig {
public:
    RunConfig() = default;

    static RunConfig from_text(const std::string& text, const std::string& origin = "<inline>") {
        RunConfig rc;
        rc.origin_ = origin;
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            size_t cut = line.find_first_of("#;");
            if (cut != std::string::npos) line.resize(cut);
            line = detail::trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                check_as<ConfigError>(line.back() == ']' && line.size() > 2,
                                      origin + ":" + std::to_string(lineno) + ": malformed section header");
                section = detail::trim(line.substr(1, line.size() - 2));
                continue;
            }
            size_t eq = line.find('=');
            check_as<ConfigError>(eq != std::string::npos,
                                  origin + ":" + std::to_string(lineno) + ": expected key = value");
            check_as<ConfigError>(!section.empty(),
                                  origin + ":" + std::to_string(lineno) + ": key outside any [section]");
            std::string key = detail::trim(line.substr(0, eq));
            std::string value = detail::trim(line.substr(eq + 1));
            check_as<ConfigError>(!key.empty(), origin + ":" + std::to_string(lineno) + ": empty key");
            check_as<ConfigError>(!rc.sections_[section].count(key),
                                  origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
            rc.sections_[section][key] = value;
        }
        return rc;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        check_as<IoError>(bool(in), "config: cannot open '" + path + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        return from_text(buf.str(), path);
    }

    // Command-line override; replaces (or adds) the file's value.
    void set(const std::string& section, const std::string& key, const std::string& value) {
        sections_[section][key] = value;
    }

    bool has(const std::string& section, const std::string& key) const {
        auto s = sections_.find(section);
        return s != sections_.end() && s->second.count(key) > 0;
    }

    std::string get_string(const std::string& section, const std::string& key, const std::string& fallback) const {
        auto s = sections_.find(section);
        if (s == sections_.end()) return fallback;
        auto k = s->second.find(key);
        if (k == s->second.end()) return fallback;
        consumed_.insert(section + "." + key);
        return k->second;
    }

    long long get_int(const std::string& section, const std::string& key, long long fallback) const {
        std::string raw = get_string(section, key, "");
        if (raw.empty() && !has(section, key)) return fallback;
        size_t pos = 0;
        long long v = 0;
        try {
            v = std::stoll(raw, &pos);
        } catch (const std::exception&) {
            pos = std::string::npos;
        }
        check_as<ConfigError>(pos == raw.size() && pos > 0,
                              bad_value(section, key, raw, "an integer"));
        return v;
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        std::string raw = get_string(section, key, "");
        if (raw.empty() && !has(section, key)) return fallback;
        size_t pos = 0;
        double v = 0;
        try {
            v = std::stod(raw, &pos);
        } catch (const std::exception&) {
            pos = std::string::npos;
        }
        check_as<ConfigError>(pos == raw.size() && pos > 0, bad_value(section, key, raw, "a number"));
        return v;
    }

    bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
        std::string raw = get_string(section, key, "");
        if (raw.empty() && !has(section, key)) return fallback;
        if (raw == "true" || raw == "1") return true;
        if (raw == "false" || raw == "0") return false;
        throw ConfigError(bad_value(section, key, raw, "true|false"));
    }

    std::vector<Index> get_int_list(const std::string& section, const std::string& key,
                                    const std::vector<Index>& fallback) const {
        std::string raw = get_string(section, key, "");
        if (raw.empty() && !has(section, key)) return fallback;
        std::vector<Index> out;
        std::istringstream in(raw);
        std::string item;
        while (std::getline(in, item, ',')) {
            item = detail::trim(item);
            size_t pos = 0;
            long long v = 0;
            try {
                v = std::stoll(item, &pos);
            } catch (const std::exception&) {
                pos = std::string::npos;
            }
            check_as<ConfigError>(!item.empty() && pos == item.size(),
                                  bad_value(section, key, raw, "a comma-separated integer list"));
            out.push_back(Index(v));
        }
        check_as<ConfigError>(!out.empty(), bad_value(section, key, raw, "a comma-separated integer list"));
        return out;
    }

    // Call once every knob has been read; any key nobody consumed is a typo.
    void reject_unknown() const {
        std::string stray;
        for (const auto& [section, keys] : sections_)
            for (const auto& [key, value] : keys)
                if (!consumed_.count(section + "." + key)) stray += (stray.empty() ? "" : ", ") + section + "." + key;
        check_as<ConfigError>(stray.empty(), origin_ + ": unknown config keys: " + stray);
    }

private:
    std::string bad_value(const std::string& section, const std::string& key, const std::string& raw,
                          const std::string& want) const {
        return origin_ + ": [" + section + "] " + key + " = '" + raw + "' is not " + want;
    }

    std::map<std::string, std::map<std::string, std::string>> sections_;
    mutable std::set<std::string> consumed_;
    std::string origin_ = "<inline>";
};

// ---------------------------------------------------------------------------
// Typed views over the INI sections.

struct DatasetSpec {
    GrammarConfig grammar;
    RenderConfig render;
    Index count = 2000;  // default corpus size for generation
};

inline DatasetSpec dataset_spec(const RunConfig& rc) {
    DatasetSpec ds;
    ds.grammar.max_len = Index(rc.get_int("dataset", "max_len", ds.grammar.max_len));
    ds.grammar.len_decay = rc.get_double("dataset", "len_decay", ds.grammar.len_decay);
    ds.grammar.len_tail = rc.get_double("dataset", "len_tail", ds.grammar.len_tail);
    ds.grammar.alphabet_min = Index(rc.get_int("dataset", "alphabet_min", ds.grammar.alphabet_min));
    ds.grammar.alphabet_max = Index(rc.get_int("dataset", "alphabet_max", ds.grammar.alphabet_max));
    ds.grammar.p_script = rc.get_double("dataset", "p_script", ds.grammar.p_script);
    ds.grammar.max_depth = Index(rc.get_int("dataset", "max_depth", ds.grammar.max_depth));
    ds.render.scale = Index(rc.get_int("dataset", "scale", ds.render.scale));
    ds.render.margin = Index(rc.get_int("dataset", "margin", ds.render.margin));
    ds.render.gap = Index(rc.get_int("dataset", "gap", ds.render.gap));
    ds.render.jitter = Index(rc.get_int("dataset", "jitter", ds.render.jitter));
    ds.count = Index(rc.get_int("dataset", "count", ds.count));
    check_as<ConfigError>(ds.grammar.max_len >= 1, "dataset: max_len must be positive");
    check_as<ConfigError>(ds.count >= 1, "dataset: count must be positive");
    return ds;
}

inline ModelConfig model_spec(const RunConfig& rc, CoverageMode mode, Index vocab) {
    ModelConfig mc;
    mc.encoder.growth = Index(rc.get_int("encoder", "growth", mc.encoder.growth));
    mc.encoder.block_layers = rc.get_int_list("encoder", "blocks", mc.encoder.block_layers);
    mc.encoder.theta = rc.get_double("encoder", "theta", mc.encoder.theta);
    mc.encoder.wide_stem = rc.get_bool("encoder", "wide_stem", mc.encoder.wide_stem);
    mc.encoder.dropout = rc.get_double("encoder", "dropout", mc.encoder.dropout);
    mc.decoder.d_model = Index(rc.get_int("model", "d_model", mc.decoder.d_model));
    mc.encoder.d_model = mc.decoder.d_model;
    mc.decoder.heads = Index(rc.get_int("model", "heads", mc.decoder.heads));
    mc.decoder.layers = Index(rc.get_int("model", "layers", mc.decoder.layers));
    mc.decoder.d_ff = Index(rc.get_int("model", "d_ff", mc.decoder.d_ff));
    mc.decoder.dropout = rc.get_double("model", "dropout", mc.decoder.dropout);
    mc.decoder.scale_embedding = rc.get_bool("model", "scale_embedding", mc.decoder.scale_embedding);
    mc.decoder.arm_kernel = Index(rc.get_int("arm", "kernel", mc.decoder.arm_kernel));
    mc.decoder.arm_channels = Index(rc.get_int("arm", "channels", mc.decoder.arm_channels));
    mc.decoder.arm_start_layer = Index(rc.get_int("arm", "start_layer", mc.decoder.arm_start_layer));
    mc.decoder.arm_shared = rc.get_bool("arm", "shared", mc.decoder.arm_shared);
    mc.decoder.mode = mode;
    mc.decoder.vocab = vocab;
    check_as<ConfigError>(mc.decoder.d_model % mc.decoder.heads == 0, "model: heads must divide d_model");
    return mc;
}

struct TrainSpec {
    TrainConfig cfg;
    double val_fraction = 0.1;
    std::string precision = "double";  // float | double
};

inline TrainSpec train_spec(const RunConfig& rc) {
    TrainSpec ts;
    ts.cfg.lr = rc.get_double("training", "lr", ts.cfg.lr);
    ts.cfg.momentum = rc.get_double("training", "momentum", ts.cfg.momentum);
    ts.cfg.weight_decay = rc.get_double("training", "weight_decay", ts.cfg.weight_decay);
    ts.cfg.epochs = Index(rc.get_int("training", "epochs", ts.cfg.epochs));
    ts.cfg.batch_size = Index(rc.get_int("training", "batch_size", ts.cfg.batch_size));
    ts.cfg.seed = std::uint64_t(rc.get_int("training", "seed", 0));
    ts.cfg.augment = rc.get_bool("training", "augment", ts.cfg.augment);
    ts.val_fraction = rc.get_double("training", "val_fraction", ts.val_fraction);
    ts.precision = rc.get_string("model", "precision", ts.precision);
    check_as<ConfigError>(ts.cfg.lr > 0, "training: lr must be positive");
    check_as<ConfigError>(ts.precision == "float" || ts.precision == "double",
                          "model: precision must be float|double");
    check_as<ConfigError>(ts.val_fraction >= 0 && ts.val_fraction < 1,
                          "training: val_fraction must lie in [0, 1)");
    return ts;
}

struct SearchSpec {
    Index beam = 10;
    Index max_len = 0;  // 0 = derive from dataset (twice the longest label plus two)
};

inline SearchSpec search_spec(const RunConfig& rc) {
    SearchSpec ss;
    ss.beam = Index(rc.get_int("search", "beam", ss.beam));
    ss.max_len = Index(rc.get_int("search", "max_len", ss.max_len));
    check_as<ConfigError>(ss.beam >= 1, "search: beam must be positive");
    check_as<ConfigError>(ss.max_len >= 0, "search: max_len must be non-negative");
    return ss;
}

// ---------------------------------------------------------------------------
// Model metadata embedded in checkpoints: enough to rebuild the architecture
// (and pick the right scalar type) from the file alone.

inline constexpr const char* kModelMetaName = "model.meta";

inline nlohmann::json model_config_to_json(const ModelConfig& mc, const std::string& precision) {
    nlohmann::json enc{{"growth", mc.encoder.growth},       {"block_layers", mc.encoder.block_layers},
                       {"theta", mc.encoder.theta},         {"wide_stem", mc.encoder.wide_stem},
                       {"d_model", mc.encoder.d_model},     {"dropout", mc.encoder.dropout}};
    nlohmann::json dec{{"d_model", mc.decoder.d_model},
                       {"heads", mc.decoder.heads},
                       {"layers", mc.decoder.layers},
                       {"d_ff", mc.decoder.d_ff},
                       {"dropout", mc.decoder.dropout},
                       {"vocab", mc.decoder.vocab},
                       {"mode", to_string(mc.decoder.mode)},
                       {"arm_kernel", mc.decoder.arm_kernel},
                       {"arm_channels", mc.decoder.arm_channels},
                       {"arm_start_layer", mc.decoder.arm_start_layer},
                       {"arm_shared", mc.decoder.arm_shared},
                       {"scale_embedding", mc.decoder.scale_embedding}};
    return nlohmann::json{{"precision", precision}, {"encoder", enc}, {"decoder", dec}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j, std::string* precision = nullptr) {
    ModelConfig mc;
    const auto& enc = j.at("encoder");
    mc.encoder.growth = enc.at("growth").get<Index>();
    mc.encoder.block_layers = enc.at("block_layers").get<std::vector<Index>>();
    mc.encoder.theta = enc.at("theta").get<double>();
    mc.encoder.wide_stem = enc.at("wide_stem").get<bool>();
    mc.encoder.d_model = enc.at("d_model").get<Index>();
    mc.encoder.dropout = enc.at("dropout").get<double>();
    const auto& dec = j.at("decoder");
    mc.decoder.d_model = dec.at("d_model").get<Index>();
    mc.decoder.heads = dec.at("heads").get<Index>();
    mc.decoder.layers = dec.at("layers").get<Index>();
    mc.decoder.d_ff = dec.at("d_ff").get<Index>();
    mc.decoder.dropout = dec.at("dropout").get<double>();
    mc.decoder.vocab = dec.at("vocab").get<Index>();
    mc.decoder.mode = coverage_mode_from(dec.at("mode").get<std::string>());
    mc.decoder.arm_kernel = dec.at("arm_kernel").get<Index>();
    mc.decoder.arm_channels = dec.at("arm_channels").get<Index>();
    mc.decoder.arm_start_layer = dec.at("arm_start_layer").get<Index>();
    mc.decoder.arm_shared = dec.at("arm_shared").get<bool>();
    mc.decoder.scale_embedding = dec.at("scale_embedding").get<bool>();
    if (precision) *precision = j.at("precision").get<std::string>();
    return mc;
}

// The JSON text rides in a checkpoint entry, one float per character.
inline CheckpointEntry model_meta_entry(const ModelConfig& mc, const std::string& precision) {
    std::string text = model_config_to_json(mc, precision).dump();
    CheckpointEntry e;
    e.name = kModelMetaName;
    e.shape = {Index(text.size())};
    e.values.reserve(text.size());
    for (char c : text) e.values.push_back(float(static_cast<unsigned char>(c)));
    return e;
}

// Locates and decodes the metadata entry; throws if the checkpoint lacks one.
inline ModelConfig model_meta_from(const std::vector<CheckpointEntry>& entries, std::string* precision = nullptr) {
    for (const auto& e : entries) {
        if (e.name != kModelMetaName) continue;
        std::string text;
        text.reserve(e.values.size());
        for (float v : e.values) text.push_back(char(static_cast<unsigned char>(v)));
        try {
            return model_config_from_json(nlohmann::json::parse(text), precision);
        } catch (const nlohmann::json::exception& ex) {
            throw IoError(std::string("checkpoint metadata is corrupt: ") + ex.what());
        }
    }
    throw IoError("checkpoint carries no model metadata entry ('" + std::string(kModelMetaName) +
                  "'); it was not written by the training command");
}

}  // namespace comer
