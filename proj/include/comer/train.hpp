// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "comer/checkpoint.hpp"
#include "comer/data.hpp"
#include "comer/search.hpp"
#include "comer/sgd.hpp"

namespace comer {

// ---------------------------------------------------------------------------
// Bidirectional targets: the same label framed for both decode directions.
// ---------------------------------------------------------------------------

struct BidirectionalTargets {
    std::vector<Index> l2r;  // [sos_l2r, payload..., eos]
    std::vector<Index> r2l;  // [sos_r2l, reversed payload..., eos]
};

inline BidirectionalTargets make_targets(const std::vector<Index>& payload) {
    check_as<UsageError>(!payload.empty(), "targets: empty payload");
    for (Index t : payload)
        check_as<UsageError>(t > Vocab::sos_r2l, "targets: payload contains a reserved control id");
    BidirectionalTargets bt;
    bt.l2r.reserve(payload.size() + 2);
    bt.l2r.push_back(Vocab::sos_l2r);
    bt.l2r.insert(bt.l2r.end(), payload.begin(), payload.end());
    bt.l2r.push_back(Vocab::eos);
    bt.r2l.reserve(payload.size() + 2);
    bt.r2l.push_back(Vocab::sos_r2l);
    bt.r2l.insert(bt.r2l.end(), payload.rbegin(), payload.rend());
    bt.r2l.push_back(Vocab::eos);
    return bt;
}

// Teacher-forcing batch: inputs are sequences minus the last token, targets
// are sequences shifted by one; both zero-padded (pad id) to the batch width.
struct TokenBatch {
    std::vector<Index> inputs, targets;  // flat [batch * steps]
    Index steps = 0;
};

inline TokenBatch collate_tokens(const std::vector<std::vector<Index>>& seqs) {
    check_as<UsageError>(!seqs.empty(), "collate: no sequences");
    TokenBatch tb;
    for (const auto& s : seqs) {
        check_as<UsageError>(Index(s.size()) >= 2, "collate: sequence shorter than sos+eos");
        tb.steps = std::max(tb.steps, Index(s.size()) - 1);
    }
    tb.inputs.assign(seqs.size() * size_t(tb.steps), Vocab::pad);
    tb.targets.assign(seqs.size() * size_t(tb.steps), Vocab::pad);
    for (size_t i = 0; i < seqs.size(); ++i) {
        const auto& s = seqs[i];
        for (size_t t = 0; t + 1 < s.size(); ++t) {
            tb.inputs[i * size_t(tb.steps) + t] = s[t];
            tb.targets[i * size_t(tb.steps) + t] = s[t + 1];
        }
    }
    return tb;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 0.02;  // toy default; the full-size preset uses 0.08
    double momentum = 0.9;
    double weight_decay = 1e-4;
    Index epochs = 10;
    Index batch_size = 8;
    std::uint64_t seed = 0;
    bool augment = true;
};

struct EpochLog {
    Index epoch = 0;
    double train_loss = 0;
    double val_exprate = 0;
    double seconds = 0;
};

struct TrainResult {
    std::vector<EpochLog> log;
    double best_val = -1;
    Index best_epoch = -1;
    std::string best_path, last_path;
};

namespace detail {

// Deterministic batch plan: group by image width to limit padding waste, then
// shuffle the group order with the epoch's stream.
inline std::vector<std::vector<Index>> plan_batches(const std::vector<Sample>& data, Index batch_size, Rng rng) {
    std::vector<Index> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = Index(i);
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (data[size_t(a)].image.w != data[size_t(b)].image.w) return data[size_t(a)].image.w < data[size_t(b)].image.w;
        return a < b;
    });
    std::vector<std::vector<Index>> batches;
    for (size_t i = 0; i < order.size(); i += size_t(batch_size))
        batches.emplace_back(order.begin() + Index(i), order.begin() + std::min(order.size(), i + size_t(batch_size)));
    for (size_t i = batches.size(); i > 1; --i)
        std::swap(batches[i - 1], batches[size_t(rng.uniform_int(0, Index(i) - 1))]);
    return batches;
}

template <typename T>
std::vector<CheckpointEntry> optimizer_extras(const std::vector<std::vector<T>>& velocity, Index epoch,
                                              double best_val, Index best_epoch) {
    std::vector<CheckpointEntry> extra;
    for (size_t i = 0; i < velocity.size(); ++i) {
        CheckpointEntry e;
        char buf[32];
        std::snprintf(buf, sizeof buf, "opt.v.%04zu", i);
        e.name = buf;
        e.shape = {Index(velocity[i].size())};
        e.values.assign(velocity[i].begin(), velocity[i].end());
        extra.push_back(std::move(e));
    }
    extra.push_back({"train.epoch", {}, {float(epoch)}});
    extra.push_back({"train.best", {}, {float(best_val)}});
    extra.push_back({"train.best_epoch", {}, {float(best_epoch)}});
    return extra;
}

}  // namespace detail

// Fraction of greedy decodes that match the reference exactly.
template <typename T>
double greedy_exprate(Model<T>& model, const std::vector<Sample>& data, Index max_len) {
    NoGradGuard ng;
    Rng rng(0);
    Index hits = 0;
    for (const Sample& s : data) {
        auto batch = collate_images<T>({&s.image});
        Memory<T> memo = encode(model, batch.images, batch.mask, false, rng);
        if (greedy_decode(model.decoder, memo.mem, memo.key, memo.h(), memo.w(), max_len) == s.tokens) ++hits;
    }
    return data.empty() ? 0.0 : double(hits) / double(data.size());
}

// Deterministic held-out split: shuffles with the seed's stream and carves off
// the requested fraction (at least one sample when fraction > 0).
inline std::pair<std::vector<Sample>, std::vector<Sample>> split_train_val(std::vector<Sample> samples,
                                                                           double val_fraction, std::uint64_t seed) {
    check_as<UsageError>(val_fraction >= 0 && val_fraction < 1, "split: fraction must lie in [0, 1)");
    Rng rng = Rng(seed).split(rng_tag::split);
    for (size_t i = samples.size(); i > 1; --i)
        std::swap(samples[i - 1], samples[size_t(rng.uniform_int(0, Index(i) - 1))]);
    size_t n_val = val_fraction > 0 ? std::max<size_t>(1, size_t(std::llround(double(samples.size()) * val_fraction))) : 0;
    check_as<UsageError>(n_val < samples.size(), "split: validation would consume the whole corpus");
    std::vector<Sample> val(samples.end() - Index(n_val), samples.end());
    samples.resize(samples.size() - n_val);
    return {std::move(samples), std::move(val)};
}

// One full training run. Writes per-epoch JSON-lines metrics plus rolling
// `last.ckpt` / best-by-validation `best.ckpt` under out_dir, and resumes from
// an existing last.ckpt (epoch counter, momentum state, best-so-far included).
// `run_extras` entries ride along in every checkpoint written, so callers can
// embed whatever bookkeeping they need to reopen one later.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                  const TrainConfig& cfg, const std::string& out_dir,
                  const std::vector<CheckpointEntry>& run_extras = {}) {
    namespace fs = std::filesystem;
    check_as<ConfigError>(cfg.lr >= 0 && cfg.momentum >= 0 && cfg.weight_decay >= 0, "train: negative hyperparameter");
    check_as<ConfigError>(cfg.epochs >= 1 && cfg.batch_size >= 1, "train: epochs and batch size must be positive");
    check_as<UsageError>(!train_set.empty(), "train: empty training set");
    check_as<UsageError>(!val_set.empty(), "train: empty validation set");
    fs::create_directories(out_dir);

    TrainResult result;
    result.best_path = (fs::path(out_dir) / "best.ckpt").string();
    result.last_path = (fs::path(out_dir) / "last.ckpt").string();
    const std::string metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();

    model.set_requires_grad(true);
    Sgd<T> opt(model.parameters(), T(cfg.lr), T(cfg.momentum), T(cfg.weight_decay));
    Index start_epoch = 0;

    if (fs::exists(result.last_path)) {
        auto extras = load_model(model, result.last_path);
        auto& velocity = opt.mutable_velocity();
        for (size_t i = 0; i < velocity.size(); ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "opt.v.%04zu", i);
            auto it = extras.find(buf);
            check_as<IoError>(it != extras.end(), std::string("resume: checkpoint lacks ") + buf);
            check_as<DimensionError>(it->second.values.size() == velocity[i].size(), "resume: velocity size mismatch");
            std::copy(it->second.values.begin(), it->second.values.end(), velocity[i].begin());
        }
        check_as<IoError>(extras.count("train.epoch") && extras.count("train.best") && extras.count("train.best_epoch"),
                          "resume: checkpoint lacks the training counters");
        start_epoch = Index(extras.at("train.epoch").values.at(0)) + 1;
        result.best_val = double(extras.at("train.best").values.at(0));
        result.best_epoch = Index(extras.at("train.best_epoch").values.at(0));
    }

    std::ofstream metrics(metrics_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
    check_as<IoError>(bool(metrics), "train: cannot open '" + metrics_path + "'");

    Index max_len = default_max_len(train_set);
    for (const Sample& s : val_set) max_len = std::max(max_len, 2 * Index(s.tokens.size()) + 2);
    Rng root(cfg.seed);

    for (Index epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        auto batches = detail::plan_batches(train_set, cfg.batch_size,
                                            root.split(rng_tag::shuffle).split(std::uint64_t(epoch)));
        double loss_sum = 0;
        Index token_count = 0;
        for (size_t b = 0; b < batches.size(); ++b) {
            Rng brng = root.split(rng_tag::dropout).split(std::uint64_t(epoch)).split(std::uint64_t(b));
            std::vector<Image> augmented;
            std::vector<const Image*> imgs;
            std::vector<std::vector<Index>> l2r, r2l;
            Index batch_tokens = 0;
            augmented.reserve(batches[b].size());
            for (Index idx : batches[b]) {
                const Sample& s = train_set[size_t(idx)];
                if (cfg.augment) {
                    Rng arng = root.split(rng_tag::augment).split(std::uint64_t(epoch)).split(std::uint64_t(idx));
                    augmented.push_back(scale_augment(s.image, arng));
                } else {
                    augmented.push_back(s.image);
                }
                auto bt = make_targets(s.tokens);
                l2r.push_back(std::move(bt.l2r));
                r2l.push_back(std::move(bt.r2l));
                batch_tokens += Index(s.tokens.size()) + 1;  // payload + eos
            }
            for (const Image& im : augmented) imgs.push_back(&im);
            auto ib = collate_images<T>(imgs);
            TokenBatch tl = collate_tokens(l2r), tr = collate_tokens(r2l);

            model.zero_grad();
            Memory<T> memo = encode(model, ib.images, ib.mask, true, brng);
            Index bsz = Index(batches[b].size());
            auto direction_loss = [&](const TokenBatch& tb) {
                Tensor<T> logits = decode_parallel(model.decoder, memo.mem, memo.key, memo.h(), memo.w(), tb.inputs,
                                                   tb.steps, true, brng);
                return cross_entropy_mean(reshape(logits, {bsz * tb.steps, model.cfg.decoder.vocab}), tb.targets,
                                          Vocab::pad);
            };
            Tensor<T> loss = scale(add(direction_loss(tl), direction_loss(tr)), T(0.5));
            double loss_val = double(loss.values()[0]);
            check_as<NumericError>(std::isfinite(loss_val),
                                   "training diverged: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                                       std::to_string(b) + " (lr=" + std::to_string(cfg.lr) + ")");
            backward(loss);
            opt.step();
            loss_sum += loss_val * double(batch_tokens);
            token_count += batch_tokens;
        }

        EpochLog log;
        log.epoch = epoch;
        log.train_loss = loss_sum / double(token_count);
        log.val_exprate = greedy_exprate(model, val_set, max_len);
        log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (log.val_exprate > result.best_val) {
            result.best_val = log.val_exprate;
            result.best_epoch = epoch;
            save_model(model, result.best_path, run_extras);
        }
        auto last_extras = detail::optimizer_extras(opt.velocity(), epoch, result.best_val, result.best_epoch);
        last_extras.insert(last_extras.end(), run_extras.begin(), run_extras.end());
        save_model(model, result.last_path, last_extras);

        metrics << nlohmann::json{{"epoch", log.epoch},
                                  {"train_loss", log.train_loss},
                                  {"val_exprate", log.val_exprate},
                                  {"seconds", log.seconds}}
                       .dump()
                << "\n"
                << std::flush;
        result.log.push_back(log);
    }
    return result;
}

}  // namespace comer
