// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "comer/data.hpp"
#include "comer/metrics.hpp"
#include "comer/model.hpp"
#include "comer/vocab.hpp"

namespace comer {

// A decoded candidate. `tokens` holds everything generated after the start
// token, including the terminating eos when `finished`; for right-to-left
// candidates the payload is stored in generation order (reversed reading
// order).
struct Hypothesis {
    bool from_r2l = false;
    std::vector<Index> tokens;
    double logprob = 0;
    bool finished = false;
};

// Length normalization counts generated tokens (eos included, start excluded).
inline double norm_score(const Hypothesis& h) {
    return h.logprob / double(std::max<size_t>(1, h.tokens.size()));
}

// Reading-order payload: strips eos and un-reverses r2l candidates.
inline std::vector<Index> reading_order(const Hypothesis& h) {
    std::vector<Index> p = h.tokens;
    if (!p.empty() && p.back() == Vocab::eos) p.pop_back();
    if (h.from_r2l) std::reverse(p.begin(), p.end());
    return p;
}

namespace detail {

struct LiveHyp {
    std::vector<Index> tokens;
    double logprob = 0;
};

}  // namespace detail

// Batched beam search over a single encoded image. Candidates expand by
// cumulative log-probability; finished hypotheses are ranked by the
// length-normalized score, ties broken by the lexicographically smaller token
// sequence. If nothing finishes within max_len the best unfinished candidate
// is returned, flagged. Control ids other than eos are never proposed: pad
// and the two start tokens are decoder inputs, never valid outputs.
template <typename T>
std::vector<Hypothesis> beam_search(DecoderParams<T>& dec, const Tensor<T>& memory, const BoolMask& key, Index h_img,
                                    Index w_img, Index sos, Index beam_size, Index max_len) {
    check_as<UsageError>(beam_size >= 1, "beam search: beam size must be at least 1");
    check_as<UsageError>(max_len >= 1, "beam search: max_len must be at least 1");
    check_as<DimensionError>(memory.dim(0) == 1, "beam search: one image at a time");
    check_as<UsageError>(sos == Vocab::sos_l2r || sos == Vocab::sos_r2l, "beam search: start token must be a sos id");
    NoGradGuard ng;
    const Index v = dec.cfg.vocab;
    const bool r2l = sos == Vocab::sos_r2l;

    auto cache = make_decode_cache(dec, memory);
    std::vector<detail::LiveHyp> live(1);
    std::vector<Index> last = {sos};
    std::vector<Hypothesis> pool;

    for (Index t = 0; t < max_len && !live.empty(); ++t) {
        Tensor<T> logits = decode_step(dec, cache, key, h_img, w_img, last);
        struct Cand {
            double score;
            Index row, tok;
        };
        std::vector<Cand> cands;
        cands.reserve(live.size() * size_t(v));
        for (size_t i = 0; i < live.size(); ++i) {
            Vec<T> lp = log_softmax_row(logits.data() + Index(i) * v, v);
            for (Index tok = 0; tok < v; ++tok) {
                if (tok == Vocab::pad || tok == Vocab::sos_l2r || tok == Vocab::sos_r2l) continue;
                cands.push_back({live[i].logprob + double(lp[size_t(tok)]), Index(i), tok});
            }
        }
        Index keep = std::min<Index>(beam_size, Index(cands.size()));
        std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.row != b.row) return a.row < b.row;
            return a.tok < b.tok;
        });
        std::vector<detail::LiveHyp> next;
        std::vector<Index> rows, next_last;
        for (Index c = 0; c < keep; ++c) {
            const Cand& cd = cands[size_t(c)];
            detail::LiveHyp h = live[size_t(cd.row)];
            h.tokens.push_back(cd.tok);
            h.logprob = cd.score;
            if (cd.tok == Vocab::eos) {
                pool.push_back({r2l, std::move(h.tokens), h.logprob, true});
            } else {
                next.push_back(std::move(h));
                rows.push_back(cd.row);
                next_last.push_back(cd.tok);
            }
        }
        if (t + 1 < max_len && !rows.empty()) cache.reorder(rows);
        live = std::move(next);
        last = std::move(next_last);
    }

    if (pool.empty())
        for (auto& h : live) pool.push_back({r2l, std::move(h.tokens), h.logprob, false});

    std::sort(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
        double sa = norm_score(a), sb = norm_score(b);
        if (sa != sb) return sa > sb;
        return a.tokens < b.tokens;
    });
    if (Index(pool.size()) > beam_size) pool.resize(size_t(beam_size));
    return pool;
}

namespace detail {

// Teacher-forced mean log-likelihood of `seq` (a full control-token-framed
// sequence) under the decoder, per predicted token.
template <typename T>
double sequence_mean_loglik(DecoderParams<T>& dec, const Tensor<T>& memory, const BoolMask& key, Index h_img,
                            Index w_img, const std::vector<Index>& seq) {
    NoGradGuard ng;
    Index steps = Index(seq.size()) - 1;
    std::vector<Index> inputs(seq.begin(), seq.end() - 1);
    std::vector<Index> targets(seq.begin() + 1, seq.end());
    Rng rng(0);  // eval mode draws nothing
    Tensor<T> logits = decode_parallel(dec, memory, key, h_img, w_img, inputs, steps, false, rng);
    Tensor<T> ce = cross_entropy_mean(reshape(logits, {steps, dec.cfg.vocab}), targets, Vocab::pad);
    return -double(ce.values()[0]);
}

}  // namespace detail

// Bidirectional rescoring: candidates from both beams are scored by the mean
// of their own and the opposite direction's length-normalized log-likelihood;
// the winner is returned as a reading-order payload. Ties go to the
// lexicographically smaller payload.
template <typename T>
std::vector<Index> approximate_joint_search(DecoderParams<T>& dec, const Tensor<T>& memory, const BoolMask& key,
                                            Index h_img, Index w_img, Index beam_size, Index max_len) {
    auto l2r = beam_search(dec, memory, key, h_img, w_img, Vocab::sos_l2r, beam_size, max_len);
    auto r2l = beam_search(dec, memory, key, h_img, w_img, Vocab::sos_r2l, beam_size, max_len);
    std::vector<Hypothesis> cands = std::move(l2r);
    cands.insert(cands.end(), r2l.begin(), r2l.end());
    check_as<StateError>(!cands.empty(), "joint search: no candidates produced");

    // Best score per distinct reading-order payload.
    std::map<std::vector<Index>, double> scored;
    for (const Hypothesis& h : cands) {
        std::vector<Index> payload = reading_order(h);
        // The opposite direction consumes the payload in its own generation
        // order: l2r candidates are re-read reversed under sos_r2l and vice
        // versa.
        std::vector<Index> opposite;
        opposite.push_back(h.from_r2l ? Vocab::sos_l2r : Vocab::sos_r2l);
        if (h.from_r2l)
            opposite.insert(opposite.end(), payload.begin(), payload.end());
        else
            opposite.insert(opposite.end(), payload.rbegin(), payload.rend());
        opposite.push_back(Vocab::eos);
        double opp = detail::sequence_mean_loglik(dec, memory, key, h_img, w_img, opposite);
        double score = 0.5 * (norm_score(h) + opp);
        auto it = scored.find(payload);
        if (it == scored.end() || score > it->second) scored[std::move(payload)] = score;
    }
    const std::vector<Index>* best = nullptr;
    double best_score = 0;
    for (const auto& [payload, score] : scored) {
        // std::map iterates payloads in ascending lexicographic order, so on a
        // tie the first (smaller) sequence is kept.
        if (!best || score > best_score) {
            best = &payload;
            best_score = score;
        }
    }
    return *best;
}

// Greedy decode: the beam-1 left-to-right payload.
template <typename T>
std::vector<Index> greedy_decode(DecoderParams<T>& dec, const Tensor<T>& memory, const BoolMask& key, Index h_img,
                                 Index w_img, Index max_len) {
    auto hyps = beam_search(dec, memory, key, h_img, w_img, Vocab::sos_l2r, Index(1), max_len);
    return reading_order(hyps.front());
}

// Decode budget rule: twice the longest reference plus the eos allowance.
inline Index default_max_len(const std::vector<Sample>& samples) {
    Index longest = 0;
    for (const auto& s : samples) longest = std::max(longest, Index(s.tokens.size()));
    return 2 * longest + 2;
}

// ---------------------------------------------------------------------------
// Whole-dataset evaluation with the bidirectional search pipeline.
// ---------------------------------------------------------------------------

template <typename T>
struct EvalResult {
    EvalReport report;
    std::vector<Index> distances;
    std::vector<std::vector<Index>> predictions;
};

template <typename T>
EvalResult<T> evaluate(Model<T>& model, const std::vector<Sample>& data, Index beam_size, Index max_len = 0) {
    check_as<UsageError>(!data.empty(), "evaluate: empty dataset");
    if (max_len <= 0) max_len = default_max_len(data);
    NoGradGuard ng;
    Rng rng(0);  // eval mode draws nothing
    EvalResult<T> out;
    std::vector<Index> ref_lengths;
    for (const Sample& s : data) {
        auto batch = collate_images<T>({&s.image});
        Memory<T> memo = encode(model, batch.images, batch.mask, false, rng);
        auto pred = approximate_joint_search(model.decoder, memo.mem, memo.key, memo.h(), memo.w(), beam_size, max_len);
        out.distances.push_back(token_edit_distance(pred, s.tokens));
        out.predictions.push_back(std::move(pred));
        ref_lengths.push_back(Index(s.tokens.size()));
    }
    out.report = report_from_distances(out.distances, ref_lengths);
    return out;
}

}  // namespace comer
