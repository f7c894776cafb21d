// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "comer/train.hpp"

using namespace comer;

namespace {

ModelConfig tiny_model_cfg(CoverageMode mode) {
    ModelConfig c;
    c.encoder.growth = 2;
    c.encoder.block_layers = {1, 1};
    c.encoder.d_model = 16;
    c.encoder.dropout = 0.1;
    c.decoder.d_model = 16;
    c.decoder.heads = 2;
    c.decoder.layers = 2;
    c.decoder.d_ff = 32;
    c.decoder.dropout = 0.1;
    c.decoder.vocab = default_vocab().size();
    c.decoder.mode = mode;
    c.decoder.arm_kernel = 3;
    c.decoder.arm_channels = 4;
    c.decoder.arm_start_layer = 1;
    return c;
}

Model<double> make_model(CoverageMode mode, std::uint64_t seed) {
    Model<double> m{tiny_model_cfg(mode)};
    init_model(m, seed);
    m.accept_norm_defaults();
    return m;
}

// Short flat formulas (too short for script groups) keep the loop fast.
std::vector<Sample> tiny_corpus(std::uint64_t seed, Index n) {
    GrammarConfig g;
    g.max_len = 4;
    return generate(g, RenderConfig{}, default_vocab(), default_atlas(), seed, n);
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

TEST_SUITE("train") {

TEST_CASE("bidirectional targets frame the payload") {
    auto bt = make_targets({5, 6, 7});
    CHECK(bt.l2r == std::vector<Index>{Vocab::sos_l2r, 5, 6, 7, Vocab::eos});
    CHECK(bt.r2l == std::vector<Index>{Vocab::sos_r2l, 7, 6, 5, Vocab::eos});

    // Reversing the r2l payload recovers the l2r payload.
    std::vector<Index> rev(bt.r2l.begin() + 1, bt.r2l.end() - 1);
    std::reverse(rev.begin(), rev.end());
    CHECK(rev == std::vector<Index>(bt.l2r.begin() + 1, bt.l2r.end() - 1));

    auto one = make_targets({9});
    CHECK(one.l2r[1] == one.r2l[1]);  // palindrome

    CHECK_THROWS_AS(make_targets({}), UsageError);
    CHECK_THROWS_AS(make_targets({5, Vocab::eos}), UsageError);
}

TEST_CASE("token collation shifts and pads") {
    auto tb = collate_tokens({{1, 5, 6, 2}, {1, 7, 2}});
    CHECK(tb.steps == 3);
    CHECK(tb.inputs == std::vector<Index>{1, 5, 6, 1, 7, 0});
    CHECK(tb.targets == std::vector<Index>{5, 6, 2, 7, 2, 0});
    CHECK_THROWS_AS(collate_tokens({{1}}), UsageError);
    CHECK_THROWS_AS(collate_tokens({}), UsageError);
}

TEST_CASE("train/val split is a deterministic partition") {
    auto corpus = tiny_corpus(31, 20);
    auto [tr1, va1] = split_train_val(corpus, 0.1, 77);
    auto [tr2, va2] = split_train_val(corpus, 0.1, 77);
    CHECK(va1.size() == 2);
    CHECK(tr1.size() == 18);
    REQUIRE(tr2.size() == tr1.size());
    for (size_t i = 0; i < tr1.size(); ++i) CHECK(tr1[i].tokens == tr2[i].tokens);

    // Partition: every sample lands in exactly one side.
    std::multiset<std::string> all, split_side;
    for (const auto& s : corpus) all.insert(default_vocab().detokenize(s.tokens));
    for (const auto& s : tr1) split_side.insert(default_vocab().detokenize(s.tokens));
    for (const auto& s : va1) split_side.insert(default_vocab().detokenize(s.tokens));
    CHECK(all == split_side);

    auto [tr3, va3] = split_train_val(corpus, 0.0, 77);
    CHECK(va3.empty());
    CHECK(tr3.size() == 20);
    CHECK_THROWS_AS(split_train_val(corpus, 1.0, 77), UsageError);
}

TEST_CASE("zero learning rate is a fixed point of the loop") {
    TempDir tmp("comer_lr0_");
    auto model = make_model(CoverageMode::fusion, 3);
    auto corpus = tiny_corpus(4, 6);
    std::vector<Sample> val(corpus.end() - 2, corpus.end());
    corpus.resize(4);

    std::vector<Vec<double>> before;
    for (auto& p : model.parameters()) before.push_back(p.values());

    TrainConfig cfg;
    cfg.lr = 0.0;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    train(model, corpus, val, cfg, tmp.path.string());

    auto params = model.parameters();
    REQUIRE(params.size() == before.size());
    for (size_t i = 0; i < params.size(); ++i) CHECK(params[i].values() == before[i]);
}

TEST_CASE("fixed seed reproduces the loss curve bitwise") {
    auto corpus = tiny_corpus(8, 8);
    std::vector<Sample> val(corpus.end() - 2, corpus.end());
    corpus.resize(6);
    TrainConfig cfg;
    cfg.lr = 0.02;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.seed = 5;

    TempDir t1("comer_det1_"), t2("comer_det2_");
    auto m1 = make_model(CoverageMode::fusion, 7);
    auto r1 = train(m1, corpus, val, cfg, t1.path.string());
    auto m2 = make_model(CoverageMode::fusion, 7);
    auto r2 = train(m2, corpus, val, cfg, t2.path.string());

    REQUIRE(r1.log.size() == r2.log.size());
    for (size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].train_loss == r2.log[i].train_loss);  // bitwise
        CHECK(r1.log[i].val_exprate == r2.log[i].val_exprate);
    }
}

TEST_CASE("loss falls over the first epochs for every coverage mode") {
    auto corpus = tiny_corpus(12, 14);
    std::vector<Sample> val(corpus.end() - 2, corpus.end());
    corpus.resize(12);
    for (CoverageMode mode : {CoverageMode::none, CoverageMode::self, CoverageMode::cross, CoverageMode::fusion}) {
        TempDir tmp(std::string("comer_trend_") + to_string(mode) + "_");
        auto model = make_model(mode, 11);
        TrainConfig cfg;
        cfg.lr = 0.03;
        cfg.epochs = 5;
        cfg.batch_size = 12;  // full batch: keeps the early descent smooth
        cfg.seed = 9;
        cfg.augment = false;
        auto res = train(model, corpus, val, cfg, tmp.path.string());
        REQUIRE(res.log.size() == 5);
        for (size_t e = 1; e < res.log.size(); ++e) {
            INFO("mode ", std::string(to_string(mode)), " epoch ", e);
            CHECK(res.log[e].train_loss < res.log[e - 1].train_loss);
        }
    }
}

TEST_CASE("resume continues the epoch counter and the metrics log") {
    TempDir tmp("comer_resume_");
    auto corpus = tiny_corpus(21, 8);
    std::vector<Sample> val(corpus.end() - 2, corpus.end());
    corpus.resize(6);
    TrainConfig cfg;
    cfg.lr = 0.02;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.seed = 13;

    auto model = make_model(CoverageMode::self, 17);
    auto first = train(model, corpus, val, cfg, tmp.path.string());
    REQUIRE(first.log.size() == 2);
    CHECK(first.log[0].epoch == 0);

    // A fresh process would construct a fresh model; resuming restores it.
    auto resumed = make_model(CoverageMode::self, 999);
    cfg.epochs = 4;
    auto second = train(resumed, corpus, val, cfg, tmp.path.string());
    REQUIRE(second.log.size() == 2);
    CHECK(second.log[0].epoch == 2);
    CHECK(second.log[1].epoch == 3);
    CHECK(second.best_epoch >= 0);

    std::ifstream metrics(tmp.path / "metrics.jsonl");
    Index lines = 0;
    std::string line;
    while (std::getline(metrics, line))
        if (!line.empty()) ++lines;
    CHECK(lines == 4);
    CHECK(std::filesystem::exists(tmp.path / "best.ckpt"));
    CHECK(std::filesystem::exists(tmp.path / "last.ckpt"));

    // Already-finished run: asking for the same epoch count is a no-op.
    auto third = train(resumed, corpus, val, cfg, tmp.path.string());
    CHECK(third.log.empty());
}

TEST_CASE("divergence aborts with a diagnostic") {
    TempDir tmp("comer_nan_");
    auto model = make_model(CoverageMode::none, 23);
    auto corpus = tiny_corpus(24, 4);
    TrainConfig cfg;
    cfg.lr = 1e8;  // guarantees overflow within a couple of steps
    cfg.epochs = 3;
    cfg.batch_size = 2;
    CHECK_THROWS_AS(train(model, corpus, {corpus[0]}, cfg, tmp.path.string()), NumericError);
}

TEST_CASE("evaluate reports a recountable exact-match rate") {
    TempDir tmp("comer_eval_");
    auto corpus = tiny_corpus(29, 6);
    std::vector<Sample> val(corpus.end() - 2, corpus.end());
    corpus.resize(4);
    auto model = make_model(CoverageMode::fusion, 31);
    TrainConfig cfg;
    cfg.lr = 0.02;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    train(model, corpus, val, cfg, tmp.path.string());

    auto res = evaluate(model, corpus, 2);
    CHECK(res.report.total == 4);
    REQUIRE(res.distances.size() == 4);
    REQUIRE(res.predictions.size() == 4);
    Index exact = 0;
    for (size_t i = 0; i < res.distances.size(); ++i) {
        CHECK(res.distances[i] == token_edit_distance(res.predictions[i], corpus[i].tokens));
        exact += res.distances[i] == 0;
    }
    CHECK(res.report.exprate == doctest::Approx(double(exact) / 4.0));
    CHECK_THROWS_AS(evaluate(model, std::vector<Sample>{}, 2), UsageError);
}

}  // TEST_SUITE
