// SPDX-License-Identifier: Apache-2.0
#include "comer/config.hpp"

#include <doctest.h>

using namespace comer;

namespace {

const char* kSampleIni = R"(
# run configuration
[model]
d_model = 64      ; comment after value
heads = 4
precision = float

[encoder]
growth = 8
blocks = 4, 4, 4
wide_stem = false

[training]
lr = 0.05
epochs = 12
augment = false

[search]
beam = 10
)";

}  // namespace

TEST_SUITE("config") {

TEST_CASE("ini parsing: sections, comments, errors") {
    auto rc = RunConfig::from_text(kSampleIni, "sample.ini");
    CHECK(rc.has("model", "d_model"));
    CHECK(rc.get_int("model", "d_model", 0) == 64);  // trailing comment stripped
    CHECK(rc.get_string("model", "precision", "") == "float");
    CHECK_FALSE(rc.has("model", "layers"));
    CHECK(rc.get_int("model", "layers", 3) == 3);  // fallback when absent

    CHECK_THROWS_AS(RunConfig::from_text("[model]\nx 1\n"), ConfigError);        // no '='
    CHECK_THROWS_AS(RunConfig::from_text("x = 1\n"), ConfigError);               // key outside section
    CHECK_THROWS_AS(RunConfig::from_text("[model\nx = 1\n"), ConfigError);       // unclosed header
    CHECK_THROWS_AS(RunConfig::from_text("[m]\n= 1\n"), ConfigError);            // empty key
    CHECK_THROWS_AS(RunConfig::from_text("[m]\na = 1\na = 2\n"), ConfigError);   // duplicate
    CHECK_THROWS_AS(RunConfig::from_file("/nonexistent/run.ini"), IoError);

    // error messages carry the origin and line number
    try {
        RunConfig::from_text("[model]\nbroken\n", "conf.ini");
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("conf.ini:2") != std::string::npos);
    }
}

TEST_CASE("typed getters validate and report the offending key") {
    auto rc = RunConfig::from_text("[a]\nn = 12x\nf = nope\nb = maybe\nl = 1,,2\n", "t.ini");
    CHECK_THROWS_AS(rc.get_int("a", "n", 0), ConfigError);
    CHECK_THROWS_AS(rc.get_double("a", "f", 0.0), ConfigError);
    CHECK_THROWS_AS(rc.get_bool("a", "b", false), ConfigError);
    CHECK_THROWS_AS(rc.get_int_list("a", "l", {}), ConfigError);
    try {
        rc.get_int("a", "n", 0);
        CHECK(false);
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[a] n") != std::string::npos);
        CHECK(msg.find("12x") != std::string::npos);
    }

    auto ok = RunConfig::from_text("[a]\nb1 = 1\nb0 = false\nl = 16,16,16\nd = 2.5\n");
    CHECK(ok.get_bool("a", "b1", false));
    CHECK_FALSE(ok.get_bool("a", "b0", true));
    CHECK(ok.get_int_list("a", "l", {}) == std::vector<Index>{16, 16, 16});
    CHECK(ok.get_double("a", "d", 0) == doctest::Approx(2.5));
}

TEST_CASE("unknown keys are rejected once all knobs are read") {
    auto rc = RunConfig::from_text("[model]\nd_model = 32\nd_modle = 7\n", "typo.ini");
    rc.get_int("model", "d_model", 0);
    try {
        rc.reject_unknown();
        CHECK(false);
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("model.d_modle") != std::string::npos);
    }
    rc.get_int("model", "d_modle", 0);  // consuming it clears the complaint
    CHECK_NOTHROW(rc.reject_unknown());
}

TEST_CASE("command-line overrides replace file values") {
    auto rc = RunConfig::from_text(kSampleIni);
    rc.set("training", "epochs", "3");
    rc.set("training", "batch_size", "4");  // new key
    CHECK(rc.get_int("training", "epochs", 0) == 3);
    CHECK(rc.get_int("training", "batch_size", 0) == 4);
}

TEST_CASE("typed section views") {
    auto rc = RunConfig::from_text(kSampleIni);
    auto mc = model_spec(rc, CoverageMode::cross, 25);
    CHECK(mc.decoder.d_model == 64);
    CHECK(mc.encoder.d_model == 64);
    CHECK(mc.encoder.growth == 8);
    CHECK(mc.encoder.block_layers == std::vector<Index>{4, 4, 4});
    CHECK(mc.decoder.mode == CoverageMode::cross);
    CHECK(mc.decoder.vocab == 25);

    auto ts = train_spec(rc);
    CHECK(ts.cfg.lr == doctest::Approx(0.05));
    CHECK(ts.cfg.epochs == 12);
    CHECK_FALSE(ts.cfg.augment);
    CHECK(ts.precision == "float");

    auto ss = search_spec(rc);
    CHECK(ss.beam == 10);
    CHECK(ss.max_len == 0);

    auto ds = dataset_spec(rc);  // all defaults; nothing in [dataset]
    CHECK(ds.grammar.max_len == 30);
    CHECK(ds.count == 2000);

    rc.reject_unknown();  // every sample key was consumed by the views

    auto bad_lr = RunConfig::from_text("[training]\nlr = 0\n");
    CHECK_THROWS_AS(train_spec(bad_lr), ConfigError);
    auto bad_prec = RunConfig::from_text("[model]\nprecision = half\n");
    CHECK_THROWS_AS(train_spec(bad_prec), ConfigError);
    auto bad_heads = RunConfig::from_text("[model]\nd_model = 30\nheads = 4\n");
    CHECK_THROWS_AS(model_spec(bad_heads, CoverageMode::none, 25), ConfigError);
    auto bad_beam = RunConfig::from_text("[search]\nbeam = 0\n");
    CHECK_THROWS_AS(search_spec(bad_beam), ConfigError);
}

TEST_CASE("model metadata survives the checkpoint entry round trip") {
    ModelConfig mc;
    mc.encoder.growth = 8;
    mc.encoder.block_layers = {4, 6, 4};
    mc.encoder.wide_stem = true;
    mc.encoder.d_model = 48;
    mc.encoder.dropout = 0.15;
    mc.decoder.d_model = 48;
    mc.decoder.heads = 4;
    mc.decoder.layers = 2;
    mc.decoder.d_ff = 96;
    mc.decoder.dropout = 0.15;
    mc.decoder.vocab = 25;
    mc.decoder.mode = CoverageMode::self;
    mc.decoder.arm_kernel = 3;
    mc.decoder.arm_channels = 8;
    mc.decoder.arm_start_layer = 0;
    mc.decoder.arm_shared = false;
    mc.decoder.scale_embedding = false;

    auto entry = model_meta_entry(mc, "float");
    std::string precision;
    auto back = model_meta_from({entry}, &precision);
    CHECK(precision == "float");
    CHECK(back.encoder.growth == 8);
    CHECK(back.encoder.block_layers == std::vector<Index>{4, 6, 4});
    CHECK(back.encoder.wide_stem);
    CHECK(back.encoder.dropout == doctest::Approx(0.15));
    CHECK(back.decoder.d_model == 48);
    CHECK(back.decoder.mode == CoverageMode::self);
    CHECK(back.decoder.arm_start_layer == 0);
    CHECK_FALSE(back.decoder.arm_shared);
    CHECK_FALSE(back.decoder.scale_embedding);

    CHECK_THROWS_AS(model_meta_from({}), IoError);
    CheckpointEntry junk = entry;
    junk.values.resize(3);  // truncated JSON
    CHECK_THROWS_AS(model_meta_from({junk}), IoError);
}

}  // TEST_SUITE
