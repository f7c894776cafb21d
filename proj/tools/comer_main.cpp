// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: corpus generation, training, evaluation, attention
// refinement visualization, and the coverage-mode ablation table.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "comer/config.hpp"
#include "comer/search.hpp"
#include "comer/train.hpp"

namespace fs = std::filesystem;
using namespace comer;

namespace {

// ---------------------------------------------------------------------------
// Shared plumbing

struct LoadedConfig {
    RunConfig rc;
    DatasetSpec dataset;
    ModelConfig model;  // coverage mode / vocab filled in by the command
    TrainSpec train;
    SearchSpec search;
};

// Reads the INI, applies --set section.key=value overrides, materializes every
// typed view (so reject_unknown sees all known keys), and rejects strays.
LoadedConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    RunConfig rc = RunConfig::from_file(path);
    for (const std::string& ov : overrides) {
        size_t eq = ov.find('=');
        size_t dot = ov.find('.');
        check_as<UsageError>(eq != std::string::npos && dot != std::string::npos && dot > 0 && dot < eq,
                             "--set expects section.key=value, got '" + ov + "'");
        rc.set(ov.substr(0, dot), ov.substr(dot + 1, eq - dot - 1), ov.substr(eq + 1));
    }
    LoadedConfig lc;
    lc.dataset = dataset_spec(rc);
    lc.model = model_spec(rc, CoverageMode::fusion, Index(default_vocab().size()));
    lc.train = train_spec(rc);
    lc.search = search_spec(rc);
    rc.reject_unknown();
    lc.rc = std::move(rc);
    return lc;
}

template <typename T>
Model<T> model_from_checkpoint(const std::string& path, ModelConfig mc) {
    Model<T> m{mc};
    load_model(m, path);
    return m;
}

// Per-length accuracy table, one row per bucket plus the overall line.
void print_bucket_table(const EvalReport& report) {
    std::printf("  %-8s %6s %9s\n", "bucket", "count", "exprate");
    for (int b = 0; b < 4; ++b)
        std::printf("  %-8s %6lld %9.3f\n", bucket_label(b), (long long)report.bucket_count[size_t(b)],
                    report.bucket_acc[size_t(b)]);
    std::printf("  %-8s %6lld %9.3f\n", "overall", (long long)report.total, report.exprate);
}

// Grayscale export of one refinement map, stretched to [0, 255] per image.
// The raw value range rides in a header comment so the scale is recoverable.
void write_heatmap_pgm(const std::string& path, Index h, Index w, const std::vector<double>& cells) {
    double lo = cells[0], hi = cells[0];
    for (double v : cells) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    double range = hi - lo < 1e-300 ? 1.0 : hi - lo;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    check_as<IoError>(bool(os), "cannot open '" + path + "' for writing");
    os << "P5\n# per-image min-max normalization: raw min=" << lo << " max=" << hi << "\n" << w << " " << h
       << "\n255\n";
    for (double v : cells) os.put(char((unsigned char)(std::lround((v - lo) / range * 255.0))));
    check_as<IoError>(bool(os), "write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
    std::string config;
    std::string out;
    std::vector<std::string> sets;
    long long seed = 0;
    long long n = 0;  // 0 = dataset.count from the config
    bool force = false;
};

int run_gen(const GenArgs& a) {
    LoadedConfig lc = load_config(a.config, a.sets);
    if (a.n > 0) lc.dataset.count = Index(a.n);

    if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.force)
        throw UsageError("output directory '" + a.out + "' is not empty (pass --force to overwrite)");

    Vocab vocab = default_vocab();
    GlyphAtlas atlas = default_atlas();
    auto samples = generate(lc.dataset.grammar, lc.dataset.render, vocab, atlas, std::uint64_t(a.seed),
                            size_t(lc.dataset.count));
    save_dataset(a.out, samples, vocab);

    size_t hist[4] = {0, 0, 0, 0};
    size_t long_count = 0;
    for (const Sample& s : samples) {
        ++hist[size_t(length_bucket(Index(s.tokens.size())))];
        if (s.tokens.size() >= 15) ++long_count;
    }
    std::printf("wrote %zu samples to %s (seed %lld)\n", samples.size(), a.out.c_str(), a.seed);
    std::printf("length histogram: ");
    for (int b = 0; b < 4; ++b) std::printf("%s: %zu  ", bucket_label(b), hist[b]);
    std::printf("\nsequences with length >= 15: %zu\n", long_count);
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    std::string config;
    std::string coverage = "fusion";
    std::string data;
    std::string out;
    std::vector<std::string> sets;
    long long seed = -1;  // -1 = training.seed from the config
};

template <typename T>
int run_train_t(const TrainArgs& a, LoadedConfig& lc, CoverageMode mode) {
    Vocab vocab = default_vocab();
    lc.model.decoder.mode = mode;
    lc.model.decoder.vocab = Index(vocab.size());
    TrainConfig tc = lc.train.cfg;
    if (a.seed >= 0) tc.seed = std::uint64_t(a.seed);

    auto corpus = load_dataset(a.data, vocab);
    auto [train_set, val_set] = split_train_val(std::move(corpus), lc.train.val_fraction, tc.seed);
    std::printf("training %s/%s on %zu samples (val %zu), %lld epochs\n", to_string(mode), lc.train.precision.c_str(),
                train_set.size(), val_set.size(), (long long)tc.epochs);
    std::fflush(stdout);

    Model<T> model{lc.model};
    init_model(model, tc.seed);
    model.accept_norm_defaults();

    auto result = train(model, train_set, val_set, tc, a.out, {model_meta_entry(lc.model, lc.train.precision)});
    for (const EpochLog& e : result.log)
        std::printf("epoch %lld  loss %.4f  val_exprate %.3f  (%.1fs)\n", (long long)e.epoch, e.train_loss,
                    e.val_exprate, e.seconds);
    std::printf("best val_exprate %.3f at epoch %lld; checkpoints under %s\n", result.best_val,
                (long long)result.best_epoch, a.out.c_str());
    return 0;
}

int run_train(const TrainArgs& a) {
    CoverageMode mode = coverage_mode_from(a.coverage);
    LoadedConfig lc = load_config(a.config, a.sets);
    if (lc.train.precision == "float") return run_train_t<float>(a, lc, mode);
    return run_train_t<double>(a, lc, mode);
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string out;
    long long beam = 10;
    long long max_len = 0;  // 0 = twice the longest reference plus two
};

template <typename T>
int run_eval_t(const EvalArgs& a, const ModelConfig& mc) {
    Vocab vocab = default_vocab();
    check_as<ConfigError>(mc.decoder.vocab == Index(vocab.size()),
                          "checkpoint vocabulary size " + std::to_string(mc.decoder.vocab) +
                              " does not match the built-in symbol set (" + std::to_string(vocab.size()) + ")");
    Model<T> model = model_from_checkpoint<T>(a.checkpoint, mc);
    auto samples = load_dataset(a.data, vocab);
    auto ev = evaluate(model, samples, Index(a.beam), Index(a.max_len));

    std::cout << report_json(ev.report).dump(2) << "\n";
    print_bucket_table(ev.report);

    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream rj(fs::path(a.out) / "report.json", std::ios::trunc);
        rj << report_json(ev.report).dump(2) << "\n";
        std::ofstream tsv(fs::path(a.out) / "predictions.tsv", std::ios::trunc);
        for (size_t i = 0; i < samples.size(); ++i)
            tsv << sample_stem(Index(i)) << "\t" << ev.distances[i] << "\t" << vocab.detokenize(ev.predictions[i])
                << "\n";
        check_as<IoError>(bool(rj) && bool(tsv), "failed writing evaluation artifacts under '" + a.out + "'");
        std::printf("wrote report.json and predictions.tsv to %s\n", a.out.c_str());
    }
    return 0;
}

int run_eval(const EvalArgs& a) {
    check_as<UsageError>(a.beam >= 1, "--beam must be at least 1");
    std::string precision;
    ModelConfig mc = model_meta_from(read_checkpoint(a.checkpoint), &precision);
    if (precision == "float") return run_eval_t<float>(a, mc);
    return run_eval_t<double>(a, mc);
}

// ---------------------------------------------------------------------------
// visualize

struct VisArgs {
    std::string checkpoint;
    std::string image;
    std::string out;
    long long max_len = 64;
};

template <typename T>
int run_visualize_t(const VisArgs& a, const ModelConfig& mc) {
    if (mc.decoder.mode == CoverageMode::none)
        throw UsageError(
            "checkpoint was trained with coverage mode 'none', which computes no refinement maps; "
            "train with self|cross|fusion to visualize refinement");
    Model<T> model = model_from_checkpoint<T>(a.checkpoint, mc);
    Vocab vocab = default_vocab();
    Image img = read_pgm(a.image);

    NoGradGuard ng;
    Rng rng(0);
    auto batch = collate_images<T>({&img});
    Memory<T> memo = encode(model, batch.images, batch.mask, false, rng);
    auto tokens = greedy_decode(model.decoder, memo.mem, memo.key, memo.h(), memo.w(), Index(a.max_len));

    // Teacher-force the decoded sequence back through the parallel path to
    // capture every step's refinement in one pass. Step count includes the
    // final end-marker emission.
    Index steps = Index(tokens.size()) + 1;
    std::vector<Index> inputs;
    inputs.push_back(Vocab::sos_l2r);
    inputs.insert(inputs.end(), tokens.begin(), tokens.end());
    DecodeTrace<T> trace;
    decode_parallel(model.decoder, memo.mem, memo.key, memo.h(), memo.w(), inputs, steps, false, rng, &trace);

    const Index h = memo.h(), w = memo.w(), L = h * w, heads = mc.decoder.heads;
    std::vector<Index> armed;
    for (Index j = 0; j < Index(trace.refinement.size()); ++j)
        if (trace.refinement[size_t(j)].defined()) armed.push_back(j);
    check_as<StateError>(!armed.empty(), "no layer produced a refinement map");

    fs::create_directories(a.out);
    std::ofstream csv(fs::path(a.out) / "refinement.csv", std::ios::trunc);
    csv << "step,layer,head,row,col,value\n";

    auto cell_at = [&](const Tensor<T>& t4, Index k, Index t, Index l) {
        return double(t4.values()[size_t(((k * steps) + t) * L + l)]);
    };

    size_t files = 0;
    for (Index t = 0; t < steps; ++t) {
        fs::path step_dir = fs::path(a.out) / ("step" + std::to_string(t));
        fs::create_directories(step_dir);
        for (Index j : armed) {
            const Tensor<T>& r = trace.refinement[size_t(j)];
            std::vector<double> mean_cells(size_t(L), 0.0);
            for (Index k = 0; k < heads; ++k) {
                std::vector<double> cells(size_t(L), 0.0);
                for (Index l = 0; l < L; ++l) {
                    cells[size_t(l)] = cell_at(r, k, t, l);
                    mean_cells[size_t(l)] += cells[size_t(l)] / double(heads);
                    csv << t << "," << j << "," << k << "," << (l / w) << "," << (l % w) << ","
                        << cells[size_t(l)] << "\n";
                }
                std::string name = "step" + std::to_string(t) + "_layer" + std::to_string(j) + "_head" +
                                   std::to_string(k) + ".pgm";
                write_heatmap_pgm((step_dir / name).string(), h, w, cells);
                ++files;
            }
            std::string mean_name =
                "step" + std::to_string(t) + "_layer" + std::to_string(j) + "_mean.pgm";
            write_heatmap_pgm((step_dir / mean_name).string(), h, w, mean_cells);
            ++files;
        }
    }
    check_as<IoError>(bool(csv), "write to refinement.csv failed");

    // Head-averaged refinement on the first refined layer, split by whether a
    // cell's accumulated attention from earlier steps exceeds 0.5.
    const Tensor<T>& raw0 = trace.raw[size_t(armed.front())];
    const Tensor<T>& ref0 = trace.refinement[size_t(armed.front())];
    nlohmann::json per_step = nlohmann::json::array();
    Index attended_higher = 0, steps_with_attended = 0;
    std::vector<double> cum(size_t(L), 0.0);
    for (Index t = 0; t < steps; ++t) {
        double att_sum = 0, un_sum = 0;
        Index att_n = 0, un_n = 0;
        for (Index l = 0; l < L; ++l) {
            double r_mean = 0;
            for (Index k = 0; k < heads; ++k) r_mean += cell_at(ref0, k, t, l) / double(heads);
            if (cum[size_t(l)] > 0.5) {
                att_sum += r_mean;
                ++att_n;
            } else {
                un_sum += r_mean;
                ++un_n;
            }
        }
        double att_mean = att_n ? att_sum / double(att_n) : 0.0;
        double un_mean = un_n ? un_sum / double(un_n) : 0.0;
        if (att_n > 0) {
            ++steps_with_attended;
            if (att_mean > un_mean) ++attended_higher;
        }
        per_step.push_back({{"step", t},
                            {"attended_cells", att_n},
                            {"attended_mean_refinement", att_mean},
                            {"unattended_mean_refinement", un_mean}});
        for (Index l = 0; l < L; ++l)
            for (Index k = 0; k < heads; ++k) cum[size_t(l)] += cell_at(raw0, k, t, l) / double(heads);
    }

    nlohmann::json summary{{"decoded", vocab.detokenize(tokens)},
                           {"steps", steps},
                           {"grid_h", h},
                           {"grid_w", w},
                           {"heads", heads},
                           {"refined_layers", armed},
                           {"comparison_layer", armed.front()},
                           {"steps_with_attended_cells", steps_with_attended},
                           {"steps_attended_refined_higher", attended_higher},
                           {"per_step", per_step}};
    std::ofstream sj(fs::path(a.out) / "summary.json", std::ios::trunc);
    sj << summary.dump(2) << "\n";
    check_as<IoError>(bool(sj), "write to summary.json failed");

    std::printf("decoded: %s\n", vocab.detokenize(tokens).c_str());
    std::printf("wrote %zu heatmaps over %lld steps to %s\n", files, (long long)steps, a.out.c_str());
    return 0;
}

int run_visualize(const VisArgs& a) {
    check_as<UsageError>(a.max_len >= 1, "--max-len must be at least 1");
    std::string precision;
    ModelConfig mc = model_meta_from(read_checkpoint(a.checkpoint), &precision);
    if (precision == "float") return run_visualize_t<float>(a, mc);
    return run_visualize_t<double>(a, mc);
}

// ---------------------------------------------------------------------------
// ablate

struct AblateArgs {
    std::string config;
    std::string data;
    std::string out;
    std::vector<std::string> sets;
    long long seeds = 3;
};

template <typename T>
int run_ablate_t(const AblateArgs& a, LoadedConfig& lc) {
    Vocab vocab = default_vocab();
    auto corpus = load_dataset((fs::path(a.data) / "train").string(), vocab);
    auto test_set = load_dataset((fs::path(a.data) / "test").string(), vocab);
    std::printf("ablation over %lld seeds: %zu train / %zu test samples\n", a.seeds, corpus.size(), test_set.size());
    std::fflush(stdout);

    const CoverageMode modes[] = {CoverageMode::none, CoverageMode::self, CoverageMode::cross, CoverageMode::fusion};
    double mean_exprate[4] = {0, 0, 0, 0};
    double mean_long[4] = {0, 0, 0, 0};

    for (int mi = 0; mi < 4; ++mi) {
        for (long long s = 0; s < a.seeds; ++s) {
            std::uint64_t cell_seed = lc.train.cfg.seed + std::uint64_t(s);
            ModelConfig mc = lc.model;
            mc.decoder.mode = modes[mi];
            mc.decoder.vocab = Index(vocab.size());
            TrainConfig tc = lc.train.cfg;
            tc.seed = cell_seed;

            auto [train_set, val_set] = split_train_val(corpus, lc.train.val_fraction, cell_seed);
            Model<T> model{mc};
            init_model(model, cell_seed);
            model.accept_norm_defaults();

            std::string cell_dir =
                (fs::path(a.out) / (std::string(to_string(modes[mi])) + "_seed" + std::to_string(s))).string();
            auto result =
                train(model, train_set, val_set, tc, cell_dir, {model_meta_entry(mc, lc.train.precision)});
            load_model(model, result.best_path);
            auto ev = evaluate(model, test_set, lc.search.beam, lc.search.max_len);
            mean_exprate[mi] += ev.report.exprate / double(a.seeds);
            mean_long[mi] += ev.report.long_acc / double(a.seeds);
            std::printf("[%s seed %lld] test exprate %.3f  long_acc %.3f\n", to_string(modes[mi]), s,
                        ev.report.exprate, ev.report.long_acc);
            std::fflush(stdout);
        }
    }

    fs::create_directories(a.out);
    std::string tsv_path = (fs::path(a.out) / "ablation.tsv").string();
    std::ofstream tsv(tsv_path, std::ios::binary | std::ios::trunc);
    tsv << "mode\texprate\tlong_acc\tdelta_vs_none\n";
    std::printf("\n%-8s %9s %9s %12s\n", "mode", "exprate", "long_acc", "delta vs none");
    for (int mi = 0; mi < 4; ++mi) {
        char row[160];
        char delta[32];
        std::snprintf(delta, sizeof delta, "(%+.2f)", (mean_exprate[mi] - mean_exprate[0]) * 100.0);
        std::snprintf(row, sizeof row, "%s\t%.2f\t%.2f\t%s\n", to_string(modes[mi]), mean_exprate[mi] * 100.0,
                      mean_long[mi] * 100.0, delta);
        tsv << row;
        std::printf("%-8s %9.2f %9.2f %12s\n", to_string(modes[mi]), mean_exprate[mi] * 100.0,
                    mean_long[mi] * 100.0, delta);
    }
    check_as<IoError>(bool(tsv), "write to '" + tsv_path + "' failed");
    std::printf("wrote %s\n", tsv_path.c_str());
    return 0;
}

int run_ablate(const AblateArgs& a) {
    check_as<UsageError>(a.seeds >= 1, "--seeds must be at least 1");
    LoadedConfig lc = load_config(a.config, a.sets);
    if (lc.train.precision == "float") return run_ablate_t<float>(a, lc);
    return run_ablate_t<double>(a, lc);
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* t = std::getenv("COMER_THREADS")) {
        int n = std::atoi(t);
        if (n >= 1) Eigen::setNbThreads(n);
    }

    CLI::App app{"glyph-formula recognizer: coverage-refined attention encoder-decoder"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* cg = app.add_subcommand("gen", "generate a synthetic rendered-formula dataset");
    cg->add_option("--config", gen.config, "run configuration INI")->required();
    cg->add_option("--out", gen.out, "output dataset directory")->required();
    cg->add_option("--seed", gen.seed, "corpus seed (default 0)");
    cg->add_option("--n", gen.n, "sample count (overrides dataset.count)");
    cg->add_flag("--force", gen.force, "overwrite a non-empty output directory");
    cg->add_option("--set", gen.sets, "override a config key (section.key=value)");

    TrainArgs tr;
    auto* ct = app.add_subcommand("train", "train a recognizer on a generated dataset");
    ct->add_option("--config", tr.config, "run configuration INI")->required();
    ct->add_option("--coverage", tr.coverage, "coverage mode: none|self|cross|fusion (default fusion)");
    ct->add_option("--data", tr.data, "dataset directory")->required();
    ct->add_option("--out", tr.out, "run directory for checkpoints and metrics")->required();
    ct->add_option("--seed", tr.seed, "override training.seed");
    ct->add_option("--set", tr.sets, "override a config key (section.key=value)");

    EvalArgs ev;
    auto* ce = app.add_subcommand("eval", "evaluate a checkpoint with bidirectional joint search");
    ce->add_option("--checkpoint", ev.checkpoint, "model checkpoint (.ckpt)")->required();
    ce->add_option("--data", ev.data, "dataset directory")->required();
    ce->add_option("--beam", ev.beam, "beam width (default 10)");
    ce->add_option("--max-len", ev.max_len, "decode length cap (default: 2 * longest reference + 2)");
    ce->add_option("--out", ev.out, "directory for report.json and predictions.tsv");

    VisArgs vis;
    auto* cv = app.add_subcommand("visualize", "export attention refinement heatmaps for one image");
    cv->add_option("--checkpoint", vis.checkpoint, "model checkpoint (.ckpt)")->required();
    cv->add_option("--image", vis.image, "input PGM image")->required();
    cv->add_option("--out", vis.out, "output directory")->required();
    cv->add_option("--max-len", vis.max_len, "decode length cap (default 64)");

    AblateArgs ab;
    auto* ca = app.add_subcommand("ablate", "train and score every coverage mode over several seeds");
    ca->add_option("--config", ab.config, "run configuration INI")->required();
    ca->add_option("--data", ab.data, "directory holding train/ and test/ datasets")->required();
    ca->add_option("--out", ab.out, "output directory for runs and ablation.tsv")->required();
    ca->add_option("--seeds", ab.seeds, "seeds per mode (default 3)");
    ca->add_option("--set", ab.sets, "override a config key (section.key=value)");

    int rc = 0;
    cg->callback([&] { rc = run_gen(gen); });
    ct->callback([&] { rc = run_train(tr); });
    ce->callback([&] { rc = run_eval(ev); });
    cv->callback([&] { rc = run_visualize(vis); });
    ca->callback([&] { rc = run_ablate(ab); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}
