#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "styleseg/config.hpp"
#include "styleseg/data.hpp"
#include "styleseg/diagnostics.hpp"
#include "styleseg/evaluation.hpp"
#include "styleseg/hashing.hpp"
#include "styleseg/metrics.hpp"
#include "styleseg/synthetic.hpp"
#include "styleseg/training.hpp"

namespace fs = std::filesystem;
using namespace styleseg;

namespace {

constexpr const char* kVersion = "styleseg 0.3.0";

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

/// Raised for command-line misuse that CLI11 cannot detect on its own.
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string utc_now() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

bool seed_from_env() {
    const char* env = std::getenv("STYLESEG_SEED");
    return env && *env;
}

/// run_manifest.json: written when a command starts and rewritten when it finishes.
class RunManifest {
public:
    RunManifest(fs::path dir, std::string command) : path_(std::move(dir) / "run_manifest.json") {
        doc_["command"] = std::move(command);
        doc_["version"] = kVersion;
        doc_["started_at"] = utc_now();
        doc_["status"] = "running";
        doc_["outputs"] = nlohmann::json::array();
    }

    void set_config(const fs::path& config) {
        doc_["config"] = {{"path", fs::absolute(config).lexically_normal().string()}, {"sha256", sha256_file(config)}};
    }

    void set_seed(std::uint64_t seed) {
        doc_["seed"] = seed;
        doc_["seed_source"] = seed_from_env() ? "STYLESEG_SEED" : "config";
    }

    void add_output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
    nlohmann::json& extra() { return doc_; }

    void write() const {
        fs::create_directories(path_.parent_path());
        std::ofstream out(path_, std::ios::trunc);
        out << doc_.dump(2) << "\n";
    }

    void finish() {
        doc_["status"] = "completed";
        doc_["finished_at"] = utc_now();
        write();
    }

private:
    fs::path path_;
    nlohmann::json doc_;
};

std::string command_line(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

void clear_dir(const fs::path& p) {
    if (!fs::exists(p)) return;
    for (const auto& e : fs::directory_iterator(p)) fs::remove_all(e.path());
}

// -- generate ------------------------------------------------------------------

struct GenerateArgs {
    std::string config;
    std::string out;
    bool force = false;
};

int cmd_generate(const GenerateArgs& a, const std::string& cmdline) {
    const auto cfg = load_synth_config(a.config);
    const fs::path root = !a.out.empty() ? fs::path(a.out) : fs::path(cfg.out);
    if (root.empty()) throw UsageError("no output directory: pass --out or set synth.out in the config");
    if (non_empty_dir(root)) {
        if (!a.force) throw UsageError("output directory " + root.string() + " is not empty; pass --force to overwrite");
        clear_dir(root);
    }
    RunManifest manifest(root, cmdline);
    manifest.set_config(a.config);
    manifest.set_seed(cfg.synth.seed);
    manifest.write();
    const auto summary = generate_synthetic_corpus(cfg.synth, root);
    manifest.add_output(root / "manifest.csv");
    manifest.add_output(root / "images");
    manifest.add_output(root / "masks");
    manifest.extra()["corpus_manifest_sha256"] = sha256_file(root / "manifest.csv");
    manifest.finish();
    std::cout << "generated " << summary.images << " images, " << summary.masks << " masks in " << root.string() << "\n";
    return kExitOk;
}

// -- train ---------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    bool resume = false;
    bool force = false;
};

int cmd_train(const TrainArgs& a, const std::string& cmdline) {
    const auto cfg = load_train_config(a.config);
    const fs::path root = cfg.checkpoint_dir;
    if (!a.resume && latest_epoch(root)) {
        if (!a.force) {
            throw UsageError("checkpoint_dir " + root.string() + " already holds checkpoints; pass --resume or --force");
        }
        clear_dir(root);
    }
    const auto corpus = load_corpus(cfg.corpus, {cfg.resolution});
    const auto train = corpus.split("train"), val = corpus.split("val");
    if (train.empty()) throw TrainConfigError("corpus " + cfg.corpus + " has no train split");
    if (val.empty()) throw TrainConfigError("corpus " + cfg.corpus + " has no val split");

    RunManifest manifest(root, cmdline);
    manifest.set_config(a.config);
    manifest.set_seed(cfg.seed);
    manifest.extra()["data_order"] = "single-threaded";
    manifest.extra()["resume"] = a.resume;
    manifest.extra()["train_pairs"] = pair_count(train);
    manifest.extra()["val_pairs"] = pair_count(val);
    manifest.write();

    std::cout << "training mode=" << to_string(cfg.mode) << " M=" << cfg.styles << " on " << pair_count(train)
              << " pairs (" << pair_count(val) << " val)\n";
    const auto trainer = run_training(cfg, train, val, a.resume, [](const Trainer&, const EpochLog& e) {
        std::printf("epoch %3d  l1 %.4f  l2 %.4f  l3 %.4f  total %.4f  val_total %.4f\n", e.epoch, e.l1, e.l2, e.l3,
                    e.total, e.val_total);
        std::fflush(stdout);
    });
    const auto& log = trainer.log();
    const auto* best = log.find(log.best_epoch);
    std::printf("\nbest epoch  %d\nval_total   %.6f\ncheckpoint  %s\n", log.best_epoch, best ? best->val_total : 0.0,
                epoch_dir(root, log.best_epoch).string().c_str());
    manifest.add_output(root / "runlog.csv");
    manifest.add_output(root / "best.txt");
    manifest.add_output(epoch_dir(root, log.best_epoch));
    manifest.extra()["best_epoch"] = log.best_epoch;
    manifest.finish();
    return kExitOk;
}

// -- eval ----------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string corpus;
    std::string out;
    std::string records;
    std::string split = "test";
    std::string group_by = "preference";
    double threshold = 0.5;
    bool as2_only = false;
    bool resize = false;
    bool force = false;
};

void print_assignment(const GroupAssignmentTable& table) {
    std::printf("\nstyle assignment by %s\n", to_string(table.key).c_str());
    for (const auto& [group, a] : table.rows) {
        std::printf("  %-16s n=%-5zu AS2 %.6f  modal style %d\n", group.c_str(), a.count, a.as2, a.modal_style + 1);
    }
    const auto s = table.as2_summary();
    std::printf("  AS2 across groups %.4f +- %.4f; modal styles %s\n", s.mean, s.std,
                table.modal_styles_distinct ? "distinct" : "not distinct");
}

void write_tables_from_records(const std::vector<EvalRecord>& records, GroupKey key, const fs::path& out,
                               RunManifest& manifest) {
    write_preferences_csv(out / "preferences.csv", preference_reports(records));
    manifest.add_output(out / "preferences.csv");
    if (records.front().dice.size() < 2) {
        warn("M = 1: style assignment is undefined; assignment.csv holds only its header");
        std::ofstream(out / "assignment.csv", std::ios::trunc) << "group,q_1,as2,modal_style\n";
    } else {
        const auto table = group_style_assignment(records, key);
        write_assignment_csv(out / "assignment.csv", table);
        print_assignment(table);
    }
    manifest.add_output(out / "assignment.csv");
}

int cmd_eval(const EvalArgs& a, const std::string& cmdline) {
    const auto key = parse_group_key(a.group_by);
    if (!key) throw UsageError("--group-by must be preference, tool, annotator or planted_style");
    if (!(a.threshold > 0.0 && a.threshold < 1.0)) throw UsageError("--threshold must lie in (0,1)");
    const fs::path out = a.out;
    if (a.as2_only) {
        if (a.records.empty()) throw UsageError("--as2-only needs --records <records.csv>");
        const auto records = read_records_csv(a.records);
        fs::create_directories(out);
        RunManifest manifest(out, cmdline);
        manifest.extra()["records"] = a.records;
        manifest.extra()["records_sha256"] = sha256_file(a.records);
        write_tables_from_records(records, *key, out, manifest);
        manifest.finish();
        return kExitOk;
    }
    if (a.checkpoint.empty() || a.corpus.empty()) throw UsageError("eval needs --checkpoint and --corpus (or --as2-only)");
    if (a.split != "train" && a.split != "val" && a.split != "test" && a.split != "all") {
        throw UsageError("--split must be train, val, test or all");
    }
    if (non_empty_dir(out) && !a.force) throw UsageError("output directory " + out.string() + " is not empty; pass --force");

    const auto ckpt = resolve_checkpoint(a.checkpoint);
    const auto trainer = Trainer::load(ckpt);
    const auto& model = trainer.segmenter();
    const int res = model.config().resolution;
    const auto corpus = load_corpus(a.corpus, {a.resize ? res : 0});
    const auto samples = a.split == "all" ? corpus.samples : corpus.split(a.split);
    if (samples.empty()) throw EvaluationError("corpus split '" + a.split + "' is empty");

    fs::create_directories(out);
    RunManifest manifest(out, cmdline);
    manifest.extra()["checkpoint"] = ckpt.string();
    manifest.extra()["checkpoint_sha256"] = sha256_file(ckpt / "model.bin");
    manifest.extra()["corpus"] = a.corpus;
    manifest.extra()["split"] = a.split;
    manifest.extra()["threshold"] = a.threshold;
    manifest.write();

    const auto records = evaluate_corpus(model, samples, a.threshold);
    write_records_csv(out / "records.csv", records);
    manifest.add_output(out / "records.csv");

    const auto stats = style_statistics(records);
    std::printf("%zu pairs, M=%d, threshold %.3f\n", records.size(), model.config().styles, a.threshold);
    std::printf("  max_j  (IASS) %.4f +- %.4f\n  mean_j        %.4f +- %.4f\n  median_j      %.4f +- %.4f\n"
                "  min_j         %.4f +- %.4f\n",
                stats.max.mean, stats.max.std, stats.mean.mean, stats.mean.std, stats.median.mean, stats.median.std,
                stats.min.mean, stats.min.std);
    write_tables_from_records(records, *key, out, manifest);

    const auto shapes = consistency_analysis(model, samples, a.threshold);
    write_shapes_csv(out / "shapes.csv", shapes.rows);
    manifest.add_output(out / "shapes.csv");
    std::printf("\nshape centroids (area_ratio, perimeter_ratio) relative to style 1\n");
    for (std::size_t j = 0; j < shapes.centroids.size(); ++j) {
        if (shapes.centroids[j]) {
            std::printf("  style %zu  %.4f  %.4f\n", j + 1, shapes.centroids[j]->first, shapes.centroids[j]->second);
        } else {
            std::printf("  style %zu  (no non-empty predictions)\n", j + 1);
        }
    }
    manifest.finish();
    return kExitOk;
}

// -- as2 -----------------------------------------------------------------------

int cmd_as2(const std::string& values) {
    std::vector<double> q;
    for (const auto& part : csv::split(values)) {
        const auto v = csv::parse_double(part);
        if (!v) throw UsageError("not a number: '" + part + "'");
        if (*v < 0) throw UsageError("negative value " + part);
        q.push_back(*v);
    }
    if (q.size() < 2) throw UsageError("as2 needs at least 2 values");
    double sum = 0;
    for (double v : q) sum += v;
    if (std::abs(sum - 1.0) > 1e-3) throw UsageError("values sum to " + csv::fmt(sum, 6) + ", not 1 (tolerance 1e-3)");
    for (double& v : q) v /= sum;
    std::printf("%.6f\n", as2(StyleAssignmentDistribution(q)));
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-style segmentation: synthetic corpora, training, evaluation"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "Write a synthetic multi-style corpus");
    generate->add_option("config", gen.config, "Synth config (.ini)")->required()->check(CLI::ExistingFile);
    generate->add_option("--out", gen.out, "Output directory (overrides synth.out)");
    generate->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train per a train config");
    train->add_option("config", tr.config, "Train config (.ini)")->required()->check(CLI::ExistingFile);
    train->add_flag("--resume", tr.resume, "Continue from the latest checkpoint in checkpoint_dir");
    train->add_flag("--force", tr.force, "Discard existing checkpoints in checkpoint_dir");

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint and write the CSV tables");
    eval->add_option("--checkpoint", ev.checkpoint, "Run dir, epoch dir or model.bin");
    eval->add_option("--corpus", ev.corpus, "Corpus root");
    eval->add_option("--out", ev.out, "Output directory")->required();
    eval->add_option("--threshold", ev.threshold, "Binarization threshold (foreground if >=)");
    eval->add_option("--split", ev.split, "train, val, test or all");
    eval->add_option("--group-by", ev.group_by, "preference, tool, annotator or planted_style");
    eval->add_option("--records", ev.records, "Existing records.csv (with --as2-only)");
    eval->add_flag("--as2-only", ev.as2_only, "Recompute assignment tables from --records, no model");
    eval->add_flag("--resize", ev.resize, "Resize corpus images to the model resolution");
    eval->add_flag("--force", ev.force, "Write into a non-empty output directory");

    std::string q;
    auto* as2cmd = app.add_subcommand("as2", "Print AS2 of a comma-separated assignment distribution");
    as2cmd->add_option("q", q, "e.g. 0.7,0.15,0.15")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    const auto cmdline = command_line(argc, argv);
    try {
        if (*generate) return cmd_generate(gen, cmdline);
        if (*train) return cmd_train(tr, cmdline);
        if (*eval) return cmd_eval(ev, cmdline);
        if (*as2cmd) return cmd_as2(q);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const TrainConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
