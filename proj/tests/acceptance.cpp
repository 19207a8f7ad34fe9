// Acceptance suite: prints one PASS/FAIL line per criterion.
//
//   acceptance --workdir DIR [--only N]... [--reuse] [--expect-fail N]...
//
// The exit status is non-zero when a criterion fails that was not listed with
// --expect-fail, or when a criterion could not be run at all.

#include <CLI11.hpp>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "styleseg/config.hpp"
#include "styleseg/data.hpp"
#include "styleseg/evaluation.hpp"
#include "styleseg/hashing.hpp"
#include "styleseg/losses.hpp"
#include "styleseg/metrics.hpp"
#include "styleseg/synthetic.hpp"
#include "styleseg/training.hpp"
#include "test_util.hpp"

using namespace styleseg;
namespace fs = std::filesystem;

namespace {

// ---- tolerances ----------------------------------------------------------------

constexpr double kAs2WorkedTol = 1e-3;
constexpr double kAs2TenStyleTol = 5e-3;
constexpr double kKappaTol = 1e-9;
constexpr double kShapeTol = 1e-9;
constexpr double kLossTol = 1e-6;
constexpr double kMhpEquivTol = 1e-12;
constexpr double kGradRelTol = 1e-3;
constexpr double kFiniteDiffStep = 1e-4;
constexpr double kOverfitFactor = 10.0;
constexpr int kOverfitSteps = 200;
constexpr double kIassMargin = 0.03;
constexpr double kAs2GroupMin = 0.5;
constexpr double kPlausibleMin = 0.5;
constexpr double kResumeTol = 1e-5;
constexpr double kEvalThreshold = 0.5;

constexpr int kMinMetricInstances = 20;

// ---- reporting -----------------------------------------------------------------

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& what) {
        if (!ok) pass = false;
        notes.push_back(std::string(ok ? "ok   " : "FAIL ") + what);
    }
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- shared artifacts ----------------------------------------------------------

fs::path source_path(const std::string& rel) { return fs::path(STYLESEG_SOURCE_DIR) / rel; }

struct TrainedRun {
    std::string name;
    fs::path dir;
    TrainConfig cfg;
    std::optional<Trainer> trainer;
    std::vector<EvalRecord> test_records;
    double wall_time = 0.0;
};

class Workspace {
public:
    Workspace(fs::path root, bool reuse) : root_(std::move(root)), reuse_(reuse) { fs::create_directories(root_); }

    const fs::path& root() const { return root_; }

    /// The desk corpus from configs/synth_desk.ini, generated under the workdir.
    const Corpus& desk_corpus() {
        if (!desk_) {
            auto cfg = load_synth_config(source_path("configs/synth_desk.ini"));
            const auto dir = root_ / "desk_corpus";
            if (!(reuse_ && fs::exists(dir / "manifest.csv"))) {
                fs::remove_all(dir);
                generate_synthetic_corpus(cfg.synth, dir);
            }
            desk_ = load_corpus(dir, {cfg.synth.resolution});
        }
        return *desk_;
    }

    /// The three desk-scale runs (styleseg, naive, mhp) from the train_desk presets.
    TrainedRun& desk_run(const std::string& mode) {
        if (auto it = runs_.find(mode); it != runs_.end()) return it->second;
        const std::string preset = mode == "styleseg" ? "configs/train_desk.ini" : "configs/train_desk_" + mode + ".ini";
        TrainedRun run;
        run.name = mode;
        run.cfg = load_train_config(source_path(preset));
        run.dir = root_ / ("desk_" + mode);
        run.cfg.checkpoint_dir = run.dir.string();
        const auto& corpus = desk_corpus();
        const auto train = corpus.split("train"), val = corpus.split("val");
        const bool complete = reuse_ && latest_epoch(run.dir) == run.cfg.epochs;
        const auto t0 = std::chrono::steady_clock::now();
        if (complete) {
            run.trainer.emplace(Trainer::load(resolve_checkpoint(run.dir)));
        } else {
            fs::remove_all(run.dir);
            std::cerr << "[acceptance] training " << mode << " (" << run.cfg.epochs << " epochs, "
                      << pair_count(train) << " pairs)\n";
            run_training(run.cfg, train, val, false, [&](const Trainer&, const EpochLog& e) {
                std::cerr << "[acceptance]   " << mode << " epoch " << e.epoch << " val_total " << fmt(e.val_total)
                          << "\n";
            });
            run.trainer.emplace(Trainer::load(resolve_checkpoint(run.dir)));
        }
        run.wall_time = seconds_since(t0);
        run.test_records = evaluate_corpus(run.trainer->segmenter(), corpus.split("test"), kEvalThreshold);
        return runs_.emplace(mode, std::move(run)).first->second;
    }

    std::vector<std::pair<std::string, fs::path>>& cli_checkpoints() { return cli_checkpoints_; }
    std::vector<std::pair<std::string, fs::path>>& cli_records() { return cli_records_; }

private:
    fs::path root_;
    bool reuse_;
    std::optional<Corpus> desk_;
    std::map<std::string, TrainedRun> runs_;
    std::vector<std::pair<std::string, fs::path>> cli_checkpoints_;  // (corpus root, run dir)
    std::vector<std::pair<std::string, fs::path>> cli_records_;      // (corpus root, eval dir)
};

// ---- helpers -------------------------------------------------------------------

SoftMaskStack<double> stack_of(const std::vector<BinaryGrid>& channels, std::vector<double> scale = {}) {
    SoftMaskStack<double> s(channels.front().height, channels.front().width, static_cast<int>(channels.size()));
    for (std::size_t j = 0; j < channels.size(); ++j) {
        const double k = scale.empty() ? 1.0 : scale[j];
        auto ch = s.channel(static_cast<int>(j));
        for (std::size_t i = 0; i < ch.size(); ++i) ch[i] = k * channels[j].values[i];
    }
    return s;
}

SoftMaskStack<double> random_stack(std::mt19937_64& rng, int h, int w, int m) {
    std::uniform_real_distribution<double> u(0.05, 0.95);
    SoftMaskStack<double> s(h, w, m);
    for (auto& v : s.values) v = u(rng);
    return s;
}

StyleProbabilities<double> random_probs(std::mt19937_64& rng, int m) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::vector<double> p(static_cast<std::size_t>(m));
    double total = 0;
    for (auto& v : p) total += (v = u(rng));
    for (auto& v : p) v /= total;
    return StyleProbabilities<double>(p);
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

/// Dice per (mask, style) by direct pixel counting on the thresholded stack.
std::vector<std::vector<double>> brute_force_scores(const AnnotatedSample& s, const SoftMaskStack<float>& preds,
                                                    double threshold) {
    std::vector<std::vector<double>> out;
    for (const auto& gt : s.masks) {
        std::vector<double> row;
        for (int j = 0; j < preds.styles; ++j) {
            long inter = 0, a = 0, b = 0;
            for (int y = 0; y < gt.grid.height; ++y) {
                for (int x = 0; x < gt.grid.width; ++x) {
                    const auto idx = (static_cast<std::size_t>(j) * preds.height + y) * preds.width + x;
                    const bool p = preds.values[idx] >= threshold;
                    const bool g = gt.grid(y, x) != 0;
                    inter += p && g;
                    a += p;
                    b += g;
                }
            }
            row.push_back(a + b == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(a + b));
        }
        out.push_back(row);
    }
    return out;
}

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(STYLESEG_CLI_PATH) + " " + args + " >>" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::vector<double>> read_runlog(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::vector<double> row;
        for (const auto& cell : csv::split(line)) row.push_back(csv::parse_double(cell).value_or(NAN));
        rows.push_back(row);
    }
    return rows;
}

// ---- criteria ------------------------------------------------------------------

Outcome criterion_1(Workspace&) {
    Outcome o;
    const double worked = as2(StyleAssignmentDistribution({0.70, 0.15, 0.15}));
    o.check(std::abs(worked - 0.255) <= kAs2WorkedTol, "as2(0.70,0.15,0.15) = " + fmt(worked, 6) + " (0.255 +- 1e-3)");
    std::vector<double> q(10, 0.0);
    q[0] = 0.9;
    q[1] = 0.1;
    const double ten = as2(StyleAssignmentDistribution(q));
    o.check(std::abs(ten - 0.859) <= kAs2TenStyleTol, "as2(0.9,0.1,0 x8) = " + fmt(ten, 6) + " (0.859 +- 5e-3)");
    for (int m : {2, 3, 5, 10}) {
        const double uniform = as2(StyleAssignmentDistribution(std::vector<double>(m, 1.0 / m)));
        std::vector<double> hot(m, 0.0);
        hot[static_cast<std::size_t>(m - 1)] = 1.0;
        const double onehot = as2(StyleAssignmentDistribution(hot));
        o.check(uniform == 0.0 && onehot == 1.0,
                "M=" + std::to_string(m) + " uniform " + fmt(uniform, 17) + ", one-hot " + fmt(onehot, 17));
    }
    return o;
}

Outcome criterion_2(Workspace&) {
    Outcome o;
    std::mt19937_64 rng(20240611);
    int dice_mismatch = 0, pairwise_mismatch = 0, n = 0;
    double kappa_err = 0.0;
    for (int t = 0; t < 4 * kMinMetricInstances; ++t) {
        const int h = 1 + static_cast<int>(rng() % 16), w = 1 + static_cast<int>(rng() % 16);
        const double density = 0.1 + 0.8 * static_cast<double>(rng() % 100) / 100.0;
        std::vector<BinaryGrid> masks;
        const int raters = 2 + static_cast<int>(rng() % 4);
        for (int r = 0; r < raters; ++r) masks.push_back(styleseg::testing::random_mask(rng, h, w, density));
        ++n;
        dice_mismatch += dice(masks[0], masks[1]) != oracle::dice(masks[0], masks[1]);
        pairwise_mismatch += pairwise_dice(masks) != oracle::pairwise_dice(masks);
        kappa_err = std::max(kappa_err, std::abs(fleiss_kappa(masks) - oracle::fleiss_kappa(masks)));
    }
    o.check(n >= kMinMetricInstances && dice_mismatch == 0,
            "hard Dice exact on " + std::to_string(n) + " random masks (" + std::to_string(dice_mismatch) + " mismatches)");
    o.check(pairwise_mismatch == 0, "pairwise Dice exact (" + std::to_string(pairwise_mismatch) + " mismatches)");
    o.check(kappa_err <= kKappaTol, "Fleiss kappa max error " + sci(kappa_err) + " (tol 1e-9)");

    int hull_n = 0, perim_n = 0;
    double hull_err = 0.0, perim_err = 0.0;
    for (int t = 0; t < 200 && (hull_n < 2 * kMinMetricInstances || perim_n < kMinMetricInstances); ++t) {
        const int size = 6 + static_cast<int>(rng() % 11);
        auto m = styleseg::testing::random_mask(rng, size, size, 0.08);
        m(size / 2, size / 2) = 1;
        const auto f = shape_features(m);
        hull_err = std::max(hull_err, std::abs(f.compactness * f.area - static_cast<double>(oracle::hull_pixel_count(m))));
        ++hull_n;

        std::uniform_real_distribution<double> c(size * 0.35, size * 0.65), r(1.5, size * 0.3);
        BinaryGrid blob(size, size);
        for (int d = 0; d < 2; ++d) {
            const auto extra = styleseg::testing::disc(size, c(rng), c(rng), r(rng));
            for (std::size_t i = 0; i < blob.values.size(); ++i) blob.values[i] |= extra.values[i];
        }
        const auto [labels, components] = detail::label_components(blob);
        if (components != 1 || !oracle::lattice_region_valid(blob)) continue;
        perim_err = std::max(perim_err, std::abs(shape_features(blob).perimeter - oracle::lattice_region_perimeter(blob)));
        ++perim_n;
    }
    o.check(hull_n >= kMinMetricInstances && hull_err <= kShapeTol,
            "hull area on " + std::to_string(hull_n) + " masks, max error " + sci(hull_err) + " (tol 1e-9)");
    o.check(perim_n >= kMinMetricInstances && perim_err <= kShapeTol,
            "contour perimeter on " + std::to_string(perim_n) + " blobs, max error " + sci(perim_err) + " (tol 1e-9)");
    return o;
}

Outcome criterion_3(Workspace&) {
    Outcome o;
    using styleseg::testing::rect;
    {
        const auto gt = rect(4, 4, 0, 0, 2, 2);
        const auto preds = stack_of({gt, BinaryGrid(4, 4)}, {0.5, 0.0});
        const auto out = total_loss(gt, preds, StyleProbabilities<double>({0.7, 0.3}), 0.0);
        const double l1 = 1.0 / 3.0, l2 = 1.0 - 2 * 0.35 / 1.35, l3 = -std::log(0.7);
        const bool ok = out.m_star == 0 && std::abs(out.l1 - l1) <= kLossTol && std::abs(out.l2 - l2) <= kLossTol &&
                        std::abs(out.l3 - l3) <= kLossTol && std::abs(out.total - (l1 + l2 + l3)) <= kLossTol;
        o.check(ok, "half-intensity instance: l1 " + fmt(out.l1, 6) + " l2 " + fmt(out.l2, 6) + " l3 " +
                        fmt(out.l3, 6) + " total " + fmt(out.total, 6));
    }
    {
        const auto gt = rect(4, 4, 0, 0, 2, 2);
        const auto preds = stack_of({BinaryGrid(4, 4), gt}, {1.0, 0.5});
        const StyleProbabilities<double> p({1.0 / 3.0, 2.0 / 3.0});
        const auto out = total_loss(gt, preds, p, 0.0);
        const double l2 = 1.0 - 2.0 * (2.0 / 3.0 * 0.5 * 4) / (2.0 / 3.0 * 0.5 * 4 + 4);
        const bool ok = out.m_star == 1 && std::abs(out.l1 - 1.0 / 3.0) <= kLossTol &&
                        std::abs(out.l2 - l2) <= kLossTol && std::abs(out.l3 + std::log(2.0 / 3.0)) <= kLossTol;
        o.check(ok, "second-style instance: m* " + std::to_string(out.m_star) + " l1 " + fmt(out.l1, 6) + " l2 " +
                        fmt(out.l2, 6) + " l3 " + fmt(out.l3, 6));
    }
    {
        const auto gt = rect(4, 4, 1, 1, 2, 2);
        const auto out = total_loss(gt, stack_of({BinaryGrid(4, 4), gt}), StyleProbabilities<double>({0.0, 1.0}), 0.0);
        o.check(std::abs(out.total) <= kLossTol, "exact prediction total " + sci(out.total));
        const double uniform = loss_l3(StyleProbabilities<double>({0.25, 0.25, 0.25, 0.25}), 2);
        o.check(std::abs(uniform - std::log(4.0)) <= kLossTol, "l3 uniform M=4 = log 4");
        const double blend = loss_l2(gt, stack_of({gt, BinaryGrid(4, 4)}), StyleProbabilities<double>({0.5, 0.5}), 0.0);
        o.check(std::abs(blend - 1.0 / 3.0) <= kLossTol, "l2 half blend = 1/3 (" + fmt(blend, 6) + ")");
    }
    std::mt19937_64 rng(90210);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const int h = 2 + static_cast<int>(rng() % 7), w = 2 + static_cast<int>(rng() % 7);
        const int m = 2 + static_cast<int>(rng() % 3);
        const auto gt = styleseg::testing::random_mask(rng, h, w, 0.4);
        const auto preds = random_stack(rng, h, w, m);
        const double smooth = (t % 2) ? 1.0 : 0.0;
        worst = std::max(worst, std::abs(mhp_loss(gt, preds, 0.0, smooth) - loss_l1(gt, preds, smooth)));
    }
    o.check(worst <= kMhpEquivTol, "mhp_loss(eps=0) vs loss_l1 on 100 instances, max diff " + sci(worst));
    return o;
}

using LossFn = std::function<double(const SoftMaskStack<double>&, const StyleProbabilities<double>&,
                                    LossGradient<double>*)>;

std::pair<double, double> gradient_error(const LossFn& f, const SoftMaskStack<double>& preds,
                                         const StyleProbabilities<double>& p) {
    const double h = kFiniteDiffStep;
    LossGradient<double> analytic(preds);
    f(preds, p, &analytic);
    std::vector<double> fd_preds(preds.values.size()), fd_probs(p.p.size());
    for (std::size_t i = 0; i < preds.values.size(); ++i) {
        auto plus = preds, minus = preds;
        plus.values[i] += h;
        minus.values[i] -= h;
        fd_preds[i] = (f(plus, p, nullptr) - f(minus, p, nullptr)) / (2 * h);
    }
    for (std::size_t j = 0; j < p.p.size(); ++j) {
        auto plus = p.p, minus = p.p;
        plus[j] += h;
        minus[j] -= h;
        fd_probs[j] = (f(preds, StyleProbabilities<double>::unchecked(plus), nullptr) -
                       f(preds, StyleProbabilities<double>::unchecked(minus), nullptr)) /
                      (2 * h);
    }
    return {relative_error(analytic.preds, fd_preds), relative_error(analytic.probs, fd_probs)};
}

Outcome criterion_4(Workspace&) {
    Outcome o;
    std::mt19937_64 rng(4242);
    double l1_err = 0, l2_err = 0, l2p_err = 0, l3_err = 0;
    constexpr int instances = 20;
    for (int t = 0; t < instances; ++t) {
        const auto gt = styleseg::testing::random_mask(rng, 8, 8, 0.4);
        const auto preds = random_stack(rng, 8, 8, 3);
        const auto p = random_probs(rng, 3);
        const int m = best_style_index(gt, preds, 1.0);
        l1_err = std::max(l1_err, gradient_error([&](const auto& s, const auto&, auto* g) {
                              return loss_l1(gt, s, m, 1.0, g);
                          }, preds, p).first);
        const auto l2 = gradient_error([&](const auto& s, const auto& q, auto* g) { return loss_l2(gt, s, q, 1.0, g); },
                                       preds, p);
        l2_err = std::max(l2_err, l2.first);
        l2p_err = std::max(l2p_err, l2.second);
        l3_err = std::max(l3_err, gradient_error([&](const auto&, const auto& q, auto* g) {
                              return loss_l3(q, m, g);
                          }, preds, p).second);
    }
    const std::string suffix = " over " + std::to_string(instances) + " 8x8 M=3 instances (tol 1e-3)";
    o.check(l1_err < kGradRelTol, "l1 d/dpreds rel error " + sci(l1_err) + suffix);
    o.check(l2_err < kGradRelTol, "l2 d/dpreds rel error " + sci(l2_err) + suffix);
    o.check(l2p_err < kGradRelTol, "l2 d/dp rel error " + sci(l2p_err) + suffix);
    o.check(l3_err < kGradRelTol, "l3 d/dp rel error " + sci(l3_err) + suffix);
    return o;
}

Outcome criterion_5(Workspace&) {
    Outcome o;
    auto cfg = load_train_config(source_path("configs/train_desk.ini"));
    const int res = cfg.resolution;
    const auto base = generate_base_shape(mix_seed(5, 0), res);
    AnnotatedSample sample;
    sample.image = render_lesion_image(base, mix_seed(5, 1), 0.05, "overfit");
    sample.split = "train";
    for (int margin : {4, -4}) {
        StyleParams st;
        st.margin = margin;
        sample.masks.push_back(render_style(base, st));
    }
    const std::vector<AnnotatedSample> data{sample};
    Trainer t(cfg);
    auto total = [&] { return t.evaluate_pair(sample, 0).total + t.evaluate_pair(sample, 1).total; };
    const double initial = total();
    const std::vector<PairRef> batch{{0, 0}, {0, 1}};
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < kOverfitSteps; ++i) t.step(data, batch);
    const double final_total = total();
    const double secs = seconds_since(t0);
    o.check(final_total * kOverfitFactor <= initial, "train_total " + fmt(initial) + " -> " + fmt(final_total) + " (" +
                                                         fmt(initial / std::max(final_total, 1e-12), 1) + "x) in " +
                                                         std::to_string(kOverfitSteps) + " steps");
    o.check(secs < 120.0, "runtime " + fmt(secs, 1) + " s (< 120 s)");
    return o;
}

Outcome criterion_6(Workspace& ws) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    auto& sty = ws.desk_run("styleseg");
    auto& naive = ws.desk_run("naive");
    auto& mhp = ws.desk_run("mhp");
    const auto s_sty = style_statistics(sty.test_records);
    const auto s_naive = style_statistics(naive.test_records);
    const auto s_mhp = style_statistics(mhp.test_records);

    o.check(s_sty.max.mean - s_naive.max.mean >= kIassMargin,
            "(a) Dice_IASS " + fmt(s_sty.max.mean) + " vs naive Dice " + fmt(s_naive.max.mean) + ", margin " +
                fmt(s_sty.max.mean - s_naive.max.mean) + " (>= 0.03)");

    const auto table = group_style_assignment(sty.test_records, GroupKey::planted_style);
    bool as2_ok = !table.rows.empty();
    std::string groups;
    for (const auto& [group, a] : table.rows) {
        as2_ok = as2_ok && a.as2 >= kAs2GroupMin;
        groups += " " + group + ":style" + std::to_string(a.modal_style + 1) + "/AS2=" + fmt(a.as2, 3);
    }
    o.check(table.modal_styles_distinct && as2_ok,
            std::string("(b) planted groups") + groups + (table.modal_styles_distinct ? ", distinct" : ", NOT distinct"));

    o.check(s_sty.min.mean >= kPlausibleMin, "(c) StyleSeg min_j Dice " + fmt(s_sty.min.mean) + " (>= 0.5)");
    o.check(s_sty.min.mean >= s_mhp.min.mean,
            "(d) StyleSeg min_j Dice " + fmt(s_sty.min.mean) + " vs MHP min_j Dice " + fmt(s_mhp.min.mean) +
                " (diff " + fmt(s_sty.min.mean - s_mhp.min.mean) + ", MHP IASS " + fmt(s_mhp.max.mean) + ")");
    const double secs = seconds_since(t0);
    o.check(secs < 15 * 60.0, "runtime " + fmt(secs, 0) + " s (< 900 s)");
    return o;
}

Outcome criterion_8(Workspace& ws) {
    Outcome o;
    const auto dir = ws.root() / "cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto log = dir / "cli.log";
    auto write = [](const fs::path& p, const std::string& text) { std::ofstream(p) << text; };

    write(dir / "synth.ini",
          "[synth]\nseed = 12\nn_images = 30\nresolution = 32\n"
          "[style.1]\nlabel = loose\nmargin = 3\n[style.2]\nlabel = tight\nmargin = -3\njaggedness_amplitude = 1\n");
    const int g1 = run_cli("generate " + (dir / "synth.ini").string() + " --out " + (dir / "corpus_a").string(), log);
    const int g2 = run_cli("generate " + (dir / "synth.ini").string() + " --out " + (dir / "corpus_b").string(), log);
    const std::vector<std::string> skip{"run_manifest.json"};
    const bool same_corpus = g1 == 0 && g2 == 0 &&
                             sha256_tree(dir / "corpus_a", skip) == sha256_tree(dir / "corpus_b", skip);
    o.check(same_corpus, "generate twice: identical corpus trees (" + sha256_tree(dir / "corpus_a", skip).substr(0, 12) + ")");

    auto train_ini = [&](const std::string& name, int epochs) {
        const auto p = dir / (name + ".ini");
        write(p, "[train]\ncorpus = corpus_a\ncheckpoint_dir = " + name + "\nM = 2\nepochs = " + std::to_string(epochs) +
                     "\nbatch_size = 4\nlearning_rate = 0.003\nseed = 8\nresolution = 32\n"
                     "[model]\nseg_base_width = 4\nseg_stages = 3\nseg_convs_per_stage = 1\nseg_max_width = 8\n"
                     "cls_base_width = 4\ncls_stages = 3\ncls_max_width = 8\n");
        return p;
    };
    const int t1 = run_cli("train " + train_ini("run_a", 4).string(), log);
    const int t2 = run_cli("train " + train_ini("run_b", 4).string(), log);
    bool identical = t1 == 0 && t2 == 0 &&
                     sha256_file(dir / "run_a" / "runlog.csv") == sha256_file(dir / "run_b" / "runlog.csv");
    for (int e = 1; identical && e <= 4; ++e) {
        identical = sha256_file(epoch_dir(dir / "run_a", e) / "model.bin") ==
                    sha256_file(epoch_dir(dir / "run_b", e) / "model.bin");
    }
    o.check(identical, "train twice: byte-identical runlog.csv and model.bin for all 4 epochs");

    const int r1 = run_cli("train " + train_ini("run_c", 2).string(), log);
    const int r2 = run_cli("train " + train_ini("run_c", 4).string() + " --resume", log);
    const auto straight = read_runlog(dir / "run_a" / "runlog.csv");
    const auto resumed = read_runlog(dir / "run_c" / "runlog.csv");
    double log_diff = r1 == 0 && r2 == 0 && straight.size() == resumed.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; std::isfinite(log_diff) && i < straight.size(); ++i) {
        for (std::size_t j = 0; j < straight[i].size(); ++j) {
            log_diff = std::max(log_diff, std::abs(straight[i][j] - resumed[i][j]));
        }
    }
    double param_diff = INFINITY;
    if (std::isfinite(log_diff)) {
        auto a = Trainer::load(epoch_dir(dir / "run_a", 4));
        auto c = Trainer::load(epoch_dir(dir / "run_c", 4));
        const auto pa = a.parameters(), pc = c.parameters();
        param_diff = pa.size() == pc.size() ? 0.0 : INFINITY;
        for (std::size_t i = 0; std::isfinite(param_diff) && i < pa.size(); ++i) {
            for (std::size_t k = 0; k < pa[i]->value.size(); ++k) {
                param_diff = std::max(param_diff, static_cast<double>(std::abs(pa[i]->value[k] - pc[i]->value[k])));
            }
        }
    }
    o.check(log_diff <= kResumeTol && param_diff <= kResumeTol,
            "resume 2->4 epochs vs straight 4: runlog max diff " + sci(log_diff) + ", parameter max diff " +
                sci(param_diff) + " (tol 1e-5)");

    const int ev = run_cli("eval --checkpoint " + (dir / "run_a").string() + " --corpus " + (dir / "corpus_a").string() +
                               " --split all --out " + (dir / "eval_a").string(),
                           log);
    if (ev == 0) ws.cli_records().emplace_back((dir / "corpus_a").string(), dir / "eval_a");
    ws.cli_checkpoints().emplace_back((dir / "corpus_a").string(), dir / "run_a");
    ws.cli_checkpoints().emplace_back((dir / "corpus_a").string(), dir / "run_c");
    o.check(ev == 0, "eval of the CLI run exits 0");
    return o;
}

void check_records(Outcome& o, const std::string& label, const std::vector<EvalRecord>& records,
                   const std::vector<AnnotatedSample>& samples, const SegmentationModel<float>& model) {
    bool asss_ok = true;
    for (const auto& r : preference_reports(records)) asss_ok = asss_ok && r.asss.mean <= r.iass.mean;
    o.check(asss_ok, label + ": Dice_ASSS <= Dice_IASS in every preference group");

    bool order_ok = true;
    for (const auto& r : records) {
        const double mx = *std::max_element(r.dice.begin(), r.dice.end());
        const double mn = *std::min_element(r.dice.begin(), r.dice.end());
        const double md = median_of(r.dice);
        order_ok = order_ok && mn <= md && md <= mx;
    }
    o.check(order_ok, label + ": min <= median <= max on all " + std::to_string(records.size()) + " records");

    std::map<std::pair<std::string, int>, const EvalRecord*> by_key;
    for (const auto& r : records) by_key[{r.image_id, r.k}] = &r;
    std::size_t compared = 0, mismatched = 0;
    for (const auto& s : samples) {
        const auto scores = brute_force_scores(s, model.forward(s.image), kEvalThreshold);
        for (std::size_t k = 0; k < scores.size(); ++k) {
            const auto it = by_key.find({s.image.id, static_cast<int>(k)});
            ++compared;
            if (it == by_key.end() || it->second->dice != scores[k]) ++mismatched;
        }
    }
    o.check(mismatched == 0 && compared == records.size(),
            label + ": records equal the brute-force scorer exactly (" + std::to_string(compared) + " pairs, " +
                std::to_string(mismatched) + " mismatches)");
}

Outcome criterion_7(Workspace& ws) {
    Outcome o;
    if (ws.cli_checkpoints().empty()) criterion_8(ws);
    for (const std::string mode : {"styleseg", "naive", "mhp"}) {
        auto& run = ws.desk_run(mode);
        check_records(o, "desk " + mode, run.test_records, ws.desk_corpus().split("test"), run.trainer->segmenter());
    }
    for (const auto& [corpus_root, run_dir] : ws.cli_checkpoints()) {
        const auto trainer = Trainer::load(resolve_checkpoint(run_dir));
        const auto corpus = load_corpus(corpus_root, {trainer.config().resolution});
        const auto records = evaluate_corpus(trainer.segmenter(), corpus.samples, kEvalThreshold);
        check_records(o, "cli " + run_dir.filename().string(), records, corpus.samples, trainer.segmenter());
    }
    for (const auto& [corpus_root, eval_dir] : ws.cli_records()) {
        const auto manifest = nlohmann::json::parse(std::ifstream(eval_dir / "run_manifest.json"));
        const auto trainer = Trainer::load(manifest.at("checkpoint").get<std::string>());
        const auto corpus = load_corpus(corpus_root, {trainer.config().resolution});
        check_records(o, "records.csv from eval", read_records_csv(eval_dir / "records.csv"), corpus.samples,
                      trainer.segmenter());
    }
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string workdir = (fs::temp_directory_path() / "styleseg_acceptance").string();
    std::vector<int> only, expect_fail;
    bool reuse = false;
    app.add_option("--workdir", workdir, "Scratch directory for corpora and runs");
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
    app.add_option("--expect-fail", expect_fail, "Criteria known to fail; they do not affect the exit status")
        ->check(CLI::Range(1, 8));
    app.add_flag("--reuse", reuse, "Reuse complete corpora and runs found in --workdir");
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<Outcome(Workspace&)>>> criteria{
        {"AS2 worked values", criterion_1},
        {"metric oracles", criterion_2},
        {"loss algebra", criterion_3},
        {"gradient checks", criterion_4},
        {"overfit sanity", criterion_5},
        {"style discovery end-to-end", criterion_6},
        {"evaluation invariants", criterion_7},
        {"determinism", criterion_8},
    };
    const std::set<int> selected(only.begin(), only.end());
    const std::set<int> expected(expect_fail.begin(), expect_fail.end());

    Workspace ws(workdir, reuse);
    const std::array<int, 8> order{1, 2, 3, 4, 5, 6, 8, 7};
    std::map<int, std::optional<Outcome>> results;
    std::map<int, double> runtimes;
    int unexpected = 0;
    for (int id : order) {
        if (!selected.empty() && !selected.contains(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            results[id] = criteria[static_cast<std::size_t>(id - 1)].second(ws);
        } catch (const std::exception& e) {
            Outcome broken;
            broken.check(false, std::string("error: ") + e.what());
            results[id] = broken;
        }
        runtimes[id] = seconds_since(t0);
    }

    for (const auto& [id, result] : results) {
        const bool pass = result->pass;
        std::string tag = pass ? "PASS" : "FAIL";
        if (!pass && !expected.contains(id)) ++unexpected;
        if (!pass && expected.contains(id)) tag = "FAIL (expected)";
        std::printf("criterion %d: %s  %s  [%.1f s]\n", id, tag.c_str(), criteria[static_cast<std::size_t>(id - 1)].first.c_str(),
                    runtimes[id]);
        for (const auto& note : result->notes) std::printf("    %s\n", note.c_str());
    }
    std::fflush(stdout);
    return unexpected == 0 ? 0 : 1;
}
