#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "csv.hpp"
#include "diagnostics.hpp"
#include "grid.hpp"
#include "hashing.hpp"
#include "losses.hpp"
#include "models.hpp"
#include "synthetic.hpp"

/**
 * @file training.hpp
 * @brief Joint optimisation of the segmenter and style classifier, the MHP and
 * naive baselines, per-epoch checkpoints and exact resume.
 */

namespace styleseg {

class TrainConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class TrainMode { styleseg, mhp, naive };

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::styleseg: return "styleseg";
        case TrainMode::mhp: return "mhp";
        case TrainMode::naive: return "naive";
    }
    return "?";
}

inline std::optional<TrainMode> parse_mode(const std::string& s) {
    if (s == "styleseg") return TrainMode::styleseg;
    if (s == "mhp") return TrainMode::mhp;
    if (s == "naive") return TrainMode::naive;
    return std::nullopt;
}

inline std::string to_string(SelectionMode m) { return m == SelectionMode::soft ? "soft" : "hard"; }

struct TrainConfig {
    TrainMode mode = TrainMode::styleseg;
    int styles = 2;
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    double smooth = 1.0;
    double mhp_eps = 0.05;
    LossWeights<double> weights;
    SelectionMode selection = SelectionMode::soft;
    int resolution = 64;
    std::string corpus;
    std::string checkpoint_dir;
    SegModelConfig seg;
    ClsModelConfig cls;

    /// Copies the shared fields (styles, resolution) into the model configs.
    void sync_models() {
        seg.styles = styles;
        seg.resolution = resolution;
        cls.styles = std::max(styles, 2);
        cls.resolution = resolution;
    }

    void validate() const {
        if (epochs < 1) throw TrainConfigError("train.epochs must be >= 1");
        if (batch_size < 1) throw TrainConfigError("train.batch_size must be >= 1");
        if (!(learning_rate > 0)) throw TrainConfigError("train.learning_rate must be > 0");
        if (!(smooth >= 0)) throw TrainConfigError("train.smooth must be >= 0");
        if (mode == TrainMode::naive && styles != 1) throw TrainConfigError("train.M must be 1 when mode=naive");
        if (mode != TrainMode::naive && styles < 2) {
            throw TrainConfigError("train.M must be >= 2 when mode=" + to_string(mode));
        }
        if (mode == TrainMode::mhp && !(mhp_eps >= 0 && mhp_eps < 1)) {
            throw TrainConfigError("train.mhp_eps must lie in [0,1)");
        }
        if (weights.l1 < 0 || weights.l2 < 0 || weights.l3 < 0) throw TrainConfigError("train.w1/w2/w3 must be >= 0");
        try {
            seg.validate();
            if (mode == TrainMode::styleseg) cls.validate();
        } catch (const ModelConfigError& e) {
            throw TrainConfigError(std::string("model: ") + e.what());
        }
        if (seg.styles != styles || seg.resolution != resolution || cls.resolution != resolution) {
            throw TrainConfigError("model configs are out of sync with train.M / train.resolution");
        }
    }

    [[nodiscard]] bool uses_classifier() const { return mode == TrainMode::styleseg; }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {
        {"mode", to_string(c.mode)},
        {"M", c.styles},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"seed", c.seed},
        {"smooth", c.smooth},
        {"mhp_eps", c.mhp_eps},
        {"w1", c.weights.l1},
        {"w2", c.weights.l2},
        {"w3", c.weights.l3},
        {"selection", to_string(c.selection)},
        {"resolution", c.resolution},
        {"optimizer", "adam(beta1=0.9,beta2=0.999,eps=1e-8)"},
        {"fusion_resize", "bilinear"},
        {"seg",
         {{"base_width", c.seg.base_width},
          {"n_stages", c.seg.n_stages},
          {"convs_per_stage", c.seg.convs_per_stage},
          {"max_width", c.seg.max_width}}},
        {"cls", {{"base_width", c.cls.base_width}, {"n_stages", c.cls.n_stages}, {"max_width", c.cls.max_width}}},
    };
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    const auto mode = parse_mode(j.at("mode").get<std::string>());
    if (!mode) throw CheckpointError("checkpoint: unknown mode");
    c.mode = *mode;
    c.styles = j.at("M").get<int>();
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.smooth = j.at("smooth").get<double>();
    c.mhp_eps = j.at("mhp_eps").get<double>();
    c.weights = {j.at("w1").get<double>(), j.at("w2").get<double>(), j.at("w3").get<double>()};
    c.selection = j.at("selection").get<std::string>() == "hard" ? SelectionMode::hard : SelectionMode::soft;
    c.resolution = j.at("resolution").get<int>();
    c.seg.base_width = j.at("seg").at("base_width").get<int>();
    c.seg.n_stages = j.at("seg").at("n_stages").get<int>();
    c.seg.convs_per_stage = j.at("seg").at("convs_per_stage").get<int>();
    c.seg.max_width = j.at("seg").at("max_width").get<int>();
    c.cls.base_width = j.at("cls").at("base_width").get<int>();
    c.cls.n_stages = j.at("cls").at("n_stages").get<int>();
    c.cls.max_width = j.at("cls").at("max_width").get<int>();
    c.sync_models();
    return c;
}

struct EpochLog {
    int epoch = 0;  // 1-based
    double l1 = 0;
    double l2 = 0;
    double l3 = 0;
    double total = 0;
    double val_total = 0;
    double val_entropy = 0;  // mean entropy (nats) of p over validation pairs; 0 without a classifier

    friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct RunLog {
    std::vector<EpochLog> epochs;
    int best_epoch = 0;
    double wall_time = 0;  // seconds spent in train() calls, not persisted

    /// argmin of val_total; the earliest epoch wins ties.
    [[nodiscard]] int compute_best_epoch() const {
        int best = 0;
        double best_value = std::numeric_limits<double>::infinity();
        for (const auto& e : epochs) {
            if (e.val_total < best_value) {
                best_value = e.val_total;
                best = e.epoch;
            }
        }
        return best;
    }

    [[nodiscard]] const EpochLog* find(int epoch) const {
        for (const auto& e : epochs) {
            if (e.epoch == epoch) return &e;
        }
        return nullptr;
    }
};

inline constexpr const char* kRunlogHeader = "epoch,l1,l2,l3,total,val_total";

inline std::string runlog_csv(const RunLog& log) {
    std::string out = std::string(kRunlogHeader) + "\n";
    for (const auto& e : log.epochs) {
        out += std::to_string(e.epoch) + "," + csv::exact(e.l1) + "," + csv::exact(e.l2) + "," + csv::exact(e.l3) +
               "," + csv::exact(e.total) + "," + csv::exact(e.val_total) + "\n";
    }
    return out;
}

inline nlohmann::json to_json(const EpochLog& e) {
    return {{"epoch", e.epoch}, {"l1", e.l1},           {"l2", e.l2},
            {"l3", e.l3},       {"total", e.total},     {"val_total", e.val_total},
            {"val_entropy", e.val_entropy}};
}

inline EpochLog epoch_log_from_json(const nlohmann::json& j) {
    return {j.at("epoch").get<int>(),     j.at("l1").get<double>(),        j.at("l2").get<double>(),
            j.at("l3").get<double>(),     j.at("total").get<double>(),     j.at("val_total").get<double>(),
            j.at("val_entropy").get<double>()};
}

/// One (image, ground-truth mask) training unit.
struct PairRef {
    std::size_t sample = 0;
    std::size_t mask = 0;
};

inline std::vector<PairRef> enumerate_pairs(const std::vector<AnnotatedSample>& samples) {
    std::vector<PairRef> pairs;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        for (std::size_t k = 0; k < samples[i].masks.size(); ++k) pairs.push_back({i, k});
    }
    return pairs;
}

/// Pair order for one epoch: a Fisher-Yates shuffle seeded by (seed, epoch) only.
inline std::vector<PairRef> epoch_order(std::vector<PairRef> pairs, std::uint64_t seed, int epoch) {
    std::mt19937_64 rng(mix_seed(seed, 0xe90c0000ULL + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = pairs.size(); i > 1; --i) {
        std::swap(pairs[i - 1], pairs[rng() % i]);
    }
    return pairs;
}

inline double entropy_nats(std::span<const float> p) {
    double h = 0;
    for (float v : p) {
        if (v > 0) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
    }
    return h;
}

/// Per-pair loss values in double for logging.
struct PairLoss {
    double l1 = 0;
    double l2 = 0;
    double l3 = 0;
    double total = 0;
    double entropy = 0;
};

/**
 * Owns the two networks and the optimiser for one run. All arithmetic is
 * single-threaded and in a fixed order, so a run is a pure function of its
 * config and data.
 */
class Trainer {
public:
    using Seg = SegmentationModel<float>;
    using Cls = StyleClassifier<float>;

    explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.sync_models();
        cfg_.validate();
        seg_ = Seg(cfg_.seg, mix_seed(cfg_.seed, 0x5e6));
        if (cfg_.uses_classifier()) cls_ = Cls(cfg_.cls, mix_seed(cfg_.seed, 0xc15));
        rebuild_optimizer();
    }

    Trainer(const Trainer& other)
        : cfg_(other.cfg_), seg_(other.seg_), cls_(other.cls_), opt_(other.opt_), log_(other.log_), epoch_(other.epoch_) {
        opt_.rebind(parameters());
    }
    Trainer(Trainer&& other) noexcept
        : cfg_(std::move(other.cfg_)), seg_(std::move(other.seg_)), cls_(std::move(other.cls_)),
          opt_(std::move(other.opt_)), log_(std::move(other.log_)), epoch_(other.epoch_) {
        opt_.rebind(parameters());
    }
    Trainer& operator=(Trainer other) noexcept {
        cfg_ = std::move(other.cfg_);
        seg_ = std::move(other.seg_);
        cls_ = std::move(other.cls_);
        opt_ = std::move(other.opt_);
        log_ = std::move(other.log_);
        epoch_ = other.epoch_;
        opt_.rebind(parameters());
        return *this;
    }
    ~Trainer() = default;

    [[nodiscard]] const TrainConfig& config() const { return cfg_; }
    [[nodiscard]] const Seg& segmenter() const { return seg_; }
    [[nodiscard]] const std::optional<Cls>& classifier() const { return cls_; }
    [[nodiscard]] const RunLog& log() const { return log_; }
    [[nodiscard]] int epoch() const { return epoch_; }
    [[nodiscard]] std::uint64_t steps() const { return opt_.steps(); }

    std::vector<nn::Parameter<float>*> parameters() {
        auto params = seg_.parameters();
        if (cls_) {
            auto more = cls_->parameters();
            params.insert(params.end(), more.begin(), more.end());
        }
        return params;
    }

    /// Digest of every parameter value.
    [[nodiscard]] std::string parameter_hash() const {
        Sha256 h;
        for (auto* p : const_cast<Trainer*>(this)->parameters()) {
            h.update(std::string_view(reinterpret_cast<const char*>(p->value.data()), p->value.size() * sizeof(float)));
        }
        return h.hex();
    }

    /// Forward + loss + backward for one pair; gradients are scaled by `scale`.
    PairLoss accumulate_pair(const AnnotatedSample& sample, std::size_t mask_index, float scale) {
        const auto& gt = sample.masks.at(mask_index).grid;
        Seg::Cache sc;
        const auto preds = seg_.forward(image_tensor<float>(sample.image), sc);
        LossGradient<float> g(preds);
        PairLoss out;
        const float smooth = static_cast<float>(cfg_.smooth);
        switch (cfg_.mode) {
            case TrainMode::styleseg: {
                Cls::Cache cc;
                const auto p = cls_->forward(Cls::input_tensor(sample.image, gt), cc);
                const LossWeights<float> w{static_cast<float>(cfg_.weights.l1) * scale,
                                           static_cast<float>(cfg_.weights.l2) * scale,
                                           static_cast<float>(cfg_.weights.l3) * scale};
                const auto b = total_loss(gt, preds, p, smooth, &g, w, cfg_.selection);
                out = {b.l1, b.l2, b.l3, cfg_.weights.l1 * b.l1 + cfg_.weights.l2 * b.l2 + cfg_.weights.l3 * b.l3,
                       entropy_nats(p.p)};
                seg_.backward(sc, g.preds);
                cls_->backward(cc, g.probs);
                return out;
            }
            case TrainMode::mhp: {
                const int m = best_style_index(gt, preds, smooth, cfg_.selection);
                out.l1 = loss_l1(gt, preds, m, smooth);
                out.total = mhp_loss(gt, preds, static_cast<float>(cfg_.mhp_eps), smooth, &g, scale, cfg_.selection);
                break;
            }
            case TrainMode::naive: {
                out.l1 = out.total = naive_loss(gt, preds, smooth, &g, scale);
                break;
            }
        }
        seg_.backward(sc, g.preds);
        return out;
    }

    /// Inference-mode loss of one pair (no gradient, no mutation).
    [[nodiscard]] PairLoss evaluate_pair(const AnnotatedSample& sample, std::size_t mask_index) const {
        const auto& gt = sample.masks.at(mask_index).grid;
        const auto preds = seg_.forward(sample.image);
        const float smooth = static_cast<float>(cfg_.smooth);
        PairLoss out;
        switch (cfg_.mode) {
            case TrainMode::styleseg: {
                const auto p = cls_->forward(sample.image, gt);
                const auto b = total_loss<float>(gt, preds, p, smooth, nullptr, {}, cfg_.selection);
                out = {b.l1, b.l2, b.l3, cfg_.weights.l1 * b.l1 + cfg_.weights.l2 * b.l2 + cfg_.weights.l3 * b.l3,
                       entropy_nats(p.p)};
                break;
            }
            case TrainMode::mhp: {
                const int m = best_style_index(gt, preds, smooth, cfg_.selection);
                out.l1 = loss_l1(gt, preds, m, smooth);
                out.total = mhp_loss(gt, preds, static_cast<float>(cfg_.mhp_eps), smooth, static_cast<LossGradient<float>*>(nullptr), 1.0f, cfg_.selection);
                break;
            }
            case TrainMode::naive: out.l1 = out.total = naive_loss<float>(gt, preds, smooth); break;
        }
        return out;
    }

    /// Mean inference-mode loss and p-entropy over every pair of `samples`.
    [[nodiscard]] std::pair<double, double> validate(const std::vector<AnnotatedSample>& samples) const {
        double total = 0, entropy = 0;
        std::size_t n = 0;
        for (const auto& s : samples) {
            for (std::size_t k = 0; k < s.masks.size(); ++k) {
                const auto l = evaluate_pair(s, k);
                total += l.total;
                entropy += l.entropy;
                ++n;
            }
        }
        if (n == 0) return {0.0, 0.0};
        return {total / static_cast<double>(n), entropy / static_cast<double>(n)};
    }

    /// One optimiser step over a batch of pairs (gradient = batch mean).
    PairLoss step(const std::vector<AnnotatedSample>& samples, std::span<const PairRef> batch,
                  const std::string& where = "batch") {
        opt_.zero_grad();
        PairLoss sum;
        const float scale = 1.0f / static_cast<float>(batch.size());
        for (const auto& pr : batch) {
            const auto l = accumulate_pair(samples[pr.sample], pr.mask, scale);
            const std::string pair = " (image " + samples[pr.sample].image.id + ", mask " + std::to_string(pr.mask) + ")";
            if (!std::isfinite(l.total)) throw TrainingError("non-finite loss in " + where + pair);
            for (auto* p : parameters()) {
                for (float g : p->grad) {
                    if (!std::isfinite(g)) throw TrainingError("non-finite gradient in " + where + pair + " at " + p->name);
                }
            }
            sum.l1 += l.l1;
            sum.l2 += l.l2;
            sum.l3 += l.l3;
            sum.total += l.total;
        }
        opt_.step();
        return sum;
    }

    using EpochCallback = std::function<void(const Trainer&, const EpochLog&)>;

    /**
     * Trains until `cfg.epochs` epochs have completed in total, starting after
     * the current epoch counter (so a restored trainer continues seamlessly).
     */
    const RunLog& train(const std::vector<AnnotatedSample>& train_set, const std::vector<AnnotatedSample>& val_set,
                        const EpochCallback& on_epoch = {}) {
        if (train_set.empty()) throw TrainConfigError("training split is empty");
        if (val_set.empty()) throw TrainConfigError("validation split is empty");
        for (const auto* set : {&train_set, &val_set}) {
            for (const auto& s : *set) {
                if (s.image.height != cfg_.resolution || s.image.width != cfg_.resolution) {
                    throw DimensionError("sample " + s.image.id + " is " + std::to_string(s.image.height) + "x" +
                                         std::to_string(s.image.width) + ", model resolution is " +
                                         std::to_string(cfg_.resolution));
                }
            }
        }
        const auto start = std::chrono::steady_clock::now();
        const auto pairs = enumerate_pairs(train_set);
        const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
        while (epoch_ < cfg_.epochs) {
            const int e = epoch_ + 1;
            const auto order = epoch_order(pairs, cfg_.seed, e);
            PairLoss sum;
            for (std::size_t b = 0; b < order.size(); b += bs) {
                const auto batch = std::span<const PairRef>(order).subspan(b, std::min(bs, order.size() - b));
                const auto l = step(train_set, batch,
                                    "epoch " + std::to_string(e) + " batch " + std::to_string(b / bs + 1));
                sum.l1 += l.l1;
                sum.l2 += l.l2;
                sum.l3 += l.l3;
                sum.total += l.total;
            }
            const double n = static_cast<double>(order.size());
            EpochLog entry{e, sum.l1 / n, sum.l2 / n, sum.l3 / n, sum.total / n, 0.0, 0.0};
            std::tie(entry.val_total, entry.val_entropy) = validate(val_set);
            epoch_ = e;
            log_.epochs.push_back(entry);
            log_.best_epoch = log_.compute_best_epoch();
            if (on_epoch) on_epoch(*this, entry);
        }
        log_.wall_time += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        return log_;
    }

    // -- checkpointing --------------------------------------------------------

    static constexpr char kMagic[8] = {'S', 'T', 'Y', 'S', 'E', 'G', 'C', 'K'};
    static constexpr std::uint32_t kFormatVersion = 1;

    [[nodiscard]] nlohmann::json metadata() const {
        nlohmann::json history = nlohmann::json::array();
        for (const auto& e : log_.epochs) history.push_back(to_json(e));
        const auto* current = log_.find(epoch_);
        return {{"format", "styleseg-checkpoint"},
                {"format_version", kFormatVersion},
                {"config", to_json(cfg_)},
                {"epoch", epoch_},
                {"optimizer_steps", opt_.steps()},
                {"val_total", current ? nlohmann::json(current->val_total) : nlohmann::json(nullptr)},
                {"best_epoch", log_.best_epoch},
                {"history", history},
                {"data_order", "single-threaded"},
                {"parameters", {{"segmenter", seg_.parameter_count()},
                                {"classifier", cls_ ? cls_->parameter_count() : 0}}}};
    }

    /// Writes model.bin (config echo, parameters, optimiser state) and checkpoint.json into dir.
    void save(const std::filesystem::path& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        const std::string header = metadata().dump();
        std::string blob(kMagic, sizeof kMagic);
        auto put_u64 = [&blob](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) blob.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
        };
        auto put_floats = [&](const std::vector<float>& v) {
            put_u64(v.size());
            for (float f : v) {
                std::uint32_t bits = 0;
                std::memcpy(&bits, &f, sizeof bits);
                for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
            }
        };
        put_u64(kFormatVersion);
        put_u64(header.size());
        blob += header;
        auto* self = const_cast<Trainer*>(this);
        const auto params = self->parameters();
        put_u64(params.size());
        for (std::size_t k = 0; k < params.size(); ++k) {
            put_u64(params[k]->name.size());
            blob += params[k]->name;
            put_floats(params[k]->value);
            put_floats(opt_.first_moments()[k]);
            put_floats(opt_.second_moments()[k]);
        }
        write_atomic(dir / "model.bin", blob);
        write_atomic(dir / "checkpoint.json", metadata().dump(2) + "\n");
    }

    /// Restores a trainer from a checkpoint directory written by save().
    static Trainer load(const std::filesystem::path& dir) {
        const std::string blob = read_file(dir / "model.bin");
        std::size_t pos = 0;
        auto need = [&](std::size_t n) {
            if (pos + n > blob.size()) throw CheckpointError("checkpoint " + dir.string() + " is truncated");
        };
        auto get_u64 = [&]() {
            need(8);
            std::uint64_t v = 0;
            for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[pos + i])) << (8 * i);
            pos += 8;
            return v;
        };
        auto get_string = [&](std::size_t n) {
            need(n);
            std::string s = blob.substr(pos, n);
            pos += n;
            return s;
        };
        auto get_floats = [&](std::vector<float>& out) {
            const auto n = get_u64();
            if (n != out.size()) throw CheckpointError("checkpoint " + dir.string() + ": parameter size mismatch");
            need(4 * n);
            for (std::size_t i = 0; i < n; ++i) {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b) {
                    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(blob[pos + 4 * i + b])) << (8 * b);
                }
                std::memcpy(&out[i], &bits, sizeof bits);
            }
            pos += 4 * n;
        };
        if (get_string(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
            throw CheckpointError(dir.string() + "/model.bin is not a checkpoint");
        }
        if (get_u64() != kFormatVersion) throw CheckpointError("checkpoint format version not supported");
        const auto meta = nlohmann::json::parse(get_string(get_u64()));
        Trainer t(train_config_from_json(meta.at("config")));
        auto params = t.parameters();
        if (get_u64() != params.size()) throw CheckpointError("checkpoint parameter count does not match its config");
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (get_string(get_u64()) != params[k]->name) throw CheckpointError("checkpoint parameter order mismatch");
            get_floats(params[k]->value);
            get_floats(t.opt_.first_moments()[k]);
            get_floats(t.opt_.second_moments()[k]);
        }
        t.opt_.set_steps(meta.at("optimizer_steps").get<std::uint64_t>());
        t.epoch_ = meta.at("epoch").get<int>();
        for (const auto& e : meta.at("history")) t.log_.epochs.push_back(epoch_log_from_json(e));
        t.log_.best_epoch = meta.at("best_epoch").get<int>();
        return t;
    }

    /**
     * Adopts a new config for continued training. Structural fields must match
     * (their differences are listed in the error); a changed learning rate is
     * accepted with a warning, as are other optimisation settings.
     */
    void adopt_config(TrainConfig next) {
        next.sync_models();
        next.validate();
        std::vector<std::string> mismatched;
        if (next.styles != cfg_.styles) mismatched.push_back("M (" + std::to_string(cfg_.styles) + " vs " + std::to_string(next.styles) + ")");
        if (next.resolution != cfg_.resolution) {
            mismatched.push_back("resolution (" + std::to_string(cfg_.resolution) + " vs " + std::to_string(next.resolution) + ")");
        }
        if (next.mode != cfg_.mode) mismatched.push_back("mode (" + to_string(cfg_.mode) + " vs " + to_string(next.mode) + ")");
        if (!(next.seg == cfg_.seg)) mismatched.push_back("model.seg_*");
        if (next.uses_classifier() && !(next.cls == cfg_.cls)) mismatched.push_back("model.cls_*");
        if (!mismatched.empty()) {
            std::string msg = "checkpoint is incompatible with config; mismatched fields:";
            for (const auto& m : mismatched) msg += " " + m + ";";
            msg.pop_back();
            throw TrainConfigError(msg);
        }
        if (next.learning_rate != cfg_.learning_rate) {
            warn("resume: learning_rate changed from " + csv::exact(cfg_.learning_rate) + " to " +
                 csv::exact(next.learning_rate));
        }
        if (next.seed != cfg_.seed || next.batch_size != cfg_.batch_size) {
            warn("resume: seed or batch_size changed; the continued run will not replay an uninterrupted one");
        }
        if (next.epochs < epoch_) {
            throw TrainConfigError("train.epochs (" + std::to_string(next.epochs) + ") is below the checkpoint epoch (" +
                                   std::to_string(epoch_) + ")");
        }
        cfg_ = std::move(next);
        opt_.set_learning_rate(cfg_.learning_rate);
    }

private:
    static void write_atomic(const std::filesystem::path& path, const std::string& data) {
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            if (!out) throw CheckpointError("cannot write " + tmp);
            out.write(data.data(), static_cast<std::streamsize>(data.size()));
            if (!out) throw CheckpointError("write failed for " + tmp);
        }
        std::filesystem::rename(tmp, path);
    }

    void rebuild_optimizer() {
        opt_ = nn::Adam<float>(parameters(), nn::AdamHyper{cfg_.learning_rate});
    }

    TrainConfig cfg_;
    Seg seg_;
    std::optional<Cls> cls_;
    nn::Adam<float> opt_;
    RunLog log_;
    int epoch_ = 0;
};

// ---------------------------------------------------------------------------
// Run directories: checkpoint_dir/epoch_<n>/, best.txt, runlog.csv

inline std::filesystem::path epoch_dir(const std::filesystem::path& root, int epoch) {
    return root / ("epoch_" + std::to_string(epoch));
}

/// Highest epoch with a complete checkpoint under root, if any.
inline std::optional<int> latest_epoch(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) return std::nullopt;
    std::optional<int> best;
    for (const auto& e : fs::directory_iterator(root)) {
        const auto name = e.path().filename().string();
        if (!e.is_directory() || name.rfind("epoch_", 0) != 0) continue;
        const auto n = csv::parse_int(name.substr(6));
        if (!n || !fs::is_regular_file(e.path() / "model.bin") || !fs::is_regular_file(e.path() / "checkpoint.json")) {
            continue;
        }
        if (!best || *n > *best) best = static_cast<int>(*n);
    }
    return best;
}

/// Persists the per-epoch artefacts of a run.
inline void write_run_outputs(const std::filesystem::path& root, const Trainer& t) {
    t.save(epoch_dir(root, t.epoch()));
    {
        std::ofstream out(root / "runlog.csv", std::ios::trunc);
        out << runlog_csv(t.log());
    }
    std::ofstream best(root / "best.txt", std::ios::trunc);
    best << "epoch_" << t.log().best_epoch << "\n";
}

/**
 * Resolves a checkpoint reference: an epoch directory, a model.bin file, or a
 * run directory (in which case best.txt selects the epoch).
 */
inline std::filesystem::path resolve_checkpoint(const std::filesystem::path& ref) {
    namespace fs = std::filesystem;
    if (fs::is_regular_file(ref) && ref.filename() == "model.bin") return ref.parent_path();
    if (fs::is_regular_file(ref / "model.bin")) return ref;
    if (fs::is_regular_file(ref / "best.txt")) {
        std::ifstream in(ref / "best.txt");
        std::string name;
        in >> name;
        if (fs::is_regular_file(ref / name / "model.bin")) return ref / name;
        throw CheckpointError("best.txt in " + ref.string() + " names missing checkpoint " + name);
    }
    throw CheckpointError("no checkpoint found at " + ref.string());
}

/**
 * Trains per cfg and writes checkpoints to cfg.checkpoint_dir after every
 * epoch. With resume=true, continues from the latest checkpoint found there.
 */
inline Trainer run_training(const TrainConfig& cfg, const std::vector<AnnotatedSample>& train_set,
                            const std::vector<AnnotatedSample>& val_set, bool resume = false,
                            const Trainer::EpochCallback& on_epoch = {}) {
    const std::filesystem::path root = cfg.checkpoint_dir;
    if (root.empty()) throw TrainConfigError("train.checkpoint_dir must be set");
    std::optional<Trainer> trainer;
    if (resume) {
        if (const auto last = latest_epoch(root)) {
            trainer.emplace(Trainer::load(epoch_dir(root, *last)));
            trainer->adopt_config(cfg);
        } else {
            warn("resume: no checkpoint under " + root.string() + "; starting from scratch");
        }
    }
    if (!trainer) trainer.emplace(cfg);
    std::filesystem::create_directories(root);
    trainer->train(train_set, val_set, [&](const Trainer& t, const EpochLog& e) {
        write_run_outputs(root, t);
        if (on_epoch) on_epoch(t, e);
    });
    return std::move(*trainer);
}

}  // namespace styleseg
