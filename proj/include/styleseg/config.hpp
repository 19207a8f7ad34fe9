#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "csv.hpp"
#include "diagnostics.hpp"
#include "synthetic.hpp"
#include "training.hpp"

/**
 * @file config.hpp
 * @brief INI run configs for corpus generation and training.
 *
 * Unknown sections or keys are errors, so a typo never silently falls back to
 * a default. Relative paths resolve against the config file's directory.
 */

namespace styleseg {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {

class IniSection {
public:
    IniSection(std::string name, const boost::property_tree::ptree& tree) : name_(std::move(name)), tree_(tree) {}

    [[nodiscard]] const std::string& name() const { return name_; }

    [[nodiscard]] std::optional<std::string> raw(const std::string& key) {
        used_.insert(key);
        const auto it = tree_.find(key);
        if (it == tree_.not_found()) return std::nullopt;
        return it->second.data();
    }

    template<typename T>
    void read_int(const std::string& key, T& out) {
        if (auto v = raw(key)) {
            const auto n = csv::parse_int(*v);
            if (!n) throw ConfigError(qualified(key) + ": expected an integer, got '" + *v + "'");
            out = static_cast<T>(*n);
        }
    }

    void read_double(const std::string& key, double& out) {
        if (auto v = raw(key)) {
            const auto d = csv::parse_double(*v);
            if (!d) throw ConfigError(qualified(key) + ": expected a number, got '" + *v + "'");
            out = *d;
        }
    }

    void read_string(const std::string& key, std::string& out) {
        if (auto v = raw(key)) out = *v;
    }

    void reject_unknown() const {
        for (const auto& [key, value] : tree_) {
            if (!used_.contains(key)) throw ConfigError("unknown config key " + qualified(key));
        }
    }

    [[nodiscard]] std::string qualified(const std::string& key) const { return name_ + "." + key; }

private:
    std::string name_;
    const boost::property_tree::ptree& tree_;
    std::set<std::string> used_;
};

inline boost::property_tree::ptree read_ini(const std::filesystem::path& path) {
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.message() + " (line " +
                          std::to_string(e.line()) + ")");
    }
    for (const auto& [key, value] : tree) {
        if (value.empty() && !value.data().empty()) {
            throw ConfigError("config key '" + key + "' must be inside a [section]");
        }
    }
    return tree;
}

inline std::string resolve_relative(const std::filesystem::path& config_path, const std::string& value) {
    if (value.empty()) return value;
    const std::filesystem::path p(value);
    if (p.is_absolute()) return value;
    return (config_path.parent_path() / p).lexically_normal().string();
}

inline std::optional<std::uint64_t> seed_override() {
    const char* env = std::getenv("STYLESEG_SEED");
    if (!env || !*env) return std::nullopt;
    const auto n = csv::parse_int(env);
    if (!n || *n < 0) throw ConfigError(std::string("STYLESEG_SEED must be a non-negative integer, got '") + env + "'");
    return static_cast<std::uint64_t>(*n);
}

}  // namespace detail

struct SynthRunConfig {
    SynthConfig synth;
    std::string out;  // empty when the config does not name an output directory
};

/**
 * Sections: [synth] seed, n_images, resolution, coverage_p, val_fraction,
 * test_fraction, noise_sigma, out; [style.N] for N = 1..M with margin,
 * jaggedness_amplitude, jaggedness_frequency, smoothing_radius, seed, label.
 */
inline SynthRunConfig load_synth_config(const std::filesystem::path& path) {
    const auto tree = detail::read_ini(path);
    SynthRunConfig cfg;
    std::map<int, StyleParams> styles;
    bool saw_synth = false;
    for (const auto& [section, body] : tree) {
        if (section == "synth") {
            saw_synth = true;
            detail::IniSection s(section, body);
            s.read_int("seed", cfg.synth.seed);
            s.read_int("n_images", cfg.synth.n_images);
            s.read_int("resolution", cfg.synth.resolution);
            s.read_double("coverage_p", cfg.synth.coverage_p);
            s.read_double("val_fraction", cfg.synth.val_fraction);
            s.read_double("test_fraction", cfg.synth.test_fraction);
            s.read_double("noise_sigma", cfg.synth.noise_sigma);
            s.read_string("out", cfg.out);
            s.reject_unknown();
        } else if (section.rfind("style.", 0) == 0) {
            const auto index = csv::parse_int(section.substr(6));
            if (!index || *index < 1) throw ConfigError("bad style section [" + section + "]; expected [style.N], N >= 1");
            detail::IniSection s(section, body);
            StyleParams style;
            style.seed = static_cast<std::uint64_t>(*index);
            style.label = "style" + std::to_string(*index);
            s.read_int("margin", style.margin);
            s.read_double("jaggedness_amplitude", style.jaggedness_amplitude);
            s.read_int("jaggedness_frequency", style.jaggedness_frequency);
            s.read_int("smoothing_radius", style.smoothing_radius);
            s.read_int("seed", style.seed);
            s.read_string("label", style.label);
            s.reject_unknown();
            styles[static_cast<int>(*index)] = style;
        } else {
            throw ConfigError("unknown config section [" + section + "]");
        }
    }
    if (!saw_synth) throw ConfigError("config " + path.string() + " has no [synth] section");
    int expected = 1;
    for (const auto& [index, style] : styles) {
        if (index != expected) throw ConfigError("style sections must be numbered 1..M without gaps; missing [style." + std::to_string(expected) + "]");
        cfg.synth.styles.push_back(style);
        ++expected;
    }
    if (const auto seed = detail::seed_override()) {
        info("STYLESEG_SEED overrides synth.seed: " + std::to_string(*seed));
        cfg.synth.seed = *seed;
    }
    try {
        cfg.synth.validate();
    } catch (const SynthConfigError& e) {
        throw ConfigError(e.what());
    }
    cfg.out = detail::resolve_relative(path, cfg.out);
    return cfg;
}

/**
 * Sections: [train] corpus, mode, M, epochs, batch_size, learning_rate, seed,
 * smooth, mhp_eps, w1, w2, w3, resolution, checkpoint_dir, selection;
 * [model] seg_base_width, seg_stages, seg_convs_per_stage, seg_max_width,
 * cls_base_width, cls_stages, cls_max_width.
 */
inline TrainConfig load_train_config(const std::filesystem::path& path) {
    const auto tree = detail::read_ini(path);
    TrainConfig cfg;
    bool saw_train = false;
    for (const auto& [section, body] : tree) {
        detail::IniSection s(section, body);
        if (section == "train") {
            saw_train = true;
            std::string mode = to_string(cfg.mode), selection = to_string(cfg.selection);
            s.read_string("corpus", cfg.corpus);
            s.read_string("mode", mode);
            s.read_int("M", cfg.styles);
            s.read_int("epochs", cfg.epochs);
            s.read_int("batch_size", cfg.batch_size);
            s.read_double("learning_rate", cfg.learning_rate);
            s.read_int("seed", cfg.seed);
            s.read_double("smooth", cfg.smooth);
            s.read_double("mhp_eps", cfg.mhp_eps);
            s.read_double("w1", cfg.weights.l1);
            s.read_double("w2", cfg.weights.l2);
            s.read_double("w3", cfg.weights.l3);
            s.read_int("resolution", cfg.resolution);
            s.read_string("checkpoint_dir", cfg.checkpoint_dir);
            s.read_string("selection", selection);
            s.reject_unknown();
            const auto parsed = parse_mode(mode);
            if (!parsed) throw ConfigError("train.mode: expected styleseg, mhp or naive, got '" + mode + "'");
            cfg.mode = *parsed;
            if (selection != "soft" && selection != "hard") {
                throw ConfigError("train.selection: expected soft or hard, got '" + selection + "'");
            }
            cfg.selection = selection == "hard" ? SelectionMode::hard : SelectionMode::soft;
        } else if (section == "model") {
            s.read_int("seg_base_width", cfg.seg.base_width);
            s.read_int("seg_stages", cfg.seg.n_stages);
            s.read_int("seg_convs_per_stage", cfg.seg.convs_per_stage);
            s.read_int("seg_max_width", cfg.seg.max_width);
            s.read_int("cls_base_width", cfg.cls.base_width);
            s.read_int("cls_stages", cfg.cls.n_stages);
            s.read_int("cls_max_width", cfg.cls.max_width);
            s.reject_unknown();
        } else {
            throw ConfigError("unknown config section [" + section + "]");
        }
    }
    if (!saw_train) throw ConfigError("config " + path.string() + " has no [train] section");
    if (const auto seed = detail::seed_override()) {
        info("STYLESEG_SEED overrides train.seed: " + std::to_string(*seed));
        cfg.seed = *seed;
    }
    cfg.corpus = detail::resolve_relative(path, cfg.corpus);
    cfg.checkpoint_dir = detail::resolve_relative(path, cfg.checkpoint_dir);
    if (cfg.corpus.empty()) throw ConfigError("train.corpus is required");
    if (cfg.checkpoint_dir.empty()) throw ConfigError("train.checkpoint_dir is required");
    cfg.sync_models();
    try {
        cfg.validate();
    } catch (const TrainConfigError& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

}  // namespace styleseg
