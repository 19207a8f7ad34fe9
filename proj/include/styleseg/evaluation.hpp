#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "csv.hpp"
#include "grid.hpp"
#include "metrics.hpp"
#include "models.hpp"

/**
 * @file evaluation.hpp
 * @brief Per-pair style Dice records and the protocols computed from them:
 * summary statistics, image-adaptive and group-fixed style selection, style
 * assignment strength per group, and shape consistency per style.
 *
 * Style indices are 0-based in the C++ API and 1-based in every CSV file.
 */

namespace styleseg {

class EvaluationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct EvalRecord {
    std::string image_id;
    int k = 0;  // mask index within the image, 0-based
    std::optional<std::string> preference_label;
    std::optional<int> planted_style;
    std::vector<double> dice;  // hard Dice per predicted style
    int m_best = 0;            // argmax of dice, lowest index on ties
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
    std::size_t n = 0;
};

inline MeanStd mean_std(std::span<const double> values) {
    MeanStd out;
    out.n = values.size();
    if (values.empty()) return out;
    for (double v : values) out.mean += v;
    out.mean /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / static_cast<double>(values.size()));
    return out;
}

inline int argmax_lowest(std::span<const double> v) {
    if (v.empty()) throw EvaluationError("argmax of an empty vector");
    int best = 0;
    for (std::size_t j = 1; j < v.size(); ++j) {
        if (v[j] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    }
    return best;
}

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline EvalRecord make_record(const std::string& image_id, int k, const BinaryMask& gt, std::vector<double> dice_values) {
    EvalRecord r;
    r.image_id = image_id;
    r.k = k;
    r.preference_label = gt.source_label;
    r.planted_style = gt.planted_style;
    r.m_best = argmax_lowest(dice_values);
    r.dice = std::move(dice_values);
    return r;
}

/// Records for one sample given its predicted stack.
template<typename T>
std::vector<EvalRecord> score_sample(const AnnotatedSample& sample, const SoftMaskStack<T>& preds, double threshold = 0.5) {
    std::vector<BinaryGrid> channels;
    for (int j = 0; j < preds.styles; ++j) channels.push_back(threshold_channel(preds, j, threshold));
    std::vector<EvalRecord> records;
    for (std::size_t k = 0; k < sample.masks.size(); ++k) {
        std::vector<double> d;
        for (const auto& c : channels) d.push_back(dice(c, sample.masks[k].grid));
        records.push_back(make_record(sample.image.id, static_cast<int>(k), sample.masks[k], std::move(d)));
    }
    return records;
}

/// One record per (image, ground-truth mask): hard Dice of every thresholded style channel.
template<typename T>
std::vector<EvalRecord> evaluate_corpus(const SegmentationModel<T>& model, const std::vector<AnnotatedSample>& samples,
                                        double threshold = 0.5) {
    std::vector<EvalRecord> records;
    for (const auto& s : samples) {
        if (s.image.height != model.config().resolution || s.image.width != model.config().resolution) {
            throw DimensionError("image " + s.image.id + " is " + std::to_string(s.image.height) + "x" +
                                 std::to_string(s.image.width) + " but the model expects " +
                                 std::to_string(model.config().resolution) + "x" +
                                 std::to_string(model.config().resolution));
        }
        auto part = score_sample(s, model.forward(s.image), threshold);
        records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return records;
}

struct StyleStatistics {
    MeanStd max;
    MeanStd mean;
    MeanStd median;
    MeanStd min;
};

/// Per-record max/mean/median/min over styles, then mean±std of each across records.
inline StyleStatistics style_statistics(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw EvaluationError("style_statistics: no records");
    std::vector<double> mx, mn, md, lo;
    for (const auto& r : records) {
        mx.push_back(*std::max_element(r.dice.begin(), r.dice.end()));
        lo.push_back(*std::min_element(r.dice.begin(), r.dice.end()));
        double s = 0;
        for (double v : r.dice) s += v;
        mn.push_back(s / static_cast<double>(r.dice.size()));
        md.push_back(median_of(r.dice));
    }
    return {mean_std(mx), mean_std(mn), mean_std(md), mean_std(lo)};
}

inline MeanStd dice_iass(const std::vector<EvalRecord>& records) {
    std::vector<double> best;
    for (const auto& r : records) best.push_back(r.dice.at(static_cast<std::size_t>(r.m_best)));
    return mean_std(best);
}

struct AsssResult {
    int J = 0;
    MeanStd dice;
};

/// The single style maximizing summed Dice over a group (lowest index on ties).
inline AsssResult dice_asss(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw EvaluationError("dice_asss: empty group");
    const std::size_t m = records.front().dice.size();
    std::vector<double> column_sum(m, 0.0);
    for (const auto& r : records) {
        if (r.dice.size() != m) throw EvaluationError("dice_asss: records disagree on the number of styles");
        for (std::size_t j = 0; j < m; ++j) column_sum[j] += r.dice[j];
    }
    AsssResult out;
    out.J = argmax_lowest(column_sum);
    std::vector<double> column;
    for (const auto& r : records) column.push_back(r.dice[static_cast<std::size_t>(out.J)]);
    out.dice = mean_std(column);
    return out;
}

struct StyleAssignment {
    StyleAssignmentDistribution q;
    double as2 = 0.0;
    int modal_style = 0;
    std::size_t count = 0;
};

inline StyleAssignment style_assignment(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw EvaluationError("style_assignment: empty group");
    const std::size_t m = records.front().dice.size();
    if (m < 2) throw EvaluationError("style_assignment: needs M >= 2 styles");
    std::vector<std::size_t> counts(m, 0);
    for (const auto& r : records) ++counts.at(static_cast<std::size_t>(r.m_best));
    auto q = StyleAssignmentDistribution::from_counts(counts);
    const double a = as2(q);
    const int modal = argmax_lowest(q.fractions());
    return {std::move(q), a, modal, records.size()};
}

enum class GroupKey { preference, tool, annotator, planted_style };

inline std::optional<GroupKey> parse_group_key(const std::string& s) {
    if (s == "preference") return GroupKey::preference;
    if (s == "tool") return GroupKey::tool;
    if (s == "annotator") return GroupKey::annotator;
    if (s == "planted_style") return GroupKey::planted_style;
    return std::nullopt;
}

inline std::string to_string(GroupKey k) {
    switch (k) {
        case GroupKey::preference: return "preference";
        case GroupKey::tool: return "tool";
        case GroupKey::annotator: return "annotator";
        case GroupKey::planted_style: return "planted_style";
    }
    return "?";
}

/// Splits "A00+T2+E" style labels on '+'; the annotator part starts with 'A', the tool part with 'T'.
inline std::optional<std::string> label_part(const std::string& label, char prefix) {
    std::size_t start = 0;
    while (start <= label.size()) {
        const auto end = std::min(label.find('+', start), label.size());
        const auto part = label.substr(start, end - start);
        if (part.size() > 1 && part[0] == prefix) return part;
        start = end + 1;
    }
    return std::nullopt;
}

inline std::string group_value(const EvalRecord& r, GroupKey key) {
    const auto missing = [&]() {
        return EvaluationError("record " + r.image_id + "/" + std::to_string(r.k) + " has no '" + to_string(key) +
                               "' metadata");
    };
    switch (key) {
        case GroupKey::planted_style:
            if (!r.planted_style) throw missing();
            return std::to_string(*r.planted_style);
        case GroupKey::preference:
            if (!r.preference_label) throw missing();
            return *r.preference_label;
        case GroupKey::tool:
        case GroupKey::annotator: {
            if (!r.preference_label) throw missing();
            const auto part = label_part(*r.preference_label, key == GroupKey::tool ? 'T' : 'A');
            if (!part) throw missing();
            return *part;
        }
    }
    throw missing();
}

inline std::map<std::string, std::vector<EvalRecord>> partition(const std::vector<EvalRecord>& records, GroupKey key) {
    std::map<std::string, std::vector<EvalRecord>> groups;
    for (const auto& r : records) groups[group_value(r, key)].push_back(r);
    return groups;
}

struct GroupAssignmentTable {
    GroupKey key = GroupKey::preference;
    std::vector<std::pair<std::string, StyleAssignment>> rows;
    bool modal_styles_distinct = true;

    [[nodiscard]] MeanStd as2_summary() const {
        std::vector<double> v;
        for (const auto& [g, a] : rows) v.push_back(a.as2);
        return mean_std(v);
    }
};

inline GroupAssignmentTable group_style_assignment(const std::vector<EvalRecord>& records, GroupKey key) {
    GroupAssignmentTable table;
    table.key = key;
    std::set<int> modal;
    for (auto& [name, group] : partition(records, key)) {
        auto a = style_assignment(group);
        table.modal_styles_distinct = table.modal_styles_distinct && modal.insert(a.modal_style).second;
        table.rows.emplace_back(name, std::move(a));
    }
    return table;
}

struct PreferenceReport {
    std::string preference_label;
    std::size_t count = 0;
    MeanStd iass;
    MeanStd asss;
    int J = 0;
    std::optional<double> as2;  // absent for M = 1
};

/// One row per preference label; records without a label form the group "unlabeled".
inline std::vector<PreferenceReport> preference_reports(const std::vector<EvalRecord>& records) {
    std::map<std::string, std::vector<EvalRecord>> groups;
    for (const auto& r : records) groups[r.preference_label.value_or("unlabeled")].push_back(r);
    std::vector<PreferenceReport> out;
    for (const auto& [label, group] : groups) {
        PreferenceReport p;
        p.preference_label = label;
        p.count = group.size();
        p.iass = dice_iass(group);
        const auto asss = dice_asss(group);
        p.asss = asss.dice;
        p.J = asss.J;
        if (group.front().dice.size() >= 2) p.as2 = style_assignment(group).as2;
        out.push_back(std::move(p));
    }
    return out;
}

struct ConsistencyReport {
    std::vector<StyleShapeRatio> rows;
    std::vector<std::optional<std::pair<double, double>>> centroids;  // per style: mean (area_ratio, perimeter_ratio)
};

/// Shape cells of one predicted stack; an empty channel is a missing cell.
template<typename T>
std::vector<std::optional<ShapeFeatures>> shape_cells(const SoftMaskStack<T>& preds, double threshold = 0.5) {
    std::vector<std::optional<ShapeFeatures>> cells;
    for (int j = 0; j < preds.styles; ++j) {
        const auto mask = threshold_channel(preds, j, threshold);
        cells.push_back(foreground_count(mask) ? std::optional(shape_features(mask)) : std::nullopt);
    }
    return cells;
}

/// Normalized long-form table plus the per-style centroid of (area_ratio, perimeter_ratio).
inline ConsistencyReport consistency_from_cells(
    const std::map<std::string, std::vector<std::optional<ShapeFeatures>>>& per_image, int styles) {
    ConsistencyReport out;
    out.rows = normalized_style_shapes(per_image);
    const auto m = static_cast<std::size_t>(styles);
    std::vector<double> sum_a(m, 0.0), sum_p(m, 0.0);
    std::vector<std::size_t> n(m, 0);
    for (const auto& r : out.rows) {
        const auto j = static_cast<std::size_t>(r.style - 1);
        sum_a[j] += r.area_ratio;
        sum_p[j] += r.perimeter_ratio;
        ++n[j];
    }
    for (std::size_t j = 0; j < m; ++j) {
        if (n[j] == 0) {
            out.centroids.push_back(std::nullopt);
        } else {
            out.centroids.push_back(std::pair{sum_a[j] / static_cast<double>(n[j]), sum_p[j] / static_cast<double>(n[j])});
        }
    }
    return out;
}

template<typename T>
ConsistencyReport consistency_analysis(const SegmentationModel<T>& model, const std::vector<AnnotatedSample>& samples,
                                       double threshold = 0.5) {
    std::map<std::string, std::vector<std::optional<ShapeFeatures>>> per_image;
    for (const auto& s : samples) per_image[s.image.id] = shape_cells(model.forward(s.image), threshold);
    return consistency_from_cells(per_image, model.config().styles);
}

// ---------------------------------------------------------------------------
// CSV outputs

inline std::string records_header(std::size_t m) {
    std::string h = "image_id,k,preference_label";
    for (std::size_t j = 1; j <= m; ++j) h += ",d_" + std::to_string(j);
    return h + ",m_best";
}

inline void write_records_csv(const std::filesystem::path& path, const std::vector<EvalRecord>& records) {
    if (records.empty()) throw EvaluationError("no records to write");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw EvaluationError("cannot write " + path.string());
    out << records_header(records.front().dice.size()) << "\n";
    for (const auto& r : records) {
        out << r.image_id << "," << r.k << "," << r.preference_label.value_or("");
        for (double d : r.dice) out << "," << csv::exact(d);
        out << "," << r.m_best + 1 << "\n";
    }
}

/// Reads records.csv back. m_best is recomputed from the Dice columns and must agree with the file.
inline std::vector<EvalRecord> read_records_csv(const std::filesystem::path& path) {
    const auto table = csv::read(path.string());
    const auto& h = table.header;
    std::string joined;
    for (std::size_t i = 0; i < h.size(); ++i) joined += (i ? "," : "") + h[i];
    if (h.size() < 5 || joined != records_header(h.size() - 4)) {
        throw EvaluationError(path.string() + ": header must be image_id,k,preference_label,d_1..d_M,m_best");
    }
    const std::size_t m = h.size() - 4;
    std::vector<EvalRecord> out;
    std::size_t line = 1;
    for (const auto& row : table.rows) {
        ++line;
        const auto where = path.string() + ":" + std::to_string(line);
        EvalRecord r;
        r.image_id = row[0];
        const auto k = csv::parse_int(row[1]);
        if (!k || *k < 0) throw EvaluationError(where + ": bad k '" + row[1] + "'");
        r.k = static_cast<int>(*k);
        if (!row[2].empty()) r.preference_label = row[2];
        for (std::size_t j = 0; j < m; ++j) {
            const auto d = csv::parse_double(row[3 + j]);
            if (!d || *d < 0.0 || *d > 1.0) throw EvaluationError(where + ": bad Dice value '" + row[3 + j] + "'");
            r.dice.push_back(*d);
        }
        const auto mb = csv::parse_int(row.back());
        if (!mb || *mb < 1 || *mb > static_cast<long long>(m)) throw EvaluationError(where + ": bad m_best '" + row.back() + "'");
        r.m_best = static_cast<int>(*mb) - 1;
        out.push_back(std::move(r));
    }
    if (out.empty()) throw EvaluationError(path.string() + ": no records");
    return out;
}

inline void write_preferences_csv(const std::filesystem::path& path, const std::vector<PreferenceReport>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw EvaluationError("cannot write " + path.string());
    out << "preference_label,count,dice_iass_mean,dice_iass_std,dice_asss_mean,dice_asss_std,J,as2\n";
    for (const auto& p : rows) {
        out << p.preference_label << "," << p.count << "," << csv::exact(p.iass.mean) << "," << csv::exact(p.iass.std)
            << "," << csv::exact(p.asss.mean) << "," << csv::exact(p.asss.std) << "," << p.J + 1 << ","
            << (p.as2 ? csv::fmt(*p.as2, 6) : std::string()) << "\n";
    }
}

inline void write_assignment_csv(const std::filesystem::path& path, const GroupAssignmentTable& table) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw EvaluationError("cannot write " + path.string());
    const std::size_t m = table.rows.empty() ? 0 : table.rows.front().second.q.styles();
    out << "group";
    for (std::size_t j = 1; j <= m; ++j) out << ",q_" << j;
    out << ",as2,modal_style\n";
    for (const auto& [group, a] : table.rows) {
        out << group;
        for (double q : a.q.fractions()) out << "," << csv::exact(q);
        out << "," << csv::fmt(a.as2, 6) << "," << a.modal_style + 1 << "\n";
    }
}

inline void write_shapes_csv(const std::filesystem::path& path, const std::vector<StyleShapeRatio>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw EvaluationError("cannot write " + path.string());
    out << "image_id,style,area_ratio,perimeter_ratio\n";
    for (const auto& r : rows) {
        out << r.image_id << "," << r.style << "," << csv::exact(r.area_ratio) << "," << csv::exact(r.perimeter_ratio)
            << "\n";
    }
}

}  // namespace styleseg
