#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diagnostics.hpp"
#include "grid.hpp"

/**
 * @file metrics.hpp
 * @brief Reference metrics: hard/soft Dice, pairwise agreement, Fleiss' kappa,
 * annotator-style alignment strength (AS²) and contour shape features.
 *
 * Everything here is a pure function of its arguments.
 */

namespace styleseg {

class MetricError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Hard Dice 2|a∩b|/(|a|+|b|). Two empty masks agree perfectly (1.0).
inline double dice(const BinaryGrid& a, const BinaryGrid& b) {
    require_same_shape(a, b, "dice");
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const bool x = a.values[i] != 0, y = b.values[i] != 0;
        inter += x && y;
        na += x;
        nb += y;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double dice(const BinaryMask& a, const BinaryMask& b) { return dice(a.grid, b.grid); }

/// Sums that define a soft Dice value; kept so callers can differentiate it.
template<typename T>
struct SoftDiceTerms {
    T intersection{};  // Σ pred·target
    T pred_sum{};      // Σ pred
    T target_sum{};    // Σ target
    T smooth{};

    [[nodiscard]] T numerator() const { return T(2) * intersection + smooth; }
    [[nodiscard]] T denominator() const { return pred_sum + target_sum + smooth; }
    [[nodiscard]] T value() const {
        const T den = denominator();
        // 0/0 only happens with smooth = 0 and both inputs empty: perfect agreement.
        return den == T(0) ? T(1) : numerator() / den;
    }

    /// d value / d pred_k for a pixel whose target is `target_k`.
    [[nodiscard]] T grad(T target_k) const {
        const T den = denominator();
        if (den == T(0)) return T(0);
        return (T(2) * target_k * den - numerator()) / (den * den);
    }
};

template<typename T>
SoftDiceTerms<T> soft_dice_terms(std::span<const T> pred, const BinaryGrid& target, T smooth) {
    if (pred.size() != target.values.size()) throw DimensionError("soft_dice: dimension mismatch");
    if (smooth < T(0)) throw MetricError("soft_dice: smooth must be non-negative");
    SoftDiceTerms<T> t;
    t.smooth = smooth;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T g = target.values[i] ? T(1) : T(0);
        t.intersection += pred[i] * g;
        t.pred_sum += pred[i];
        t.target_sum += g;
    }
    return t;
}

/// (2Σ pred·target + smooth) / (Σ pred + Σ target + smooth).
template<typename T>
T soft_dice(std::span<const T> pred, const BinaryGrid& target, T smooth) {
    return soft_dice_terms(pred, target, smooth).value();
}

template<typename T>
T soft_dice(const Grid<T>& pred, const BinaryGrid& target, T smooth) {
    require_same_shape(pred, target, "soft_dice");
    return soft_dice(std::span<const T>(pred.values), target, smooth);
}

/// Mean Dice over all K(K−1)/2 unordered mask pairs.
inline double pairwise_dice(std::span<const BinaryGrid> masks) {
    if (masks.size() < 2) throw MetricError("pairwise_dice: need at least 2 masks");
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
        for (std::size_t j = i + 1; j < masks.size(); ++j) {
            sum += dice(masks[i], masks[j]);
            ++pairs;
        }
    }
    return sum / static_cast<double>(pairs);
}

/**
 * Fleiss' kappa with pixels as subjects, masks as raters and two categories.
 *
 * When every rating falls in one category the chance agreement is 1 and the
 * raters trivially agree; that case returns 1.
 */
inline double fleiss_kappa(std::span<const BinaryGrid> masks) {
    if (masks.size() < 2) throw MetricError("fleiss_kappa: need at least 2 masks");
    for (const auto& m : masks) require_same_shape(masks.front(), m, "fleiss_kappa");
    const std::size_t subjects = masks.front().values.size();
    if (subjects == 0) throw MetricError("fleiss_kappa: empty masks");
    const double raters = static_cast<double>(masks.size());

    double agreement_sum = 0.0;
    double fg_total = 0.0;
    for (std::size_t i = 0; i < subjects; ++i) {
        double fg = 0.0;
        for (const auto& m : masks) fg += m.values[i] != 0;
        const double bg = raters - fg;
        agreement_sum += (fg * fg + bg * bg - raters) / (raters * (raters - 1.0));
        fg_total += fg;
    }
    const double p_bar = agreement_sum / static_cast<double>(subjects);
    const double p_fg = fg_total / (static_cast<double>(subjects) * raters);
    const double p_e = p_fg * p_fg + (1.0 - p_fg) * (1.0 - p_fg);
    if (p_e >= 1.0) return 1.0;
    return (p_bar - p_e) / (1.0 - p_e);
}

/// Fractions of a group's masks assigned to each style.
class StyleAssignmentDistribution {
public:
    explicit StyleAssignmentDistribution(std::vector<double> q) : q_(std::move(q)) {
        if (q_.empty()) throw MetricError("style assignment distribution is empty");
        double sum = 0.0;
        for (double v : q_) {
            if (!(v >= 0.0)) throw MetricError("style assignment fractions must be non-negative");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw MetricError("style assignment fractions must sum to 1");
    }

    /// Builds q from per-style counts.
    static StyleAssignmentDistribution from_counts(std::span<const std::size_t> counts) {
        const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
        if (total == 0) throw MetricError("style assignment from zero counts");
        std::vector<double> q(counts.size());
        for (std::size_t j = 0; j < counts.size(); ++j) q[j] = static_cast<double>(counts[j]) / total;
        return StyleAssignmentDistribution(std::move(q));
    }

    [[nodiscard]] std::size_t styles() const { return q_.size(); }
    [[nodiscard]] const std::vector<double>& fractions() const { return q_; }
    [[nodiscard]] double operator[](std::size_t j) const { return q_[j]; }

private:
    std::vector<double> q_;
};

/**
 * Annotator-style alignment strength: 1 − H(q)/log2(M), with 0·log 0 = 0.
 *
 * Each summand is q_j·log(q_j)/log(1/M), which is exactly q_j for q_j = 1/M,
 * and the sum is compensated, so uniform q gives 0 and one-hot q gives 1 with
 * no rounding residue.
 */
inline double as2(const StyleAssignmentDistribution& q) {
    const std::size_t m = q.styles();
    if (m < 2) throw MetricError("AS2 undefined for a single style");
    const double log_uniform = std::log(1.0 / static_cast<double>(m));
    double sum = 0.0, carry = 0.0;
    for (double v : q.fractions()) {
        if (v <= 0.0) continue;
        const double term = v * (std::log(v) / log_uniform);
        const double t = sum + term;
        carry += std::abs(sum) >= std::abs(term) ? (sum - t) + term : (term - t) + sum;
        sum = t;
    }
    return 1.0 - (sum + carry);
}

// ---------------------------------------------------------------------------
// Shape features

struct ShapeFeatures {
    double area = 0.0;
    double perimeter = 0.0;
    double border_irregularity = 0.0;
    double compactness = 0.0;
};

namespace detail {

struct Pixel {
    int y = 0;
    int x = 0;
    friend bool operator==(const Pixel&, const Pixel&) = default;
};

// Clockwise in image coordinates (y grows downward), starting east.
inline constexpr std::array<Pixel, 8> kNeighbours8{
    {{0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1}, {-1, 0}, {-1, 1}}};

inline int direction_of(Pixel from, Pixel to) {
    const Pixel d{to.y - from.y, to.x - from.x};
    for (int i = 0; i < 8; ++i) {
        if (kNeighbours8[i] == d) return i;
    }
    return -1;
}

/// 8-connected component labels (0 = background, 1..n components).
inline std::pair<Grid<int>, int> label_components(const BinaryGrid& mask) {
    Grid<int> labels(mask.height, mask.width, 0);
    int next = 0;
    std::vector<Pixel> stack;
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            if (!mask(y, x) || labels(y, x)) continue;
            ++next;
            labels(y, x) = next;
            stack.push_back({y, x});
            while (!stack.empty()) {
                const Pixel p = stack.back();
                stack.pop_back();
                for (const auto& d : kNeighbours8) {
                    const int ny = p.y + d.y, nx = p.x + d.x;
                    if (mask.contains(ny, nx) && mask(ny, nx) && !labels(ny, nx)) {
                        labels(ny, nx) = next;
                        stack.push_back({ny, nx});
                    }
                }
            }
        }
    }
    return {std::move(labels), next};
}

/**
 * Moore-neighbour trace of the outer boundary of the component containing
 * `start`, which must be its first pixel in raster order. Returns the closed
 * contour as a pixel sequence (first pixel not repeated at the end).
 */
inline std::vector<Pixel> trace_outer_contour(const Grid<int>& labels, int label, Pixel start) {
    auto inside = [&](Pixel p) { return labels.contains(p.y, p.x) && labels(p.y, p.x) == label; };
    std::vector<Pixel> contour{start};

    // Raster-order first pixel: its west neighbour is outside the component.
    int backtrack_dir = 4;
    Pixel current = start;
    std::optional<Pixel> second;
    const std::size_t limit = 4 * labels.size() + 8;
    for (std::size_t step = 0; step < limit; ++step) {
        int found = -1;
        for (int i = 1; i <= 8; ++i) {
            const int d = (backtrack_dir + i) % 8;
            const Pixel n{current.y + kNeighbours8[d].y, current.x + kNeighbours8[d].x};
            if (inside(n)) {
                found = d;
                break;
            }
        }
        if (found < 0) break;  // isolated pixel
        const Pixel next{current.y + kNeighbours8[found].y, current.x + kNeighbours8[found].x};
        const int prev_d = (found + 7) % 8;
        const Pixel back{current.y + kNeighbours8[prev_d].y, current.x + kNeighbours8[prev_d].x};

        if (current == start && second && next == *second) break;
        if (!second) second = next;
        contour.push_back(next);
        backtrack_dir = direction_of(next, back);
        current = next;
    }
    if (contour.size() > 1 && contour.back() == start) contour.pop_back();
    return contour;
}

inline double contour_length(const std::vector<Pixel>& pts) {
    if (pts.size() < 2) return 0.0;
    double len = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const Pixel& a = pts[i];
        const Pixel& b = pts[(i + 1) % pts.size()];
        const int dy = std::abs(a.y - b.y), dx = std::abs(a.x - b.x);
        len += (dy + dx == 2) ? std::numbers::sqrt2 : static_cast<double>(dy + dx);
    }
    return len;
}

inline long long cross(Pixel o, Pixel a, Pixel b) {
    return static_cast<long long>(a.x - o.x) * (b.y - o.y) - static_cast<long long>(a.y - o.y) * (b.x - o.x);
}

/// Andrew's monotone chain; counter-clockwise hull without collinear points.
inline std::vector<Pixel> convex_hull(std::vector<Pixel> pts) {
    std::sort(pts.begin(), pts.end(), [](Pixel a, Pixel b) { return a.x != b.x ? a.x < b.x : a.y < b.y; });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3) return pts;
    std::vector<Pixel> hull(2 * pts.size());
    std::size_t k = 0;
    for (const auto& p : pts) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
        hull[k++] = p;
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline bool on_segment(Pixel a, Pixel b, Pixel p) {
    return cross(a, b, p) == 0 && std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) &&
           std::min(a.y, b.y) <= p.y && p.y <= std::max(a.y, b.y);
}

inline bool in_hull(const std::vector<Pixel>& hull, Pixel p) {
    if (hull.size() == 1) return hull[0] == p;
    if (hull.size() == 2) return on_segment(hull[0], hull[1], p);
    for (std::size_t i = 0; i < hull.size(); ++i) {
        if (cross(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
    }
    return true;
}

}  // namespace detail

/**
 * Area, contour perimeter, border irregularity P²/(4πA) and compactness
 * (convex hull area / A) of a binary mask.
 *
 * Area and convex hull area are pixel counts; the hull area counts the pixels
 * whose centres fall inside the hull of the foreground pixel centres. The
 * perimeter is the length of the 8-connected outer contour polygon through
 * boundary pixel centres, summed over components. An isolated pixel has no
 * contour polygon and contributes its four pixel edges instead.
 */
inline ShapeFeatures shape_features(const BinaryGrid& mask) {
    const std::size_t area = foreground_count(mask);
    if (area == 0) throw MetricError("shape_features: empty mask");

    auto [labels, n_components] = detail::label_components(mask);
    std::vector<bool> traced(static_cast<std::size_t>(n_components) + 1, false);
    double perimeter = 0.0;
    std::vector<detail::Pixel> fg;
    fg.reserve(area);
    for (int y = 0; y < mask.height; ++y) {
        for (int x = 0; x < mask.width; ++x) {
            const int l = labels(y, x);
            if (!l) continue;
            fg.push_back({y, x});
            if (traced[l]) continue;
            traced[l] = true;
            const auto contour = detail::trace_outer_contour(labels, l, {y, x});
            perimeter += contour.size() < 2 ? 4.0 : detail::contour_length(contour);
        }
    }

    const auto hull = detail::convex_hull(fg);
    int y0 = mask.height, y1 = -1, x0 = mask.width, x1 = -1;
    for (const auto& p : fg) {
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
    }
    std::size_t hull_area = 0;
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) hull_area += detail::in_hull(hull, {y, x});
    }

    ShapeFeatures f;
    f.area = static_cast<double>(area);
    f.perimeter = perimeter;
    f.border_irregularity = perimeter * perimeter / (4.0 * std::numbers::pi * f.area);
    f.compactness = static_cast<double>(hull_area) / f.area;
    return f;
}

inline ShapeFeatures shape_features(const BinaryMask& mask) { return shape_features(mask.grid); }

struct StyleShapeRatio {
    std::string image_id;
    int style = 0;  // 1-based
    double area_ratio = 0.0;
    double perimeter_ratio = 0.0;
};

/**
 * Normalizes per-image shape features against the first style. Missing cells
 * (std::nullopt) are skipped; an image whose first style is missing or has zero
 * area/perimeter is skipped with a warning.
 */
inline std::vector<StyleShapeRatio> normalized_style_shapes(
    const std::map<std::string, std::vector<std::optional<ShapeFeatures>>>& per_image) {
    std::vector<StyleShapeRatio> rows;
    for (const auto& [id, styles] : per_image) {
        if (styles.empty() || !styles.front() || styles.front()->area <= 0.0 || styles.front()->perimeter <= 0.0) {
            warn("normalized_style_shapes: skipping " + id + " (first style has no usable area/perimeter)");
            continue;
        }
        const auto& ref = *styles.front();
        for (std::size_t j = 0; j < styles.size(); ++j) {
            if (!styles[j]) continue;
            rows.push_back({id, static_cast<int>(j) + 1, styles[j]->area / ref.area, styles[j]->perimeter / ref.perimeter});
        }
    }
    return rows;
}

}  // namespace styleseg
