#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"
#include "metrics.hpp"

/**
 * @file losses.hpp
 * @brief The style-discovery objective and the multiple-hypothesis baseline.
 *
 * All losses are defined over a SoftMaskStack so they stay differentiable.
 * Every function can optionally accumulate analytic gradients into a
 * LossGradient; style indices are 0-based in code.
 */

namespace styleseg {

class LossError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr double kLogEpsilon = 1e-12;

/// Classifier output: a distribution over M styles.
template<typename T>
struct StyleProbabilities {
    std::vector<T> p;

    StyleProbabilities() = default;
    explicit StyleProbabilities(std::vector<T> values, double tol = 1e-6) : p(std::move(values)) {
        T sum = T(0);
        for (T v : p) {
            if (!(v >= T(0))) throw LossError("style probabilities must be non-negative");
            sum += v;
        }
        if (p.empty() || std::abs(static_cast<double>(sum) - 1.0) > tol) {
            throw LossError("style probabilities must sum to 1");
        }
    }

    /// Wraps values without the simplex check (finite-difference probes step off the simplex).
    static StyleProbabilities unchecked(std::vector<T> values) {
        StyleProbabilities out;
        out.p = std::move(values);
        return out;
    }

    [[nodiscard]] int styles() const { return static_cast<int>(p.size()); }
    T operator[](std::size_t j) const { return p[j]; }
};

/// How m* is chosen: soft Dice on raw channels, or hard Dice on thresholded channels.
enum class SelectionMode { soft, hard };

template<typename T>
struct LossBreakdown {
    T l1{};
    T l2{};
    T l3{};
    T total{};
    int m_star = 0;
};

/// Gradient accumulator for d loss / d preds (stack layout) and d loss / d p.
template<typename T>
struct LossGradient {
    std::vector<T> preds;
    std::vector<T> probs;

    LossGradient() = default;
    LossGradient(std::size_t pred_size, std::size_t styles) : preds(pred_size, T(0)), probs(styles, T(0)) {}
    explicit LossGradient(const SoftMaskStack<T>& stack)
        : preds(stack.values.size(), T(0)), probs(static_cast<std::size_t>(stack.styles), T(0)) {}
};

namespace detail {

template<typename T>
void check_stack(const BinaryGrid& gt, const SoftMaskStack<T>& preds) {
    if (gt.height != preds.height || gt.width != preds.width) {
        throw DimensionError("loss: ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                             " vs prediction " + std::to_string(preds.height) + "x" + std::to_string(preds.width));
    }
    if (preds.styles < 1) throw LossError("loss: prediction stack has no styles");
}

template<typename T>
void check_probs(const SoftMaskStack<T>& preds, const StyleProbabilities<T>& p) {
    if (p.styles() != preds.styles) throw LossError("loss: probability vector length differs from style count");
}

/// Adds scale · d(1 − softDice(channel j))/d channel into grad.
template<typename T>
void accumulate_dice_loss_grad(const SoftDiceTerms<T>& terms, const BinaryGrid& gt, std::span<T> grad, T scale) {
    for (std::size_t i = 0; i < grad.size(); ++i) {
        grad[i] -= scale * terms.grad(gt.values[i] ? T(1) : T(0));
    }
}

}  // namespace detail

/**
 * Index of the style closest to the ground truth (argmax of Dice; lowest index
 * on ties). This is a discrete decision and never carries gradient.
 */
template<typename T>
int best_style_index(const BinaryGrid& gt, const SoftMaskStack<T>& preds, T smooth,
                     SelectionMode mode = SelectionMode::soft, double threshold = 0.5) {
    detail::check_stack(gt, preds);
    int best = 0;
    double best_score = -1.0;
    for (int j = 0; j < preds.styles; ++j) {
        const double score = mode == SelectionMode::soft
                                 ? static_cast<double>(soft_dice(preds.channel(j), gt, smooth))
                                 : dice(threshold_channel(preds, j, threshold), gt);
        if (score > best_score) {
            best_score = score;
            best = j;
        }
    }
    return best;
}

/// 1 − softDice(preds[m_star], gt); gradient flows into channel m_star only.
template<typename T>
T loss_l1(const BinaryGrid& gt, const SoftMaskStack<T>& preds, int m_star, T smooth,
          LossGradient<T>* grad = nullptr, T scale = T(1)) {
    detail::check_stack(gt, preds);
    const auto terms = soft_dice_terms(preds.channel(m_star), gt, smooth);
    if (grad) {
        std::span<T> g(grad->preds.data() + m_star * preds.plane(), preds.plane());
        detail::accumulate_dice_loss_grad(terms, gt, g, scale);
    }
    return T(1) - terms.value();
}

template<typename T>
T loss_l1(const BinaryGrid& gt, const SoftMaskStack<T>& preds, T smooth) {
    return loss_l1(gt, preds, best_style_index(gt, preds, smooth), smooth);
}

/// The p-weighted blend Σ_j p_j·preds[j], clamped to [0,1].
template<typename T>
std::vector<T> blend_styles(const SoftMaskStack<T>& preds, const StyleProbabilities<T>& p) {
    std::vector<T> blend(preds.plane(), T(0));
    for (int j = 0; j < preds.styles; ++j) {
        auto ch = preds.channel(j);
        for (std::size_t i = 0; i < blend.size(); ++i) blend[i] += p[j] * ch[i];
    }
    for (auto& v : blend) v = std::min(T(1), std::max(T(0), v));
    return blend;
}

/// 1 − softDice(Σ_j p_j·preds[j], gt); gradient flows into every channel and into p.
template<typename T>
T loss_l2(const BinaryGrid& gt, const SoftMaskStack<T>& preds, const StyleProbabilities<T>& p, T smooth,
          LossGradient<T>* grad = nullptr, T scale = T(1)) {
    detail::check_stack(gt, preds);
    detail::check_probs(preds, p);
    const auto blend = blend_styles(preds, p);
    const auto terms = soft_dice_terms(std::span<const T>(blend), gt, smooth);
    if (grad) {
        const std::size_t plane = preds.plane();
        std::vector<T> d_blend(plane);
        for (std::size_t i = 0; i < plane; ++i) d_blend[i] = -scale * terms.grad(gt.values[i] ? T(1) : T(0));
        for (int j = 0; j < preds.styles; ++j) {
            auto ch = preds.channel(j);
            T* g = grad->preds.data() + j * plane;
            T dp = T(0);
            for (std::size_t i = 0; i < plane; ++i) {
                g[i] += p[j] * d_blend[i];
                dp += ch[i] * d_blend[i];
            }
            grad->probs[j] += dp;
        }
    }
    return T(1) - terms.value();
}

/// Cross-entropy −log(p[m_star] + ε).
template<typename T>
T loss_l3(const StyleProbabilities<T>& p, int m_star, LossGradient<T>* grad = nullptr, T scale = T(1)) {
    if (m_star < 0 || m_star >= p.styles()) throw LossError("loss_l3: m_star out of range");
    const T shifted = p[m_star] + static_cast<T>(kLogEpsilon);
    if (grad) grad->probs[m_star] -= scale / shifted;
    return -std::log(shifted);
}

template<typename T>
struct LossWeights {
    T l1 = T(1);
    T l2 = T(1);
    T l3 = T(1);
};

/// L1 + L2 + L3 from a single m* selection (weights default to 1).
template<typename T>
LossBreakdown<T> total_loss(const BinaryGrid& gt, const SoftMaskStack<T>& preds, const StyleProbabilities<T>& p,
                            T smooth, LossGradient<T>* grad = nullptr, LossWeights<T> w = {},
                            SelectionMode mode = SelectionMode::soft) {
    LossBreakdown<T> out;
    out.m_star = best_style_index(gt, preds, smooth, mode);
    out.l1 = loss_l1(gt, preds, out.m_star, smooth, grad, w.l1);
    out.l2 = loss_l2(gt, preds, p, smooth, grad, w.l2);
    out.l3 = loss_l3(p, out.m_star, grad, w.l3);
    out.total = w.l1 * out.l1 + w.l2 * out.l2 + w.l3 * out.l3;
    return out;
}

/**
 * Relaxed winner-take-all loss: Σ_j w_j (1 − softDice(preds[j], gt)) with
 * w_{m*} = 1 − eps and w_{j≠m*} = eps/(M−1).
 */
template<typename T>
T mhp_loss(const BinaryGrid& gt, const SoftMaskStack<T>& preds, T eps, T smooth, LossGradient<T>* grad = nullptr,
           T scale = T(1), SelectionMode mode = SelectionMode::soft) {
    detail::check_stack(gt, preds);
    if (!(eps >= T(0) && eps < T(1))) throw LossError("mhp_loss: eps must lie in [0,1)");
    if (preds.styles < 2) throw LossError("mhp_loss: needs at least 2 styles");
    const int m_star = best_style_index(gt, preds, smooth, mode);
    const T other = eps / static_cast<T>(preds.styles - 1);
    T total = T(0);
    for (int j = 0; j < preds.styles; ++j) {
        const T w = j == m_star ? T(1) - eps : other;
        const auto terms = soft_dice_terms(preds.channel(j), gt, smooth);
        total += w * (T(1) - terms.value());
        if (grad && w != T(0)) {
            std::span<T> g(grad->preds.data() + j * preds.plane(), preds.plane());
            detail::accumulate_dice_loss_grad(terms, gt, g, scale * w);
        }
    }
    return total;
}

/// Single-channel Dice loss used by the naive baseline (M = 1).
template<typename T>
T naive_loss(const BinaryGrid& gt, const SoftMaskStack<T>& preds, T smooth, LossGradient<T>* grad = nullptr,
             T scale = T(1)) {
    detail::check_stack(gt, preds);
    return loss_l1(gt, preds, 0, smooth, grad, scale);
}

}  // namespace styleseg
