#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/**
 * @file nn.hpp
 * @brief Minimal convolutional building blocks with hand-written backward passes.
 *
 * Layers operate on one sample at a time (CHW tensors). Forward passes fill a
 * per-call cache instead of mutating the layer, so a const model can serve
 * concurrent inference. Backward passes accumulate into Parameter::grad.
 */

namespace styleseg::nn {

template<typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template<typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template<typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template<typename T>
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int c, int h, int w, T fill = T(0))
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    T& operator()(int c, int y, int x) { return data[(c * plane()) + static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int c, int y, int x) const {
        return data[(c * plane()) + static_cast<std::size_t>(y) * width + x];
    }
};

template<typename T>
struct Parameter {
    std::string name;
    std::vector<T> value;
    std::vector<T> grad;

    Parameter() = default;
    Parameter(std::string n, std::size_t size) : name(std::move(n)), value(size, T(0)), grad(size, T(0)) {}

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// He-normal initialisation scaled by fan-in; deterministic for a given engine state.
template<typename T>
void init_fan_in(Parameter<T>& p, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0) {
    std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
    for (auto& v : p.value) v = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------

template<typename T>
struct Conv2dCache {
    RowMatrix<T> columns;  // (in·k·k) × (H·W)
    int height = 0;
    int width = 0;
};

/// Stride-1, "same"-padded square convolution.
template<typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, int in_channels, int out_channels, int kernel)
        : in_(in_channels), out_(out_channels), k_(kernel),
          weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel),
          bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {
        if (kernel % 2 == 0) throw std::invalid_argument("Conv2d: kernel must be odd");
    }

    void initialize(std::mt19937_64& rng, double gain = 2.0) {
        init_fan_in(weight_, static_cast<std::size_t>(in_) * k_ * k_, rng, gain);
        std::fill(bias_.value.begin(), bias_.value.end(), T(0));
    }

    [[nodiscard]] int in_channels() const { return in_; }
    [[nodiscard]] int out_channels() const { return out_; }
    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }
    [[nodiscard]] const Parameter<T>& weight() const { return weight_; }
    [[nodiscard]] const Parameter<T>& bias() const { return bias_; }

    Tensor<T> forward(const Tensor<T>& x, Conv2dCache<T>& cache) const {
        if (x.channels != in_) throw std::invalid_argument("Conv2d " + weight_.name + ": channel mismatch");
        cache.height = x.height;
        cache.width = x.width;
        im2col(x, cache.columns);
        Tensor<T> y(out_, x.height, x.width);
        const RowMatrix<T> w = weight_matrix();
        RowMatrix<T> out;
        out.noalias() = w * cache.columns;
        std::copy(out.data(), out.data() + out.size(), y.data.data());
        for (int c = 0; c < out_; ++c) {
            T* row = y.data.data() + c * y.plane();
            for (std::size_t i = 0; i < y.plane(); ++i) row[i] += bias_.value[c];
        }
        return y;
    }

    /// Accumulates weight/bias gradients; writes the input gradient when dx != nullptr.
    void backward(const Conv2dCache<T>& cache, const Tensor<T>& dy, Tensor<T>* dx) {
        const auto cols = static_cast<Eigen::Index>(dy.plane());
        const RowMatrix<T> g = ConstMatrixMap<T>(dy.data.data(), out_, cols);
        RowMatrix<T> dw;
        dw.noalias() = g * cache.columns.transpose();
        for (Eigen::Index i = 0; i < dw.size(); ++i) weight_.grad[i] += dw.data()[i];
        for (int c = 0; c < out_; ++c) {
            T sum = T(0);
            const T* row = dy.data.data() + c * dy.plane();
            for (std::size_t i = 0; i < dy.plane(); ++i) sum += row[i];
            bias_.grad[c] += sum;
        }
        if (dx) {
            const RowMatrix<T> w = weight_matrix();
            RowMatrix<T> dcols;
            dcols.noalias() = w.transpose() * g;
            *dx = Tensor<T>(in_, cache.height, cache.width);
            col2im(dcols, *dx);
        }
    }

    [[nodiscard]] std::size_t macs(int h, int w) const {
        return static_cast<std::size_t>(out_) * in_ * k_ * k_ * h * w;
    }

private:
    // Eigen kernels pick vector paths from operand alignment, so they only see
    // Eigen-owned (aligned) matrices; this keeps results independent of where
    // std::vector storage happens to land.
    [[nodiscard]] RowMatrix<T> weight_matrix() const {
        return ConstMatrixMap<T>(weight_.value.data(), out_, static_cast<Eigen::Index>(in_) * k_ * k_);
    }

    void im2col(const Tensor<T>& x, RowMatrix<T>& cols) const {
        const int h = x.height, w = x.width, pad = k_ / 2;
        cols.resize(static_cast<Eigen::Index>(in_) * k_ * k_, static_cast<Eigen::Index>(h) * w);
        for (int c = 0; c < in_; ++c) {
            const T* src = x.data.data() + c * x.plane();
            for (int ky = 0; ky < k_; ++ky) {
                for (int kx = 0; kx < k_; ++kx) {
                    T* row = cols.data() + (static_cast<std::size_t>(c) * k_ * k_ + ky * k_ + kx) * h * w;
                    const int dy = ky - pad, dx = kx - pad;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + dy;
                        T* dst = row + static_cast<std::size_t>(y) * w;
                        if (sy < 0 || sy >= h) {
                            std::fill(dst, dst + w, T(0));
                            continue;
                        }
                        const T* srow = src + static_cast<std::size_t>(sy) * w;
                        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                        std::fill(dst, dst + x0, T(0));
                        std::copy(srow + x0 + dx, srow + x1 + dx, dst + x0);
                        std::fill(dst + x1, dst + w, T(0));
                    }
                }
            }
        }
    }

    void col2im(const RowMatrix<T>& cols, Tensor<T>& dx) const {
        const int h = dx.height, w = dx.width, pad = k_ / 2;
        for (int c = 0; c < in_; ++c) {
            T* dst = dx.data.data() + c * dx.plane();
            for (int ky = 0; ky < k_; ++ky) {
                for (int kx = 0; kx < k_; ++kx) {
                    const T* row = cols.data() + (static_cast<std::size_t>(c) * k_ * k_ + ky * k_ + kx) * h * w;
                    const int dy = ky - pad, dxo = kx - pad;
                    for (int y = 0; y < h; ++y) {
                        const int sy = y + dy;
                        if (sy < 0 || sy >= h) continue;
                        const T* src = row + static_cast<std::size_t>(y) * w;
                        T* drow = dst + static_cast<std::size_t>(sy) * w;
                        const int x0 = std::max(0, -dxo), x1 = std::min(w, w - dxo);
                        for (int x = x0; x < x1; ++x) drow[x + dxo] += src[x];
                    }
                }
            }
        }
    }

    int in_ = 0;
    int out_ = 0;
    int k_ = 1;
    Parameter<T> weight_;
    Parameter<T> bias_;
};

// ---------------------------------------------------------------------------

template<typename T>
void relu_inplace(Tensor<T>& x) {
    for (auto& v : x.data) v = v > T(0) ? v : T(0);
}

/// dy ⊙ 1[y > 0], where y is the ReLU output.
template<typename T>
void relu_backward_inplace(const Tensor<T>& y, Tensor<T>& dy) {
    for (std::size_t i = 0; i < dy.data.size(); ++i) {
        if (!(y.data[i] > T(0))) dy.data[i] = T(0);
    }
}

struct MaxPoolCache {
    std::vector<std::uint32_t> argmax;  // flat input index per output element
    int in_height = 0;
    int in_width = 0;
};

/// 2×2 max pooling, stride 2 (input dims must be even).
template<typename T>
Tensor<T> maxpool2(const Tensor<T>& x, MaxPoolCache& cache) {
    if (x.height % 2 || x.width % 2) throw std::invalid_argument("maxpool2: odd spatial size");
    Tensor<T> y(x.channels, x.height / 2, x.width / 2);
    cache.argmax.resize(y.data.size());
    cache.in_height = x.height;
    cache.in_width = x.width;
    std::size_t o = 0;
    for (int c = 0; c < x.channels; ++c) {
        for (int oy = 0; oy < y.height; ++oy) {
            for (int ox = 0; ox < y.width; ++ox, ++o) {
                std::size_t best = c * x.plane() + static_cast<std::size_t>(2 * oy) * x.width + 2 * ox;
                T best_v = x.data[best];
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const std::size_t idx =
                            c * x.plane() + static_cast<std::size_t>(2 * oy + dy) * x.width + 2 * ox + dx;
                        if (x.data[idx] > best_v) {
                            best_v = x.data[idx];
                            best = idx;
                        }
                    }
                }
                y.data[o] = best_v;
                cache.argmax[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return y;
}

template<typename T>
Tensor<T> maxpool2_backward(const MaxPoolCache& cache, const Tensor<T>& dy) {
    Tensor<T> dx(dy.channels, cache.in_height, cache.in_width);
    for (std::size_t o = 0; o < dy.data.size(); ++o) dx.data[cache.argmax[o]] += dy.data[o];
    return dx;
}

/**
 * Bilinear resampling weights along one axis, half-pixel centres with edge
 * clamping (the align_corners=false convention).
 */
struct LinearAxis {
    std::vector<int> lo;
    std::vector<int> hi;
    std::vector<double> frac;

    LinearAxis(int in, int out) : lo(out), hi(out), frac(out) {
        const double scale = static_cast<double>(in) / out;
        for (int i = 0; i < out; ++i) {
            const double src = std::clamp((i + 0.5) * scale - 0.5, 0.0, in - 1.0);
            lo[i] = static_cast<int>(src);
            hi[i] = std::min(lo[i] + 1, in - 1);
            frac[i] = src - lo[i];
        }
    }
};

template<typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int out_h, int out_w) {
    if (x.height == out_h && x.width == out_w) return x;
    const LinearAxis ay(x.height, out_h), ax(x.width, out_w);
    Tensor<T> y(x.channels, out_h, out_w);
    for (int c = 0; c < x.channels; ++c) {
        for (int oy = 0; oy < out_h; ++oy) {
            const T wy = static_cast<T>(ay.frac[oy]);
            for (int ox = 0; ox < out_w; ++ox) {
                const T wx = static_cast<T>(ax.frac[ox]);
                const T top = x(c, ay.lo[oy], ax.lo[ox]) * (T(1) - wx) + x(c, ay.lo[oy], ax.hi[ox]) * wx;
                const T bot = x(c, ay.hi[oy], ax.lo[ox]) * (T(1) - wx) + x(c, ay.hi[oy], ax.hi[ox]) * wx;
                y(c, oy, ox) = top * (T(1) - wy) + bot * wy;
            }
        }
    }
    return y;
}

template<typename T>
Tensor<T> upsample_bilinear_backward(const Tensor<T>& dy, int in_h, int in_w) {
    if (dy.height == in_h && dy.width == in_w) return dy;
    const LinearAxis ay(in_h, dy.height), ax(in_w, dy.width);
    Tensor<T> dx(dy.channels, in_h, in_w);
    for (int c = 0; c < dy.channels; ++c) {
        for (int oy = 0; oy < dy.height; ++oy) {
            const T wy = static_cast<T>(ay.frac[oy]);
            for (int ox = 0; ox < dy.width; ++ox) {
                const T wx = static_cast<T>(ax.frac[ox]);
                const T g = dy(c, oy, ox);
                dx(c, ay.lo[oy], ax.lo[ox]) += g * (T(1) - wy) * (T(1) - wx);
                dx(c, ay.lo[oy], ax.hi[ox]) += g * (T(1) - wy) * wx;
                dx(c, ay.hi[oy], ax.lo[ox]) += g * wy * (T(1) - wx);
                dx(c, ay.hi[oy], ax.hi[ox]) += g * wy * wx;
            }
        }
    }
    return dx;
}

template<typename T>
void sigmoid_inplace(std::span<T> v) {
    for (auto& x : v) x = T(1) / (T(1) + std::exp(-x));
}

/// Softmax with max subtraction.
template<typename T>
std::vector<T> softmax(std::span<const T> logits) {
    std::vector<T> out(logits.size());
    const T mx = *std::max_element(logits.begin(), logits.end());
    T sum = T(0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

/// d loss / d logits from d loss / d p for p = softmax(logits).
template<typename T>
std::vector<T> softmax_backward(std::span<const T> p, std::span<const T> dp) {
    T dot = T(0);
    for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * dp[i];
    std::vector<T> dl(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) dl[i] = p[i] * (dp[i] - dot);
    return dl;
}

/// Fully connected layer on a flat vector.
template<typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, int in, int out)
        : in_(in), out_(out), weight_(name + ".weight", static_cast<std::size_t>(in) * out),
          bias_(name + ".bias", static_cast<std::size_t>(out)) {}

    void initialize(std::mt19937_64& rng, double gain = 1.0) {
        init_fan_in(weight_, static_cast<std::size_t>(in_), rng, gain);
        std::fill(bias_.value.begin(), bias_.value.end(), T(0));
    }

    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

    [[nodiscard]] std::vector<T> forward(std::span<const T> x) const {
        std::vector<T> y(bias_.value);
        for (int o = 0; o < out_; ++o) {
            const T* w = weight_.value.data() + static_cast<std::size_t>(o) * in_;
            for (int i = 0; i < in_; ++i) y[o] += w[i] * x[i];
        }
        return y;
    }

    std::vector<T> backward(std::span<const T> x, std::span<const T> dy) {
        std::vector<T> dx(in_, T(0));
        for (int o = 0; o < out_; ++o) {
            const T* w = weight_.value.data() + static_cast<std::size_t>(o) * in_;
            T* gw = weight_.grad.data() + static_cast<std::size_t>(o) * in_;
            for (int i = 0; i < in_; ++i) {
                gw[i] += dy[o] * x[i];
                dx[i] += dy[o] * w[i];
            }
            bias_.grad[o] += dy[o];
        }
        return dx;
    }

private:
    int in_ = 0;
    int out_ = 0;
    Parameter<T> weight_;
    Parameter<T> bias_;
};

// ---------------------------------------------------------------------------

struct AdamHyper {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias-corrected first and second moment estimates.
template<typename T>
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Parameter<T>*> params, AdamHyper hyper) : params_(std::move(params)), hyper_(hyper) {
        for (auto* p : params_) {
            first_.emplace_back(p->value.size(), T(0));
            second_.emplace_back(p->value.size(), T(0));
        }
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

    /// Points the optimiser at an equally shaped parameter set (after the owner was copied or moved).
    void rebind(std::vector<Parameter<T>*> params) {
        if (params.size() != params_.size()) throw std::invalid_argument("Adam::rebind: parameter count differs");
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (params[k]->value.size() != first_[k].size()) throw std::invalid_argument("Adam::rebind: shape differs");
        }
        params_ = std::move(params);
    }

    void step() {
        ++steps_;
        const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(steps_));
        const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
        const T lr = static_cast<T>(hyper_.learning_rate);
        const T eps = static_cast<T>(hyper_.epsilon);
        const T ic1 = static_cast<T>(1.0 / c1), ic2 = static_cast<T>(1.0 / c2);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = *params_[k];
            auto& m = first_[k];
            auto& v = second_[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const T g = p.grad[i];
                m[i] = b1 * m[i] + (T(1) - b1) * g;
                v[i] = b2 * v[i] + (T(1) - b2) * g * g;
                p.value[i] -= lr * (m[i] * ic1) / (std::sqrt(v[i] * ic2) + eps);
            }
        }
    }

    [[nodiscard]] std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t s) { steps_ = s; }
    [[nodiscard]] const AdamHyper& hyper() const { return hyper_; }
    void set_learning_rate(double lr) { hyper_.learning_rate = lr; }

    std::vector<std::vector<T>>& first_moments() { return first_; }
    std::vector<std::vector<T>>& second_moments() { return second_; }
    [[nodiscard]] const std::vector<std::vector<T>>& first_moments() const { return first_; }
    [[nodiscard]] const std::vector<std::vector<T>>& second_moments() const { return second_; }

private:
    std::vector<Parameter<T>*> params_;
    AdamHyper hyper_;
    std::vector<std::vector<T>> first_;
    std::vector<std::vector<T>> second_;
    std::uint64_t steps_ = 0;
};

}  // namespace styleseg::nn
