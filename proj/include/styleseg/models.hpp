#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"
#include "losses.hpp"
#include "nn.hpp"

/**
 * @file models.hpp
 * @brief The M-headed segmentation network and the 4-channel style classifier.
 */

namespace styleseg {

class ModelConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct SegModelConfig {
    int styles = 2;
    int in_channels = 3;
    int base_width = 8;
    int n_stages = 4;
    int convs_per_stage = 2;
    int max_width = 64;
    int resolution = 64;

    void validate() const {
        if (styles < 1) throw ModelConfigError("segmentation model: styles must be >= 1");
        if (in_channels != 3) throw ModelConfigError("segmentation model: in_channels must be 3");
        if (n_stages < 2) throw ModelConfigError("segmentation model: n_stages must be >= 2");
        if (base_width < 1 || max_width < base_width) throw ModelConfigError("segmentation model: bad widths");
        if (convs_per_stage < 1) throw ModelConfigError("segmentation model: convs_per_stage must be >= 1");
        if (resolution < 1 || resolution % (1 << (n_stages - 1)) != 0) {
            throw ModelConfigError("segmentation model: resolution must be divisible by 2^(n_stages-1)");
        }
    }

    [[nodiscard]] int stage_width(int s) const { return std::min(max_width, base_width << s); }
    friend bool operator==(const SegModelConfig&, const SegModelConfig&) = default;
};

struct ClsModelConfig {
    int styles = 2;
    int in_channels = 4;
    int base_width = 8;
    int n_stages = 4;
    int max_width = 64;
    int resolution = 64;

    void validate() const {
        if (styles < 2) throw ModelConfigError("style classifier: styles must be >= 2");
        if (in_channels != 4) throw ModelConfigError("style classifier: in_channels must be 4");
        if (n_stages < 1) throw ModelConfigError("style classifier: n_stages must be >= 1");
        if (base_width < 1 || max_width < base_width) throw ModelConfigError("style classifier: bad widths");
        if (resolution < 1 || resolution % (1 << (n_stages - 1)) != 0) {
            throw ModelConfigError("style classifier: resolution must be divisible by 2^(n_stages-1)");
        }
    }

    [[nodiscard]] int stage_width(int s) const { return std::min(max_width, base_width << s); }
    friend bool operator==(const ClsModelConfig&, const ClsModelConfig&) = default;
};

/// CHW tensor of an RGB image, centred to [-0.5, 0.5].
template<typename T>
nn::Tensor<T> image_tensor(const ImageSample& img, int extra_channels = 0) {
    nn::Tensor<T> t(3 + extra_channels, img.height, img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            for (int c = 0; c < 3; ++c) t(c, y, x) = static_cast<T>(img.at(y, x, c)) - T(0.5);
        }
    }
    return t;
}

/**
 * Multi-scale fully convolutional segmenter. Each encoder stage's features are
 * resized bilinearly to full resolution, concatenated, and mapped by a 1×1
 * convolution plus sigmoid to M probability maps.
 */
template<typename T>
class SegmentationModel {
public:
    struct StageCache {
        nn::MaxPoolCache pool;
        std::vector<nn::Conv2dCache<T>> convs;
        std::vector<nn::Tensor<T>> activations;  // post-ReLU output of every conv
    };

    struct Cache {
        std::vector<StageCache> stages;
        nn::Conv2dCache<T> head;
        SoftMaskStack<T> output;
    };

    SegmentationModel() = default;
    explicit SegmentationModel(SegModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        int in = cfg_.in_channels;
        int fused = 0;
        for (int s = 0; s < cfg_.n_stages; ++s) {
            const int w = cfg_.stage_width(s);
            std::vector<nn::Conv2d<T>> convs;
            for (int c = 0; c < cfg_.convs_per_stage; ++c) {
                convs.emplace_back("seg.stage" + std::to_string(s) + ".conv" + std::to_string(c), in, w, 3);
                in = w;
            }
            stages_.push_back(std::move(convs));
            fused += w;
        }
        head_ = nn::Conv2d<T>("seg.head", fused, cfg_.styles, 1);
        initialize(seed);
    }

    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& st : stages_) {
            for (auto& c : st) c.initialize(rng);
        }
        head_.initialize(rng, 1.0);
    }

    [[nodiscard]] const SegModelConfig& config() const { return cfg_; }

    std::vector<nn::Parameter<T>*> parameters() {
        std::vector<nn::Parameter<T>*> out;
        for (auto& st : stages_) {
            for (auto& c : st) {
                out.push_back(&c.weight());
                out.push_back(&c.bias());
            }
        }
        out.push_back(&head_.weight());
        out.push_back(&head_.bias());
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& st : stages_) {
            for (const auto& c : st) n += c.weight().value.size() + c.bias().value.size();
        }
        return n + head_.weight().value.size() + head_.bias().value.size();
    }

    SoftMaskStack<T> forward(const nn::Tensor<T>& x, Cache& cache) const {
        if (x.height != cfg_.resolution || x.width != cfg_.resolution || x.channels != cfg_.in_channels) {
            throw DimensionError("segmentation model expects " + std::to_string(cfg_.in_channels) + "x" +
                                 std::to_string(cfg_.resolution) + "x" + std::to_string(cfg_.resolution) +
                                 " input, got " + std::to_string(x.channels) + "x" + std::to_string(x.height) +
                                 "x" + std::to_string(x.width));
        }
        const int H = x.height, W = x.width;
        cache.stages.assign(stages_.size(), {});
        nn::Tensor<T> fused(head_.in_channels(), H, W);
        int offset = 0;
        const nn::Tensor<T>* current = &x;
        nn::Tensor<T> pooled;
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            auto& sc = cache.stages[s];
            if (s > 0) {
                pooled = nn::maxpool2(*current, sc.pool);
                current = &pooled;
            }
            sc.convs.resize(stages_[s].size());
            for (std::size_t c = 0; c < stages_[s].size(); ++c) {
                auto act = stages_[s][c].forward(*current, sc.convs[c]);
                nn::relu_inplace(act);
                sc.activations.push_back(std::move(act));
                current = &sc.activations.back();
            }
            const auto up = nn::upsample_bilinear(*current, H, W);
            std::copy(up.data.begin(), up.data.end(), fused.data.begin() + static_cast<std::ptrdiff_t>(offset * fused.plane()));
            offset += up.channels;
        }
        auto logits = head_.forward(fused, cache.head);
        nn::sigmoid_inplace(std::span<T>(logits.data));
        cache.output = SoftMaskStack<T>(H, W, cfg_.styles);
        cache.output.values = std::move(logits.data);
        return cache.output;
    }

    [[nodiscard]] SoftMaskStack<T> forward(const ImageSample& image) const {
        Cache cache;
        return forward(image_tensor<T>(image), cache);
    }

    [[nodiscard]] std::vector<SoftMaskStack<T>> forward_batch(std::span<const ImageSample> images) const {
        std::vector<SoftMaskStack<T>> out;
        out.reserve(images.size());
        for (const auto& img : images) out.push_back(forward(img));
        return out;
    }

    /// Accumulates parameter gradients given d loss / d output probabilities.
    void backward(const Cache& cache, std::span<const T> d_output) {
        const int H = cache.output.height, W = cache.output.width;
        nn::Tensor<T> d_logits(cfg_.styles, H, W);
        for (std::size_t i = 0; i < d_logits.data.size(); ++i) {
            const T y = cache.output.values[i];
            d_logits.data[i] = d_output[i] * y * (T(1) - y);
        }
        nn::Tensor<T> d_fused;
        head_.backward(cache.head, d_logits, &d_fused);

        int offset = head_.in_channels();
        nn::Tensor<T> d_from_next;  // gradient w.r.t. this stage's output via the next stage's pooling
        for (int s = static_cast<int>(stages_.size()) - 1; s >= 0; --s) {
            const auto& sc = cache.stages[s];
            const auto& out = sc.activations.back();
            offset -= out.channels;
            nn::Tensor<T> d_up(out.channels, H, W);
            std::copy(d_fused.data.begin() + static_cast<std::ptrdiff_t>(offset * d_fused.plane()),
                      d_fused.data.begin() + static_cast<std::ptrdiff_t>((offset + out.channels) * d_fused.plane()),
                      d_up.data.begin());
            auto d_out = nn::upsample_bilinear_backward(d_up, out.height, out.width);
            if (!d_from_next.data.empty()) {
                for (std::size_t i = 0; i < d_out.data.size(); ++i) d_out.data[i] += d_from_next.data[i];
            }
            for (int c = static_cast<int>(stages_[s].size()) - 1; c >= 0; --c) {
                nn::relu_backward_inplace(sc.activations[c], d_out);
                const bool need_input = c > 0 || s > 0;
                nn::Tensor<T> d_in;
                stages_[s][c].backward(sc.convs[c], d_out, need_input ? &d_in : nullptr);
                d_out = std::move(d_in);
            }
            if (s > 0) d_from_next = nn::maxpool2_backward(sc.pool, d_out);
        }
    }

private:
    SegModelConfig cfg_;
    std::vector<std::vector<nn::Conv2d<T>>> stages_;
    nn::Conv2d<T> head_;
};

/**
 * Style classifier f_c: the image and one mask concatenated to 4 channels,
 * conv/ReLU/max-pool stages, global average pooling, a linear layer and an
 * M-way softmax.
 */
template<typename T>
class StyleClassifier {
public:
    struct Cache {
        std::vector<nn::Conv2dCache<T>> convs;
        std::vector<nn::Tensor<T>> activations;
        std::vector<nn::MaxPoolCache> pools;
        std::vector<T> pooled;
        std::vector<T> probs;
    };

    StyleClassifier() = default;
    explicit StyleClassifier(ClsModelConfig cfg, std::uint64_t seed = 0) : cfg_(cfg) {
        cfg_.validate();
        int in = cfg_.in_channels;
        for (int s = 0; s < cfg_.n_stages; ++s) {
            convs_.emplace_back("cls.stage" + std::to_string(s), in, cfg_.stage_width(s), 3);
            in = cfg_.stage_width(s);
        }
        fc_ = nn::Linear<T>("cls.fc", in, cfg_.styles);
        initialize(seed);
    }

    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        for (auto& c : convs_) c.initialize(rng);
        fc_.initialize(rng, 1.0);
    }

    [[nodiscard]] const ClsModelConfig& config() const { return cfg_; }

    std::vector<nn::Parameter<T>*> parameters() {
        std::vector<nn::Parameter<T>*> out;
        for (auto& c : convs_) {
            out.push_back(&c.weight());
            out.push_back(&c.bias());
        }
        out.push_back(&fc_.weight());
        out.push_back(&fc_.bias());
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& c : convs_) n += c.weight().value.size() + c.bias().value.size();
        return n + static_cast<std::size_t>(convs_.back().out_channels() + 1) * cfg_.styles;
    }

    static nn::Tensor<T> input_tensor(const ImageSample& image, const BinaryGrid& mask) {
        require_same_shape(image, mask, "style classifier input");
        auto t = image_tensor<T>(image, 1);
        for (int y = 0; y < mask.height; ++y) {
            for (int x = 0; x < mask.width; ++x) t(3, y, x) = mask(y, x) ? T(1) : T(0);
        }
        return t;
    }

    StyleProbabilities<T> forward(const nn::Tensor<T>& x, Cache& cache) const {
        if (x.height != cfg_.resolution || x.width != cfg_.resolution || x.channels != cfg_.in_channels) {
            throw DimensionError("style classifier expects " + std::to_string(cfg_.in_channels) + "x" +
                                 std::to_string(cfg_.resolution) + "x" + std::to_string(cfg_.resolution) + " input");
        }
        cache.convs.assign(convs_.size(), {});
        cache.activations.clear();
        cache.pools.assign(convs_.size(), {});
        nn::Tensor<T> current = x;
        for (std::size_t s = 0; s < convs_.size(); ++s) {
            auto act = convs_[s].forward(current, cache.convs[s]);
            nn::relu_inplace(act);
            cache.activations.push_back(act);
            current = s + 1 < convs_.size() ? nn::maxpool2(act, cache.pools[s]) : std::move(act);
        }
        cache.pooled.assign(current.channels, T(0));
        const T inv = T(1) / static_cast<T>(current.plane());
        for (int c = 0; c < current.channels; ++c) {
            T sum = T(0);
            for (std::size_t i = 0; i < current.plane(); ++i) sum += current.data[c * current.plane() + i];
            cache.pooled[c] = sum * inv;
        }
        const auto logits = fc_.forward(cache.pooled);
        cache.probs = nn::softmax<T>(logits);
        StyleProbabilities<T> p;
        p.p = cache.probs;
        return p;
    }

    [[nodiscard]] StyleProbabilities<T> forward(const ImageSample& image, const BinaryGrid& mask) const {
        Cache cache;
        return forward(input_tensor(image, mask), cache);
    }

    void backward(const Cache& cache, std::span<const T> d_probs) {
        const auto d_logits = nn::softmax_backward<T>(cache.probs, d_probs);
        const auto d_pooled = fc_.backward(cache.pooled, d_logits);
        const auto& last = cache.activations.back();
        nn::Tensor<T> d_act(last.channels, last.height, last.width);
        const T inv = T(1) / static_cast<T>(last.plane());
        for (int c = 0; c < last.channels; ++c) {
            std::fill(d_act.data.begin() + static_cast<std::ptrdiff_t>(c * last.plane()),
                      d_act.data.begin() + static_cast<std::ptrdiff_t>((c + 1) * last.plane()), d_pooled[c] * inv);
        }
        for (int s = static_cast<int>(convs_.size()) - 1; s >= 0; --s) {
            nn::relu_backward_inplace(cache.activations[s], d_act);
            nn::Tensor<T> d_in;
            convs_[s].backward(cache.convs[s], d_act, s > 0 ? &d_in : nullptr);
            if (s > 0) d_act = nn::maxpool2_backward(cache.pools[s - 1], d_in);
        }
    }

private:
    ClsModelConfig cfg_;
    std::vector<nn::Conv2d<T>> convs_;
    nn::Linear<T> fc_;
};

}  // namespace styleseg
