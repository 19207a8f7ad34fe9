#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace styleseg {

/// Thrown when two grids that must share spatial dimensions do not.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/**
 * Row-major H×W grid of values.
 */
template<typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> values;

    Grid() = default;
    Grid(int h, int w, T fill = T{}) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
    Grid(int h, int w, std::vector<T> v) : height(h), width(w), values(std::move(v)) {
        if (values.size() != static_cast<std::size_t>(h) * w) {
            throw DimensionError("grid value count does not match " + std::to_string(h) + "x" + std::to_string(w));
        }
    }

    [[nodiscard]] std::size_t size() const { return values.size(); }
    [[nodiscard]] bool empty() const { return values.empty(); }

    T& operator()(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
    const T& operator()(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

    [[nodiscard]] bool contains(int y, int x) const { return y >= 0 && x >= 0 && y < height && x < width; }

    [[nodiscard]] bool same_shape(const auto& other) const { return height == other.height && width == other.width; }

    friend bool operator==(const Grid&, const Grid&) = default;
};

using BinaryGrid = Grid<std::uint8_t>;

template<typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
    if (a.height != b.height || a.width != b.width) {
        throw DimensionError(std::string(what) + ": dimension mismatch " + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
    }
}

inline std::size_t foreground_count(const BinaryGrid& g) {
    std::size_t n = 0;
    for (auto v : g.values) n += v != 0;
    return n;
}

/// RGB image with interleaved channels, values in [0,1].
struct ImageSample {
    std::string id;
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // (y * width + x) * 3 + c

    [[nodiscard]] float at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

struct BinaryMask {
    BinaryGrid grid;
    std::optional<std::string> source_label;
    std::optional<int> planted_style;

    [[nodiscard]] int height() const { return grid.height; }
    [[nodiscard]] int width() const { return grid.width; }
};

struct AnnotatedSample {
    ImageSample image;
    std::vector<BinaryMask> masks;
    std::string split;
};

/**
 * The M per-style probabilistic masks produced by the segmentation model.
 *
 * Storage is channel-major: values[(j * height + y) * width + x]. Channel j is
 * style j for the whole lifetime of a model.
 */
template<typename T>
struct SoftMaskStack {
    int height = 0;
    int width = 0;
    int styles = 0;
    std::vector<T> values;

    SoftMaskStack() = default;
    SoftMaskStack(int h, int w, int m, T fill = T{})
        : height(h), width(w), styles(m), values(static_cast<std::size_t>(h) * w * m, fill) {}

    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }

    std::span<T> channel(int j) { return {values.data() + j * plane(), plane()}; }
    [[nodiscard]] std::span<const T> channel(int j) const { return {values.data() + j * plane(), plane()}; }

    void set_channel(int j, std::span<const T> src) {
        if (src.size() != plane()) throw DimensionError("set_channel: plane size mismatch");
        std::copy(src.begin(), src.end(), values.begin() + static_cast<std::ptrdiff_t>(j * plane()));
    }
};

/// Threshold one channel of a stack into a binary grid (value >= threshold is foreground).
template<typename T>
BinaryGrid threshold_channel(const SoftMaskStack<T>& stack, int j, double threshold) {
    BinaryGrid out(stack.height, stack.width);
    auto ch = stack.channel(j);
    for (std::size_t i = 0; i < ch.size(); ++i) out.values[i] = static_cast<double>(ch[i]) >= threshold ? 1 : 0;
    return out;
}

}  // namespace styleseg
