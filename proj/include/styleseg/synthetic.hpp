#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "data.hpp"
#include "diagnostics.hpp"
#include "grid.hpp"
#include "image_io.hpp"

/**
 * @file synthetic.hpp
 * @brief Procedural multi-style corpus: one lesion shape per image, segmented
 * by several synthetic annotators whose styles are parametric.
 */

namespace styleseg {

class SynthConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Parametric annotation style applied to a base contour.
struct StyleParams {
    int margin = 0;                     // dilation (+) / erosion (−) radius in pixels
    double jaggedness_amplitude = 0.0;  // radial perturbation amplitude in pixels
    int jaggedness_frequency = 8;       // cycles around the contour
    int smoothing_radius = 0;           // majority-filter radius in pixels
    std::uint64_t seed = 0;
    std::string label;                  // preference label written to the manifest

    friend bool operator==(const StyleParams&, const StyleParams&) = default;
};

struct SynthConfig {
    std::uint64_t seed = 0;
    int n_images = 200;
    int resolution = 64;
    double coverage_p = 1.0;
    double val_fraction = 0.15;
    double test_fraction = 0.15;
    double noise_sigma = 0.05;
    std::vector<StyleParams> styles;

    void validate() const {
        if (styles.size() < 2) throw SynthConfigError("synth: at least 2 styles are required");
        for (std::size_t i = 0; i < styles.size(); ++i) {
            for (std::size_t j = i + 1; j < styles.size(); ++j) {
                auto key = [](const StyleParams& s) {
                    return std::tie(s.margin, s.jaggedness_amplitude, s.jaggedness_frequency, s.smoothing_radius);
                };
                if (key(styles[i]) == key(styles[j])) throw SynthConfigError("synth: styles must be distinct");
            }
        }
        if (n_images < 1) throw SynthConfigError("synth: n_images must be >= 1");
        if (resolution < 32) throw SynthConfigError("synth: resolution must be >= 32");
        if (!(coverage_p > 0.0 && coverage_p <= 1.0)) throw SynthConfigError("synth: coverage_p must be in (0,1]");
        if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1.0) {
            throw SynthConfigError("synth: val_fraction + test_fraction must be in [0,1)");
        }
        if (noise_sigma < 0) throw SynthConfigError("synth: noise_sigma must be >= 0");
        for (const auto& s : styles) {
            if (std::abs(s.margin) >= resolution / 4) throw SynthConfigError("synth: |margin| must be < resolution/4");
            if (s.jaggedness_amplitude < 0) throw SynthConfigError("synth: jaggedness_amplitude must be >= 0");
            if (s.jaggedness_frequency < 1) throw SynthConfigError("synth: jaggedness_frequency must be >= 1");
            if (s.smoothing_radius < 0) throw SynthConfigError("synth: smoothing_radius must be >= 0");
            if (s.label.find_first_of(",\r\n") != std::string::npos) {
                throw SynthConfigError("synth: label must not contain commas");
            }
        }
    }
};

/// SplitMix64 finaliser; used to derive independent per-image seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

namespace detail {

inline double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Box–Muller; engine-defined so runs replay identically across standard libraries.
inline double gaussian(std::mt19937_64& rng) {
    const double u1 = std::max(uniform01(rng), 1e-300);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::vector<std::pair<int, int>> disc_offsets(int radius) {
    std::vector<std::pair<int, int>> out;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            if (dy * dy + dx * dx <= radius * radius) out.emplace_back(dy, dx);
        }
    }
    return out;
}

inline BinaryGrid dilate(const BinaryGrid& src, int radius) {
    const auto se = disc_offsets(radius);
    BinaryGrid out(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            if (!src(y, x)) continue;
            for (auto [dy, dx] : se) {
                if (out.contains(y + dy, x + dx)) out(y + dy, x + dx) = 1;
            }
        }
    }
    return out;
}

inline BinaryGrid erode(const BinaryGrid& src, int radius) {
    const auto se = disc_offsets(radius);
    BinaryGrid out(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            if (!src(y, x)) continue;
            bool keep = true;
            for (auto [dy, dx] : se) {
                if (!src.contains(y + dy, x + dx) || !src(y + dy, x + dx)) {
                    keep = false;
                    break;
                }
            }
            out(y, x) = keep;
        }
    }
    return out;
}

/// Majority vote over a disc of the given radius.
inline BinaryGrid majority_smooth(const BinaryGrid& src, int radius) {
    const auto se = disc_offsets(radius);
    BinaryGrid out(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            int on = 0;
            for (auto [dy, dx] : se) on += src.contains(y + dy, x + dx) && src(y + dy, x + dx);
            out(y, x) = 2 * on > static_cast<int>(se.size());
        }
    }
    return out;
}

inline std::pair<double, double> centroid(const BinaryGrid& g) {
    double sy = 0, sx = 0, n = 0;
    for (int y = 0; y < g.height; ++y) {
        for (int x = 0; x < g.width; ++x) {
            if (g(y, x)) {
                sy += y;
                sx += x;
                n += 1;
            }
        }
    }
    return {sy / n, sx / n};
}

/// Moves the boundary radially (about the centroid) by amplitude·sin(frequency·θ + phase).
inline BinaryGrid radial_perturb(const BinaryGrid& src, double amplitude, int frequency, double phase) {
    const auto [cy, cx] = centroid(src);
    BinaryGrid out(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double r = std::hypot(dy, dx);
            if (r < 1e-9) {
                out(y, x) = src(y, x);
                continue;
            }
            const double theta = std::atan2(dy, dx);
            const double shift = amplitude * std::sin(frequency * theta + phase);
            const double rs = std::max(0.0, r - shift);
            const int sy = static_cast<int>(std::lround(cy + dy / r * rs));
            const int sx = static_cast<int>(std::lround(cx + dx / r * rs));
            out(y, x) = src.contains(sy, sx) ? src(sy, sx) : 0;
        }
    }
    return out;
}

}  // namespace detail

/**
 * A filled star-convex blob: radius R(θ) = R0·(1 + Σ_k a_k cos(kθ + φ_k)) for
 * k = 2..4 with a_k ≤ 0.08. Area fraction is drawn from [0.15, 0.35] (always
 * within [0.05, 0.40]); the centre lies in the middle half of the frame and is
 * kept far enough from the border to allow a few pixels of dilation.
 */
inline BinaryMask generate_base_shape(std::uint64_t seed, int resolution) {
    resolution = std::max(resolution, 32);
    std::mt19937_64 rng(mix_seed(seed, 0x5ba5e));
    const double frac = detail::uniform(rng, 0.15, 0.35);
    double amp[3], phase[3], amp_sq = 0.0, amp_sum = 0.0;
    for (int k = 0; k < 3; ++k) {
        amp[k] = detail::uniform(rng, 0.0, 0.08);
        phase[k] = detail::uniform(rng, 0.0, 2.0 * std::numbers::pi);
        amp_sq += amp[k] * amp[k];
        amp_sum += amp[k];
    }
    const double n = resolution;
    double r0 = std::sqrt(frac * n * n / (std::numbers::pi * (1.0 + amp_sq / 2.0)));
    const double reach = r0 * (1.0 + amp_sum) + n / 16.0;
    const double lo = std::max(n / 4.0, reach), hi = std::min(3.0 * n / 4.0, n - 1.0 - reach);
    const double cy = lo <= hi ? detail::uniform(rng, lo, hi) : (n - 1.0) / 2.0;
    const double cx = lo <= hi ? detail::uniform(rng, lo, hi) : (n - 1.0) / 2.0;

    BinaryMask mask;
    for (int attempt = 0; attempt < 32; ++attempt) {
        mask.grid = BinaryGrid(resolution, resolution);
        for (int y = 0; y < resolution; ++y) {
            for (int x = 0; x < resolution; ++x) {
                const double dy = y - cy, dx = x - cx;
                const double theta = std::atan2(dy, dx);
                double rad = 1.0;
                for (int k = 0; k < 3; ++k) rad += amp[k] * std::cos((k + 2) * theta + phase[k]);
                mask.grid(y, x) = std::hypot(dy, dx) <= r0 * rad;
            }
        }
        const double area = static_cast<double>(foreground_count(mask.grid)) / (n * n);
        if (area < 0.05) r0 *= 1.05;
        else if (area > 0.40) r0 *= 0.95;
        else break;
    }
    return mask;
}

/**
 * Renders one annotation style of a base mask: morphological dilation/erosion
 * by |margin|, then a radial boundary perturbation, then majority smoothing.
 * An erosion that would empty the mask is retried with a smaller margin.
 */
inline BinaryMask render_style(const BinaryMask& base, const StyleParams& style) {
    if (foreground_count(base.grid) == 0) throw std::invalid_argument("render_style: base mask is empty");
    BinaryGrid g = base.grid;
    if (style.margin > 0) {
        g = detail::dilate(g, style.margin);
    } else if (style.margin < 0) {
        int r = -style.margin;
        BinaryGrid eroded = detail::erode(g, r);
        while (foreground_count(eroded) == 0 && r > 0) {
            --r;
            eroded = r > 0 ? detail::erode(g, r) : g;
        }
        if (r != -style.margin) {
            warn("render_style: erosion by " + std::to_string(-style.margin) + " empties the mask; reduced to " +
                 std::to_string(r));
        }
        g = std::move(eroded);
    }
    BinaryGrid shaped = g;
    if (style.jaggedness_amplitude > 0.0) {
        std::mt19937_64 rng(mix_seed(style.seed, 0x9a66ed));
        const double phase = detail::uniform(rng, 0.0, 2.0 * std::numbers::pi);
        shaped = detail::radial_perturb(shaped, style.jaggedness_amplitude, style.jaggedness_frequency, phase);
    }
    if (style.smoothing_radius > 0) shaped = detail::majority_smooth(shaped, style.smoothing_radius);
    if (foreground_count(shaped) == 0) {
        warn("render_style: perturbation emptied the mask; using the morphological result");
        shaped = std::move(g);
    }
    BinaryMask out;
    out.grid = std::move(shaped);
    out.source_label = style.label.empty() ? std::nullopt : std::optional<std::string>(style.label);
    return out;
}

/**
 * Image appearance: skin-like background with a smooth shading gradient, a
 * darker textured lesion over the base shape, and Gaussian pixel noise.
 */
inline ImageSample render_lesion_image(const BinaryMask& base, std::uint64_t seed, double noise_sigma,
                                       const std::string& id) {
    std::mt19937_64 rng(mix_seed(seed, 0x1a6e));
    const int h = base.height(), w = base.width();
    ImageSample img{id, h, w, std::vector<float>(static_cast<std::size_t>(h) * w * 3)};
    const double skin[3] = {0.82 + detail::uniform(rng, -0.05, 0.05), 0.64 + detail::uniform(rng, -0.05, 0.05),
                            0.54 + detail::uniform(rng, -0.05, 0.05)};
    const double lesion[3] = {0.42 + detail::uniform(rng, -0.06, 0.06), 0.27 + detail::uniform(rng, -0.05, 0.05),
                              0.20 + detail::uniform(rng, -0.05, 0.05)};
    const double grad_y = detail::uniform(rng, -0.06, 0.06), grad_x = detail::uniform(rng, -0.06, 0.06);
    const double tex_f1 = detail::uniform(rng, 0.3, 0.7), tex_f2 = detail::uniform(rng, 0.3, 0.7);
    const double tex_p1 = detail::uniform(rng, 0, 6.283), tex_p2 = detail::uniform(rng, 0, 6.283);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double shade = grad_y * (y / (h - 1.0) - 0.5) + grad_x * (x / (w - 1.0) - 0.5);
            const bool in = base.grid(y, x) != 0;
            const double texture = in ? 0.05 * std::sin(tex_f1 * x + tex_p1) * std::cos(tex_f2 * y + tex_p2) : 0.0;
            for (int c = 0; c < 3; ++c) {
                const double v = (in ? lesion[c] : skin[c]) + shade + texture + noise_sigma * detail::gaussian(rng);
                img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    return img;
}

struct SynthSummary {
    std::size_t images = 0;
    std::size_t masks = 0;
};

/**
 * Writes a corpus in the standard layout. Each image's content and masks are
 * a function of (master seed, image index) only; splits come from a seeded
 * permutation of image indices.
 */
inline SynthSummary generate_synthetic_corpus(const SynthConfig& cfg, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    cfg.validate();
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");

    const int n = cfg.n_images;
    std::vector<std::string> split(n, "train");
    {
        std::vector<int> order(n);
        for (int i = 0; i < n; ++i) order[i] = i;
        std::mt19937_64 rng(mix_seed(cfg.seed, 0x5b117));
        for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng() % static_cast<std::uint64_t>(i + 1)]);
        auto count = [n](double f) {
            int c = static_cast<int>(std::lround(f * n));
            if (f > 0 && c == 0 && n >= 3) c = 1;
            return c;
        };
        const int n_val = count(cfg.val_fraction), n_test = count(cfg.test_fraction);
        if (n_val + n_test >= n && n > 1) throw SynthConfigError("synth: no images left for the train split");
        for (int i = 0; i < n_val; ++i) split[order[i]] = "val";
        for (int i = n_val; i < n_val + n_test; ++i) split[order[i]] = "test";
    }

    CorpusManifest manifest;
    SynthSummary summary;
    for (int i = 0; i < n; ++i) {
        const std::uint64_t image_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(i));
        char idbuf[32];
        std::snprintf(idbuf, sizeof idbuf, "syn_%05d", i);
        const std::string id = idbuf;

        const auto base = generate_base_shape(image_seed, cfg.resolution);
        write_png(root / "images" / (id + ".png"), to_raster(render_lesion_image(base, image_seed, cfg.noise_sigma, id)));

        std::mt19937_64 rng(mix_seed(image_seed, 0xc0ffee));
        std::vector<std::size_t> chosen;
        while (chosen.empty()) {
            for (std::size_t j = 0; j < cfg.styles.size(); ++j) {
                if (detail::uniform01(rng) < cfg.coverage_p) chosen.push_back(j);
            }
        }
        int k = 0;
        for (const auto j : chosen) {
            StyleParams style = cfg.styles[j];
            style.seed = mix_seed(style.seed, image_seed);
            if (style.label.empty()) style.label = "S" + std::to_string(j);
            const auto mask = render_style(base, style);
            const std::string file = "masks/" + id + "__" + std::to_string(k) + ".png";
            write_png(root / file, to_raster(mask.grid));
            manifest.rows.push_back({id, file, style.label, static_cast<int>(j), split[i]});
            ++k;
            ++summary.masks;
        }
        ++summary.images;
    }
    write_manifest(root / "manifest.csv", manifest);
    return summary;
}

}  // namespace styleseg
