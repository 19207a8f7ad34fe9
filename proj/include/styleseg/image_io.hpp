#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "grid.hpp"

namespace styleseg {

class ImageIoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Decoded 8-bit raster, `channels` interleaved samples per pixel (1 = gray, 3 = RGB).
struct Raster8 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
    auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
    if (buf) *buf = msg;
    png_longjmp(png, 1);
}

inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

/**
 * Read a PNG and convert it to 8-bit gray (want_channels = 1) or RGB (3).
 * Palette, 16-bit and alpha inputs are normalized by libpng transforms.
 */
inline Raster8 read_png(const std::filesystem::path& path, int want_channels) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw ImageIoError("cannot open " + path.string());

    std::string err;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
    if (!png) throw ImageIoError("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw ImageIoError("png_create_info_struct failed");
    }

    Raster8 out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("failed to decode " + path.string() + ": " + err);
    }

    png_init_io(png, fp.get());
    png_read_info(png, info);

    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);

    const bool src_gray = (color & PNG_COLOR_MASK_COLOR) == 0;
    if (want_channels == 3 && src_gray) png_set_gray_to_rgb(png);
    if (want_channels == 1 && !src_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);

    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = static_cast<int>(png_get_channels(png, info));
    if (out.channels != want_channels) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageIoError("unexpected channel count in " + path.string());
    }
    const std::size_t stride = png_get_rowbytes(png, info);
    out.data.resize(stride * out.height);
    rows.resize(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.data.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline void write_png(const std::filesystem::path& path, const Raster8& img) {
    if (img.channels != 1 && img.channels != 3) throw ImageIoError("write_png: only gray or RGB supported");
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw ImageIoError("cannot create " + path.string());

    std::string err;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
    if (!png) throw ImageIoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw ImageIoError("png_create_info_struct failed");
    }
    std::vector<png_bytep> rows(img.height);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImageIoError("failed to encode " + path.string() + ": " + err);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) rows[y] = const_cast<png_bytep>(img.data.data() + stride * y);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(float v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

inline Raster8 to_raster(const ImageSample& img) {
    Raster8 r{img.height, img.width, 3, std::vector<std::uint8_t>(img.pixels.size())};
    std::transform(img.pixels.begin(), img.pixels.end(), r.data.begin(), to_byte);
    return r;
}

inline Raster8 to_raster(const BinaryGrid& mask) {
    Raster8 r{mask.height, mask.width, 1, std::vector<std::uint8_t>(mask.values.size())};
    std::transform(mask.values.begin(), mask.values.end(), r.data.begin(),
                   [](std::uint8_t v) -> std::uint8_t { return v ? 255 : 0; });
    return r;
}

/// Nearest-neighbour resize of a single-channel raster (pixel-centre sampling).
template<typename T>
Grid<T> resize_nearest(const Grid<T>& src, int out_h, int out_w) {
    Grid<T> dst(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(src.height - 1, static_cast<int>(std::floor((y + 0.5) * src.height / out_h)));
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(src.width - 1, static_cast<int>(std::floor((x + 0.5) * src.width / out_w)));
            dst(y, x) = src(sy, sx);
        }
    }
    return dst;
}

/// Bilinear resize of an interleaved RGB image (half-pixel centres, edge clamped).
inline ImageSample resize_bilinear(const ImageSample& src, int out_h, int out_w) {
    ImageSample dst{src.id, out_h, out_w, std::vector<float>(static_cast<std::size_t>(out_h) * out_w * 3)};
    const double sy_scale = static_cast<double>(src.height) / out_h;
    const double sx_scale = static_cast<double>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy_scale - 0.5, 0.0, src.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx_scale - 0.5, 0.0, src.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = src.at(y0, x0, c) * (1 - wx) + src.at(y0, x1, c) * wx;
                const double bot = src.at(y1, x0, c) * (1 - wx) + src.at(y1, x1, c) * wx;
                dst.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return dst;
}

}  // namespace styleseg
