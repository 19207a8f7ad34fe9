#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <vector>

#include "csv.hpp"
#include "diagnostics.hpp"
#include "grid.hpp"
#include "image_io.hpp"

/**
 * @file data.hpp
 * @brief Corpus layout and ingestion.
 *
 * Layout:
 *   <root>/images/<image_id>.png        8-bit RGB
 *   <root>/masks/<image_id>__<k>.png    8-bit grayscale {0,255}
 *   <root>/manifest.csv                 image_id,mask_file,preference_label,planted_style,split
 *
 * mask_file is relative to <root>.
 */

namespace styleseg {

class IngestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr const char* kManifestHeader = "image_id,mask_file,preference_label,planted_style,split";

struct ManifestRow {
    std::string image_id;
    std::string mask_file;
    std::optional<std::string> preference_label;
    std::optional<int> planted_style;
    std::string split;
};

struct CorpusManifest {
    std::vector<ManifestRow> rows;

    [[nodiscard]] std::map<std::string, std::string> split_of() const {
        std::map<std::string, std::string> out;
        for (const auto& r : rows) out.emplace(r.image_id, r.split);
        return out;
    }
};

struct IngestConfig {
    int resolution = 64;  // 0 keeps native size (all images must then share one size)
};

struct Corpus {
    std::vector<AnnotatedSample> samples;
    CorpusManifest manifest;

    [[nodiscard]] std::vector<AnnotatedSample> split(const std::string& name) const {
        std::vector<AnnotatedSample> out;
        for (const auto& s : samples) {
            if (s.split == name) out.push_back(s);
        }
        return out;
    }
};

inline bool valid_identifier(const std::string& id) {
    static const std::regex re("[A-Za-z0-9_-]+");
    return std::regex_match(id, re);
}

inline bool valid_split(const std::string& s) { return s == "train" || s == "val" || s == "test"; }

inline std::string manifest_line(const ManifestRow& r) {
    return r.image_id + "," + r.mask_file + "," + r.preference_label.value_or("") + "," +
           (r.planted_style ? std::to_string(*r.planted_style) : std::string{}) + "," + r.split;
}

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write " + path.string());
    out << kManifestHeader << '\n';
    for (const auto& r : m.rows) out << manifest_line(r) << '\n';
}

inline CorpusManifest read_manifest(const std::filesystem::path& path) {
    csv::Table t;
    try {
        t = csv::read(path.string());
    } catch (const csv::CsvError& e) {
        throw IngestError(std::string("manifest: ") + e.what());
    }
    const auto expected = csv::split(kManifestHeader);
    if (t.header != expected) throw IngestError("manifest: header must be '" + std::string(kManifestHeader) + "'");

    CorpusManifest m;
    std::map<std::string, std::string> split_of;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& f = t.rows[i];
        const std::string where = "manifest row " + std::to_string(i + 2) + " (" + f[0] + "," + f[1] + ")";
        ManifestRow r;
        r.image_id = f[0];
        r.mask_file = f[1];
        if (!f[2].empty()) r.preference_label = f[2];
        if (!f[3].empty()) {
            const auto v = csv::parse_int(f[3]);
            if (!v) throw IngestError(where + ": planted_style is not an integer");
            r.planted_style = static_cast<int>(*v);
        }
        r.split = f[4];
        if (!valid_identifier(r.image_id)) throw IngestError(where + ": invalid image_id");
        if (!valid_split(r.split)) throw IngestError(where + ": split must be train, val or test");
        const auto [it, inserted] = split_of.emplace(r.image_id, r.split);
        if (!inserted && it->second != r.split) throw IngestError(where + ": image has rows in two splits");
        m.rows.push_back(std::move(r));
    }
    return m;
}

inline ImageSample load_image(const std::filesystem::path& path, const std::string& id) {
    const auto r = read_png(path, 3);
    ImageSample img{id, r.height, r.width, std::vector<float>(r.data.size())};
    std::transform(r.data.begin(), r.data.end(), img.pixels.begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    return img;
}

/// Loads a mask and binarizes it at half of its maximum value (an all-zero mask stays empty).
inline BinaryGrid load_mask(const std::filesystem::path& path) {
    const auto r = read_png(path, 1);
    const int mx = r.data.empty() ? 0 : *std::max_element(r.data.begin(), r.data.end());
    BinaryGrid g(r.height, r.width);
    for (std::size_t i = 0; i < r.data.size(); ++i) g.values[i] = (mx > 0 && 2 * r.data[i] >= mx) ? 1 : 0;
    return g;
}

/**
 * Reads a corpus directory. Images are resized bilinearly and masks by
 * nearest neighbour to the configured resolution; identical masks of one image
 * are dropped; empty masks are kept with a warning.
 */
inline Corpus load_corpus(const std::filesystem::path& root, const IngestConfig& cfg = {}) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IngestError("corpus root " + root.string() + " is not a directory");
    Corpus corpus;
    corpus.manifest = read_manifest(root / "manifest.csv");

    std::map<std::string, std::size_t> index_of;
    for (std::size_t i = 0; i < corpus.manifest.rows.size(); ++i) {
        const auto& row = corpus.manifest.rows[i];
        const std::string where = "manifest row " + std::to_string(i + 2) + " (" + row.image_id + "," + row.mask_file + ")";
        const fs::path mask_path = root / row.mask_file;
        if (!fs::is_regular_file(mask_path)) throw IngestError(where + ": missing mask file " + mask_path.string());

        auto it = index_of.find(row.image_id);
        if (it == index_of.end()) {
            const fs::path image_path = root / "images" / (row.image_id + ".png");
            if (!fs::is_regular_file(image_path)) throw IngestError(where + ": missing image file " + image_path.string());
            AnnotatedSample s;
            try {
                s.image = load_image(image_path, row.image_id);
            } catch (const ImageIoError& e) {
                throw IngestError(where + ": " + e.what());
            }
            if (cfg.resolution > 0 && (s.image.height != cfg.resolution || s.image.width != cfg.resolution)) {
                s.image = resize_bilinear(s.image, cfg.resolution, cfg.resolution);
            }
            s.split = row.split;
            it = index_of.emplace(row.image_id, corpus.samples.size()).first;
            corpus.samples.push_back(std::move(s));
        }
        auto& sample = corpus.samples[it->second];

        BinaryMask mask;
        try {
            mask.grid = load_mask(mask_path);
        } catch (const ImageIoError& e) {
            throw IngestError(where + ": " + e.what());
        }
        if (mask.grid.height != sample.image.height || mask.grid.width != sample.image.width) {
            mask.grid = resize_nearest(mask.grid, sample.image.height, sample.image.width);
        }
        mask.source_label = row.preference_label;
        mask.planted_style = row.planted_style;
        if (foreground_count(mask.grid) == 0) warn(where + ": empty mask kept");

        const bool duplicate = std::any_of(sample.masks.begin(), sample.masks.end(),
                                           [&](const BinaryMask& m) { return m.grid == mask.grid; });
        if (duplicate) {
            warn(where + ": duplicate mask dropped");
            continue;
        }
        sample.masks.push_back(std::move(mask));
    }

    if (cfg.resolution == 0 && !corpus.samples.empty()) {
        for (const auto& s : corpus.samples) {
            if (s.image.height != corpus.samples.front().image.height || s.image.width != corpus.samples.front().image.width) {
                throw IngestError("corpus images differ in size and no working resolution was configured");
            }
        }
    }
    return corpus;
}

/// Number of (image, mask) pairs in a sample list.
inline std::size_t pair_count(const std::vector<AnnotatedSample>& samples) {
    std::size_t n = 0;
    for (const auto& s : samples) n += s.masks.size();
    return n;
}

}  // namespace styleseg
