#include "cwsam/data.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "cwsam/image_io.hpp"
#include "cwsam/params.hpp"

namespace fs = std::filesystem;

namespace cwsam {

std::string_view split_name(Split s) { return s == Split::train ? "train" : "test"; }

Split parse_split(std::string_view s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw DataError("unknown split tag \"" + std::string(s) + "\" (expected train or test)");
}

std::vector<SampleRecord> load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest " + path.string() + ": " + e.what());
    }
    if (!doc.is_array()) throw DataError("manifest " + path.string() + ": expected a JSON array of records");

    const fs::path base = path.parent_path();
    std::vector<SampleRecord> records;
    for (std::size_t i = 0; i < doc.size(); ++i) {
        const auto& r = doc[i];
        const std::string where = "manifest record " + std::to_string(i);
        if (!r.is_object() || !r.contains("image") || !r.contains("mask") || !r.contains("split"))
            throw DataError(where + ": expected {image, mask, split}");
        for (const auto& [key, _] : r.items())
            if (key != "image" && key != "mask" && key != "split") throw DataError(where + ": unknown key " + key);
        SampleRecord rec;
        rec.image_path = base / r["image"].get<std::string>();
        rec.mask_path = base / r["mask"].get<std::string>();
        rec.split = parse_split(r["split"].get<std::string>());
        for (const fs::path& p : {rec.image_path, rec.mask_path})
            if (!fs::is_regular_file(p)) throw DataError(where + ": missing file " + p.string());
        const PngHeader ih = read_png_header(rec.image_path), mh = read_png_header(rec.mask_path);
        if (ih.height != mh.height || ih.width != mh.width)
            throw DataError(where + ": image is " + std::to_string(ih.width) + "x" + std::to_string(ih.height) +
                            " but mask is " + std::to_string(mh.width) + "x" + std::to_string(mh.height));
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<Sample> tile(const Matrix& image, const LabelMap& mask, std::size_t tile_size, std::size_t stride) {
    if (image.rows() != mask.height || image.cols() != mask.width)
        throw DataError("tile: image and mask sizes differ");
    if (tile_size == 0 || stride == 0) throw DataError("tile: tile size and stride must be positive");
    if (tile_size > image.rows() || tile_size > image.cols())
        throw DataError("tile: tile " + std::to_string(tile_size) + " is larger than the " +
                        std::to_string(image.cols()) + "x" + std::to_string(image.rows()) + " image");
    std::vector<Sample> tiles;
    for (std::size_t y = 0; y + tile_size <= image.rows(); y += stride)
        for (std::size_t x = 0; x + tile_size <= image.cols(); x += stride) {
            Sample s{Matrix(tile_size, tile_size), LabelMap{tile_size, tile_size, {}}};
            s.mask.labels.resize(tile_size * tile_size);
            for (std::size_t r = 0; r < tile_size; ++r)
                for (std::size_t c = 0; c < tile_size; ++c) {
                    s.image(r, c) = image(y + r, x + c);
                    s.mask.labels[r * tile_size + c] = mask.at(y + r, x + c);
                }
            tiles.push_back(std::move(s));
        }
    return tiles;
}

std::vector<Sample> load_samples(std::span<const SampleRecord> records, Split split, std::size_t tile_size,
                                 Normalization norm) {
    std::vector<Sample> out;
    for (const SampleRecord& rec : records) {
        if (rec.split != split) continue;
        Matrix image = to_matrix(read_png(rec.image_path), norm);
        LabelMap mask = read_label_png(rec.mask_path);
        if (image.rows() != mask.height || image.cols() != mask.width)
            throw DataError(rec.image_path.string() + ": image and mask sizes differ");
        for (Sample& s : tile(image, mask, tile_size, tile_size)) out.push_back(std::move(s));
    }
    return out;
}

void SyntheticSpec::validate() const {
    if (size == 0) throw DataError("synthetic: size must be positive");
    if (n_classes < 2 || n_classes > 255) throw DataError("synthetic: n_classes must be in [2, 255]");
    if (class_means.size() != n_classes)
        throw DataError("synthetic: " + std::to_string(class_means.size()) + " class means for " +
                        std::to_string(n_classes) + " classes");
    for (std::size_t c = 0; c < class_means.size(); ++c) {
        if (!(class_means[c] > 0.0)) throw DataError("synthetic: class means must be positive");
        if (c > 0 && !(class_means[c] > class_means[c - 1]))
            throw DataError("synthetic: class means must be strictly increasing");
    }
    if (looks < 1) throw DataError("synthetic: looks must be >= 1");
    if (n_regions < 1) throw DataError("synthetic: n_regions must be >= 1");
}

SyntheticSpec default_synthetic_spec(std::size_t size, std::size_t n_classes) {
    SyntheticSpec s;
    s.size = size;
    s.n_classes = n_classes;
    s.class_means.clear();
    for (std::size_t c = 0; c < n_classes; ++c) {
        const double f = static_cast<double>(c + 1) / static_cast<double>(n_classes);
        s.class_means.push_back(f * f);
    }
    return s;
}

Sample generate_synthetic_raw(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> coord(0.0, static_cast<double>(spec.size));
    std::uniform_int_distribution<std::size_t> cls(0, spec.n_classes - 1);
    struct Site {
        double y, x;
        std::uint8_t label;
    };
    std::vector<Site> sites(spec.n_regions);
    for (Site& s : sites) {
        s.y = coord(rng);
        s.x = coord(rng);
        s.label = static_cast<std::uint8_t>(cls(rng));
    }

    const std::size_t n = spec.size;
    Sample out{Matrix(n, n), LabelMap{n, n, std::vector<std::uint8_t>(n * n)}};
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double py = y + 0.5, px = x + 0.5;
            double best = std::numeric_limits<double>::infinity();
            std::uint8_t label = 0;
            for (const Site& s : sites) {
                const double d = (s.y - py) * (s.y - py) + (s.x - px) * (s.x - px);
                if (d < best) {
                    best = d;
                    label = s.label;
                }
            }
            out.mask.labels[y * n + x] = label;
        }

    const double L = static_cast<double>(spec.looks);
    std::gamma_distribution<double> speckle(L, 1.0 / L);
    for (std::size_t i = 0; i < n * n; ++i) out.image[i] = spec.class_means[out.mask.labels[i]] * speckle(rng);
    return out;
}

Sample generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    Sample s = generate_synthetic_raw(spec, seed);
    const auto [lo, hi] = std::minmax_element(s.image.storage().begin(), s.image.storage().end());
    const double min = *lo, range = *hi - *lo;
    for (std::size_t i = 0; i < s.image.size(); ++i) s.image[i] = range > 0.0 ? (s.image[i] - min) / range : 0.0;
    return s;
}

std::uint64_t sample_seed(std::uint64_t seed, Split split, std::size_t index) {
    // Low bit carries the split, so the two streams are disjoint by construction.
    std::uint64_t state = seed ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    const std::uint64_t mixed = splitmix64(state) ^ splitmix64(state);
    return (mixed & ~std::uint64_t{1}) | (split == Split::test ? 1u : 0u);
}

std::vector<Sample> synthetic_split(const SyntheticSpec& spec, std::uint64_t seed, Split split, std::size_t count) {
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic(spec, sample_seed(seed, split, i)));
    return out;
}

}  // namespace cwsam
