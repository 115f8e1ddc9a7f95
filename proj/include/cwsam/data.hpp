#pragma once

// Manifest loading, tiling, and a seeded synthetic speckled-scene generator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string_view>
#include <utility>
#include <vector>

#include "cwsam/config.hpp"
#include "cwsam/grid.hpp"
#include "cwsam/matrix.hpp"

namespace cwsam {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Split { train, test };
std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct SampleRecord {
    std::filesystem::path image_path;
    std::filesystem::path mask_path;
    Split split = Split::train;
};

// Manifest: JSON array of {"image", "mask", "split"}; paths relative to the
// manifest's directory. Records keep manifest order. Throws DataError on a
// missing file, image/mask size mismatch, or unknown split tag.
std::vector<SampleRecord> load_manifest(const std::filesystem::path& path);

struct Sample {
    Matrix image;    // [height, width], values in [0, 1]
    LabelMap mask;
};

// Row-major tile positions y, x = 0, stride, ...; tiles that would run past
// the edge are dropped rather than padded.
std::vector<Sample> tile(const Matrix& image, const LabelMap& mask, std::size_t tile_size, std::size_t stride);

// Reads every record of `split`, tiling images larger than tile_size.
std::vector<Sample> load_samples(std::span<const SampleRecord> records, Split split, std::size_t tile_size,
                                 Normalization norm);

struct SyntheticSpec {
    std::size_t size = 128;
    std::size_t n_classes = 3;
    std::vector<double> class_means;  // one per class, strictly increasing, > 0
    std::size_t looks = 4;                             // L
    std::size_t n_regions = 6;

    void validate() const;
};

// class_means[c] = ((c + 1) / k)^2.
SyntheticSpec default_synthetic_spec(std::size_t size, std::size_t n_classes);

// Intensity before normalization: class_means[mask] * Gamma(L, 1/L) speckle.
Sample generate_synthetic_raw(const SyntheticSpec& spec, std::uint64_t seed);
// Same scene min-max normalized to [0, 1].
Sample generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// Per-sample seed; train and test streams never share a value for the same base seed.
std::uint64_t sample_seed(std::uint64_t seed, Split split, std::size_t index);

std::vector<Sample> synthetic_split(const SyntheticSpec& spec, std::uint64_t seed, Split split, std::size_t count);

}  // namespace cwsam
