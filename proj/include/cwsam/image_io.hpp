#pragma once

// Single-channel PNG input/output (8- or 16-bit grayscale) plus an RGB
// writer for colorized label previews.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "cwsam/config.hpp"
#include "cwsam/grid.hpp"
#include "cwsam/matrix.hpp"

namespace cwsam {

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GrayImage {
    std::size_t height = 0;
    std::size_t width = 0;
    int bit_depth = 8;               // 8 or 16
    std::vector<std::uint16_t> pixels;

    std::uint32_t max_value() const { return bit_depth == 16 ? 65535u : 255u; }
    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

struct PngHeader {
    std::size_t height = 0;
    std::size_t width = 0;
    int bit_depth = 0;
};

PngHeader read_png_header(const std::filesystem::path& path);
// Accepts grayscale PNGs (with or without alpha, which is dropped); depths below 8 are expanded.
GrayImage read_png(const std::filesystem::path& path);
// Atomic: the file appears only once fully written.
void write_png(const std::filesystem::path& path, const GrayImage& image);
void write_rgb_png(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   std::span<const std::uint8_t> rgb);

// unit: value / max_value.  minmax: per-image (v - min) / (max - min), zeros if flat.
Matrix to_matrix(const GrayImage& image, Normalization norm = Normalization::unit);
// Clamps to [0, 1] and rounds to the nearest code.
GrayImage from_matrix(const Matrix& values, int bit_depth);

// Masks must be 8-bit; values are taken verbatim.
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& labels);

// Fixed palette, index 255 (ignore) drawn black.
std::array<std::uint8_t, 3> class_color(std::uint8_t label);
void write_color_label_png(const std::filesystem::path& path, const LabelMap& labels);

}  // namespace cwsam
