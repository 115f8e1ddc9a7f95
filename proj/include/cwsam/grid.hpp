#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cwsam/matrix.hpp"

namespace cwsam {

// Per-pixel class labels, row-major.
struct LabelMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> labels;

    std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Splits an image into non-overlapping patch x patch tiles: [grid*grid, patch*patch],
// tiles in row-major grid order, pixels row-major inside each tile.
Matrix unfold_patches(const Matrix& image, std::size_t patch);

// Bilinear resize of each row of `planes` ([channels, h*w]) to [channels, out_h*out_w]
// using half-pixel centers (align_corners = false).
Matrix bilinear_resize(const Matrix& planes, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w);

// Nearest-neighbour resample of a label map with half-pixel centers.
LabelMap resize_labels_nearest(const LabelMap& labels, std::size_t out_h, std::size_t out_w);

// Per-pixel argmax over the class axis of [classes, pixels]; ties go to the lowest index.
LabelMap argmax_classes(const Matrix& planes, std::size_t h, std::size_t w);

}  // namespace cwsam
