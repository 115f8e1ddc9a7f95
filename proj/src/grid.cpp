#include "cwsam/grid.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cwsam {

Matrix unfold_patches(const Matrix& image, std::size_t patch) {
    if (patch == 0 || image.rows() % patch != 0 || image.cols() % patch != 0)
        throw std::invalid_argument("unfold_patches: image is not a multiple of the patch size");
    const std::size_t gh = image.rows() / patch, gw = image.cols() / patch;
    Matrix out(gh * gw, patch * patch);
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx) {
            double* dst = out.row(gy * gw + gx);
            for (std::size_t py = 0; py < patch; ++py)
                for (std::size_t px = 0; px < patch; ++px)
                    dst[py * patch + px] = image(gy * patch + py, gx * patch + px);
        }
    return out;
}

namespace {

struct Tap {
    std::size_t lo, hi;
    double frac;
};

Tap source_tap(std::size_t dst, std::size_t in, std::size_t out) {
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    lo = std::min(lo, in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    return {lo, hi, src - static_cast<double>(lo)};
}

}  // namespace

Matrix bilinear_resize(const Matrix& planes, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w) {
    if (planes.cols() != h * w) throw std::invalid_argument("bilinear_resize: plane size mismatch");
    Matrix out(planes.rows(), out_h * out_w);
    std::vector<Tap> ty(out_h), tx(out_w);
    for (std::size_t y = 0; y < out_h; ++y) ty[y] = source_tap(y, h, out_h);
    for (std::size_t x = 0; x < out_w; ++x) tx[x] = source_tap(x, w, out_w);
    for (std::size_t c = 0; c < planes.rows(); ++c) {
        const double* src = planes.row(c);
        double* dst = out.row(c);
        for (std::size_t y = 0; y < out_h; ++y) {
            const Tap& a = ty[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const Tap& b = tx[x];
                const double top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
                const double bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
                dst[y * out_w + x] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    return out;
}

LabelMap resize_labels_nearest(const LabelMap& labels, std::size_t out_h, std::size_t out_w) {
    LabelMap out{out_h, out_w, std::vector<std::uint8_t>(out_h * out_w)};
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = std::min(labels.height - 1, (2 * y + 1) * labels.height / (2 * out_h));
        for (std::size_t x = 0; x < out_w; ++x) {
            const std::size_t sx = std::min(labels.width - 1, (2 * x + 1) * labels.width / (2 * out_w));
            out.labels[y * out_w + x] = labels.at(sy, sx);
        }
    }
    return out;
}

LabelMap argmax_classes(const Matrix& planes, std::size_t h, std::size_t w) {
    if (planes.cols() != h * w) throw std::invalid_argument("argmax_classes: plane size mismatch");
    LabelMap out{h, w, std::vector<std::uint8_t>(h * w, 0)};
    for (std::size_t p = 0; p < h * w; ++p) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < planes.rows(); ++c)
            if (planes(c, p) > planes(best, p)) best = c;
        out.labels[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

}  // namespace cwsam
