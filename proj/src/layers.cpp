#include "cwsam/layers.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace cwsam {
namespace {

// Row indices gathering each pixel's 3x3 neighbourhood; -1 marks zero padding.
std::vector<std::ptrdiff_t> im2col_index(std::size_t h, std::size_t w) {
    std::vector<std::ptrdiff_t> idx;
    idx.reserve(h * w * 9);
    const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
    for (std::ptrdiff_t y = 0; y < H; ++y)
        for (std::ptrdiff_t x = 0; x < W; ++x)
            for (std::ptrdiff_t dy = -1; dy <= 1; ++dy)
                for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                    const std::ptrdiff_t sy = y + dy, sx = x + dx;
                    idx.push_back(sy < 0 || sy >= H || sx < 0 || sx >= W ? -1 : sy * W + sx);
                }
    return idx;
}

// Maps rows of the (pixel, ky, kx) deconvolution output onto the 2h x 2w grid.
std::vector<std::ptrdiff_t> pixel_shuffle_index(std::size_t h, std::size_t w) {
    std::vector<std::ptrdiff_t> idx(4 * h * w);
    for (std::size_t oy = 0; oy < 2 * h; ++oy)
        for (std::size_t ox = 0; ox < 2 * w; ++ox) {
            const std::size_t p = (oy / 2) * w + ox / 2;
            const std::size_t k = (oy % 2) * 2 + ox % 2;
            idx[oy * 2 * w + ox] = static_cast<std::ptrdiff_t>(p * 4 + k);
        }
    return idx;
}

}  // namespace

ag::Var Conv3x3::operator()(const ag::Var& x, std::size_t h, std::size_t w) const {
    if (x.rows() != h * w) throw std::invalid_argument("conv3x3: feature map is not h*w rows");
    const std::size_t c = x.cols();
    ag::Var cols = ag::reshape(ag::gather_rows(x, im2col_index(h, w)), h * w, 9 * c);
    return ag::linear(cols, weight, bias);
}

Conv3x3 make_conv3x3(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t in,
                     std::size_t out, bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(9 * in));
    Conv3x3 c;
    c.weight = store.uniform(name + ".weight", group, out, 9 * in, bound);
    if (with_bias) c.bias = store.uniform(name + ".bias", group, 1, out, bound);
    return c;
}

ag::Var Deconv2x2::operator()(const ag::Var& x, std::size_t h, std::size_t w) const {
    if (x.rows() != h * w) throw std::invalid_argument("deconv2x2: feature map is not h*w rows");
    ag::Var taps = ag::reshape(ag::linear(x, weight), 4 * h * w, out_channels);
    ag::Var up = ag::gather_rows(taps, pixel_shuffle_index(h, w));
    return bias.defined() ? ag::add_row(up, bias) : up;
}

Deconv2x2 make_deconv2x2(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t in,
                         std::size_t out) {
    // PyTorch's ConvTranspose2d fan-in is out_channels * k * k.
    const double bound = 1.0 / std::sqrt(static_cast<double>(4 * out));
    Deconv2x2 d;
    d.weight = store.uniform(name + ".weight", group, 4 * out, in, bound);
    d.bias = store.uniform(name + ".bias", group, 1, out, bound);
    d.out_channels = out;
    return d;
}

}  // namespace cwsam
