#include "cwsam/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <string>

#include <png.h>

#include "cwsam/fsutil.hpp"

namespace fs = std::filesystem;

namespace cwsam {
namespace {

// libpng reports errors by longjmp. Every setjmp below lives in a function
// with only trivially destructible locals, and C++ exceptions are raised only
// after control is back in ordinary code.
struct PngContext {
    std::FILE* fp = nullptr;
    png_structp png = nullptr;
    png_infop info = nullptr;
    bool writing = false;
    char message[256] = {};

    ~PngContext() {
        if (png) {
            if (writing)
                png_destroy_write_struct(&png, info ? &info : nullptr);
            else
                png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        }
        if (fp) std::fclose(fp);
    }
};

void on_error(png_structp png, png_const_charp msg) {
    auto* ctx = static_cast<PngContext*>(png_get_error_ptr(png));
    std::snprintf(ctx->message, sizeof ctx->message, "%s", msg);
    longjmp(png_jmpbuf(png), 1);
}

void on_warning(png_structp, png_const_charp) {}

[[noreturn]] void fail(const fs::path& path, const std::string& what) {
    throw ImageError(path.string() + ": " + what);
}

void open_read(PngContext& ctx, const fs::path& path) {
    ctx.fp = std::fopen(path.c_str(), "rb");
    if (!ctx.fp) fail(path, "cannot open for reading");
    png_byte sig[8];
    if (std::fread(sig, 1, 8, ctx.fp) != 8 || png_sig_cmp(sig, 0, 8) != 0) fail(path, "not a PNG file");
    ctx.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &ctx, on_error, on_warning);
    if (!ctx.png) fail(path, "libpng initialisation failed");
    ctx.info = png_create_info_struct(ctx.png);
    if (!ctx.info) fail(path, "libpng initialisation failed");
}

bool read_info(PngContext& ctx, bool transform) {
    if (setjmp(png_jmpbuf(ctx.png))) return false;
    png_init_io(ctx.png, ctx.fp);
    png_set_sig_bytes(ctx.png, 8);
    png_read_info(ctx.png, ctx.info);
    if (transform) {
        const int color = png_get_color_type(ctx.png, ctx.info);
        if (png_get_bit_depth(ctx.png, ctx.info) < 8) png_set_expand_gray_1_2_4_to_8(ctx.png);
        if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(ctx.png);
        png_read_update_info(ctx.png, ctx.info);
    }
    return true;
}

bool read_rows(PngContext& ctx, png_bytep* rows) {
    if (setjmp(png_jmpbuf(ctx.png))) return false;
    png_read_image(ctx.png, rows);
    png_read_end(ctx.png, nullptr);
    return true;
}

bool write_all(PngContext& ctx, std::size_t width, std::size_t height, int depth, int color, png_bytep* rows) {
    if (setjmp(png_jmpbuf(ctx.png))) return false;
    png_init_io(ctx.png, ctx.fp);
    png_set_IHDR(ctx.png, ctx.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), depth, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(ctx.png, ctx.info);
    png_write_image(ctx.png, rows);
    png_write_end(ctx.png, nullptr);
    return true;
}

// bytes: row-major, `row_bytes` per row.
void write_raw(const fs::path& path, std::size_t width, std::size_t height, int depth, int color,
               std::vector<png_byte>& bytes, std::size_t row_bytes) {
    if (width == 0 || height == 0) fail(path, "empty image");
    write_atomically(path, [&](const fs::path& tmp) {
        PngContext ctx;
        ctx.writing = true;
        ctx.fp = std::fopen(tmp.c_str(), "wb");
        if (!ctx.fp) fail(path, "cannot open for writing");
        ctx.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &ctx, on_error, on_warning);
        if (!ctx.png) fail(path, "libpng initialisation failed");
        ctx.info = png_create_info_struct(ctx.png);
        if (!ctx.info) fail(path, "libpng initialisation failed");
        std::vector<png_bytep> rows(height);
        for (std::size_t y = 0; y < height; ++y) rows[y] = bytes.data() + y * row_bytes;
        if (!write_all(ctx, width, height, depth, color, rows.data())) fail(path, ctx.message);
        if (std::fflush(ctx.fp) != 0) fail(path, "write failed");
    });
}

}  // namespace

PngHeader read_png_header(const fs::path& path) {
    PngContext ctx;
    open_read(ctx, path);
    if (!read_info(ctx, false)) fail(path, ctx.message);
    return {png_get_image_height(ctx.png, ctx.info), png_get_image_width(ctx.png, ctx.info),
            png_get_bit_depth(ctx.png, ctx.info)};
}

GrayImage read_png(const fs::path& path) {
    PngContext ctx;
    open_read(ctx, path);
    if (!read_info(ctx, true)) fail(path, ctx.message);
    const int color = png_get_color_type(ctx.png, ctx.info);
    if (color != PNG_COLOR_TYPE_GRAY) fail(path, "expected a single-channel grayscale PNG");
    GrayImage img;
    img.height = png_get_image_height(ctx.png, ctx.info);
    img.width = png_get_image_width(ctx.png, ctx.info);
    img.bit_depth = png_get_bit_depth(ctx.png, ctx.info);
    const std::size_t row_bytes = png_get_rowbytes(ctx.png, ctx.info);
    std::vector<png_byte> bytes(row_bytes * img.height);
    std::vector<png_bytep> rows(img.height);
    for (std::size_t y = 0; y < img.height; ++y) rows[y] = bytes.data() + y * row_bytes;
    if (!read_rows(ctx, rows.data())) fail(path, ctx.message);

    img.pixels.resize(img.height * img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            const png_byte* row = rows[y];
            img.pixels[y * img.width + x] = img.bit_depth == 16
                ? static_cast<std::uint16_t>((row[2 * x] << 8) | row[2 * x + 1])
                : row[x];
        }
    return img;
}

void write_png(const fs::path& path, const GrayImage& img) {
    if (img.bit_depth != 8 && img.bit_depth != 16) fail(path, "bit depth must be 8 or 16");
    if (img.pixels.size() != img.height * img.width) fail(path, "pixel count does not match dimensions");
    const std::size_t bpp = img.bit_depth / 8, row_bytes = img.width * bpp;
    std::vector<png_byte> bytes(row_bytes * img.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const std::uint16_t v = img.pixels[i];
        if (bpp == 2) {
            bytes[2 * i] = static_cast<png_byte>(v >> 8);
            bytes[2 * i + 1] = static_cast<png_byte>(v & 0xff);
        } else {
            if (v > 255) fail(path, "8-bit image holds a value above 255");
            bytes[i] = static_cast<png_byte>(v);
        }
    }
    write_raw(path, img.width, img.height, img.bit_depth, PNG_COLOR_TYPE_GRAY, bytes, row_bytes);
}

void write_rgb_png(const fs::path& path, std::size_t height, std::size_t width, std::span<const std::uint8_t> rgb) {
    if (rgb.size() != 3 * height * width) fail(path, "RGB buffer does not match dimensions");
    std::vector<png_byte> bytes(rgb.begin(), rgb.end());
    write_raw(path, width, height, 8, PNG_COLOR_TYPE_RGB, bytes, 3 * width);
}

Matrix to_matrix(const GrayImage& img, Normalization norm) {
    Matrix m(img.height, img.width);
    if (norm == Normalization::unit) {
        const double scale = 1.0 / img.max_value();
        for (std::size_t i = 0; i < img.pixels.size(); ++i) m[i] = img.pixels[i] * scale;
        return m;
    }
    if (img.pixels.empty()) return m;
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    if (*hi == *lo) return m;
    const double range = static_cast<double>(*hi - *lo);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) m[i] = (img.pixels[i] - *lo) / range;
    return m;
}

GrayImage from_matrix(const Matrix& values, int bit_depth) {
    if (bit_depth != 8 && bit_depth != 16) throw ImageError("bit depth must be 8 or 16");
    GrayImage img{values.rows(), values.cols(), bit_depth, {}};
    const double max = img.max_value();
    img.pixels.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = std::isfinite(values[i]) ? std::clamp(values[i], 0.0, 1.0) : 0.0;
        img.pixels[i] = static_cast<std::uint16_t>(std::lround(v * max));
    }
    return img;
}

LabelMap read_label_png(const fs::path& path) {
    const GrayImage img = read_png(path);
    if (img.bit_depth != 8) fail(path, "masks must be 8-bit");
    LabelMap m{img.height, img.width, {}};
    m.labels.assign(img.pixels.begin(), img.pixels.end());
    return m;
}

void write_label_png(const fs::path& path, const LabelMap& labels) {
    GrayImage img{labels.height, labels.width, 8, {}};
    img.pixels.assign(labels.labels.begin(), labels.labels.end());
    write_png(path, img);
}

std::array<std::uint8_t, 3> class_color(std::uint8_t label) {
    static constexpr std::array<std::array<std::uint8_t, 3>, 10> palette{{
        {0, 0, 255}, {255, 0, 0}, {0, 255, 0}, {255, 255, 0}, {0, 255, 255},
        {255, 0, 255}, {128, 128, 128}, {255, 128, 0}, {128, 0, 255}, {0, 128, 64},
    }};
    if (label == 255) return {0, 0, 0};
    return palette[label % palette.size()];
}

void write_color_label_png(const fs::path& path, const LabelMap& labels) {
    std::vector<std::uint8_t> rgb;
    rgb.reserve(3 * labels.labels.size());
    for (std::uint8_t l : labels.labels) {
        const auto c = class_color(l);
        rgb.insert(rgb.end(), c.begin(), c.end());
    }
    write_rgb_png(path, labels.height, labels.width, rgb);
}

}  // namespace cwsam
