#include "cwsam/frequency.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>

#include <fftw3.h>

#include "cwsam/grid.hpp"

namespace cwsam {
namespace {

// FFTW's planner is not re-entrant; execution on distinct plans is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

struct FftwBuffer {
    explicit FftwBuffer(std::size_t n)
        : data(static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * n))) {
        if (data == nullptr) throw std::bad_alloc();
    }
    ~FftwBuffer() { fftw_free(data); }
    FftwBuffer(const FftwBuffer&) = delete;
    FftwBuffer& operator=(const FftwBuffer&) = delete;
    fftw_complex* data;
};

// In-place 2-D transform of `buf`, sign -1 forward / +1 backward, unnormalized.
void transform(FftwBuffer& buf, std::size_t rows, std::size_t cols, int sign) {
    fftw_plan plan;
    {
        std::lock_guard lock(planner_mutex());
        plan = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), buf.data, buf.data, sign,
                                FFTW_ESTIMATE);
    }
    if (plan == nullptr) throw std::runtime_error("fftw planning failed");
    fftw_execute(plan);
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
}

bool keeps(std::size_t idx, std::size_t center, std::size_t extent) {
    const std::size_t off = idx > center ? idx - center : center - idx;
    return 2 * off <= extent;
}

std::size_t nearest_even(double x) { return 2 * static_cast<std::size_t>(std::llround(x / 2.0)); }

}  // namespace

LowPassSpec low_pass_spec(std::size_t rows, std::size_t cols, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("lpf fraction must lie in (0, 1]");
    auto pick = [fraction](std::size_t n) {
        std::size_t w = nearest_even(fraction * static_cast<double>(n));
        return std::clamp<std::size_t>(w, 1, n);
    };
    return LowPassSpec{pick(rows), pick(cols)};
}

SpectrumGrid dft2(const Matrix& image) {
    const std::size_t m = image.rows(), n = image.cols();
    if (m == 0 || n == 0) throw std::invalid_argument("dft2 of an empty grid");
    FftwBuffer buf(m * n);
    for (std::size_t i = 0; i < m * n; ++i) {
        buf.data[i][0] = image[i];
        buf.data[i][1] = 0.0;
    }
    transform(buf, m, n, FFTW_FORWARD);
    SpectrumGrid out{m, n, std::vector<std::complex<double>>(m * n)};
    for (std::size_t u = 0; u < m; ++u) {
        for (std::size_t v = 0; v < n; ++v) {
            const auto* src = buf.data[u * n + v];
            out.at((u + m / 2) % m, (v + n / 2) % n) = {src[0], src[1]};
        }
    }
    return out;
}

std::vector<std::complex<double>> idft2(const SpectrumGrid& spectrum) {
    const std::size_t m = spectrum.rows, n = spectrum.cols;
    FftwBuffer buf(m * n);
    for (std::size_t u = 0; u < m; ++u) {
        for (std::size_t v = 0; v < n; ++v) {
            const auto& s = spectrum.at((u + m / 2) % m, (v + n / 2) % n);
            buf.data[u * n + v][0] = s.real();
            buf.data[u * n + v][1] = s.imag();
        }
    }
    transform(buf, m, n, FFTW_BACKWARD);
    const double inv = 1.0 / static_cast<double>(m * n);
    std::vector<std::complex<double>> out(m * n);
    for (std::size_t i = 0; i < m * n; ++i) out[i] = {buf.data[i][0] * inv, buf.data[i][1] * inv};
    return out;
}

SpectrumGrid lowpass(const SpectrumGrid& spectrum, const LowPassSpec& spec) {
    if (spec.width < 1 || spec.width > spectrum.rows || spec.height < 1 || spec.height > spectrum.cols)
        throw std::invalid_argument("low-pass rectangle " + std::to_string(spec.width) + "x" +
                                    std::to_string(spec.height) + " does not fit a " +
                                    std::to_string(spectrum.rows) + "x" + std::to_string(spectrum.cols) +
                                    " spectrum");
    SpectrumGrid out = spectrum;
    const std::size_t cu = spectrum.rows / 2, cv = spectrum.cols / 2;
    for (std::size_t u = 0; u < out.rows; ++u) {
        const bool row_in = keeps(u, cu, spec.width);
        for (std::size_t v = 0; v < out.cols; ++v) {
            if (!row_in || !keeps(v, cv, spec.height)) out.at(u, v) = {0.0, 0.0};
        }
    }
    return out;
}

Matrix extract_low_frequency(const Matrix& image, double fraction) {
    for (double v : image.values())
        if (!std::isfinite(v)) throw std::invalid_argument("extract_low_frequency: non-finite pixel value");
    const SpectrumGrid spec = dft2(image);
    const auto back = idft2(lowpass(spec, low_pass_spec(image.rows(), image.cols(), fraction)));
    Matrix out(image.rows(), image.cols());
    double imag_sq = 0.0, sig_sq = 0.0;
    for (std::size_t i = 0; i < back.size(); ++i) {
        out[i] = back[i].real();
        imag_sq += back[i].imag() * back[i].imag();
        sig_sq += image[i] * image[i];
    }
    if (std::sqrt(imag_sq) > 1e-9 * std::sqrt(sig_sq) + 1e-300)
        throw std::logic_error("extract_low_frequency: imaginary residue exceeds 1e-9 of the signal norm");
    return out;
}

TsiParams make_tsi_params(ParameterStore& store, std::size_t embed_dim, std::size_t tsi_dim,
                          std::size_t patch_size, std::size_t depth) {
    TsiParams p;
    p.reduce = make_linear(store, "tsi.reduce", ParamGroup::tsi, embed_dim, tsi_dim);
    p.lf_project = make_linear(store, "tsi.lf_project", ParamGroup::tsi, patch_size * patch_size, tsi_dim);
    for (std::size_t i = 0; i < depth; ++i)
        p.per_block.push_back(
            make_linear(store, "tsi.block." + std::to_string(i), ParamGroup::tsi, tsi_dim, tsi_dim));
    // Zero lift: the TSI branch adds nothing until trained, like the adapters.
    p.shared_lift.weight = store.zeros("tsi.shared_lift.weight", ParamGroup::tsi, embed_dim, tsi_dim);
    p.shared_lift.bias = store.zeros("tsi.shared_lift.bias", ParamGroup::tsi, 1, embed_dim);
    return p;
}

std::vector<ag::Var> tsi_features(const Matrix& lf_image, const ag::Var& patch_tokens, const TsiParams& params,
                                  std::size_t patch_size) {
    if (patch_size == 0 || lf_image.rows() != lf_image.cols() || lf_image.rows() % patch_size != 0)
        throw std::invalid_argument("tsi_features: low-frequency image is not a square multiple of the patch size");
    const std::size_t grid = lf_image.rows() / patch_size;
    if (patch_tokens.rows() != grid * grid)
        throw std::invalid_argument("tsi_features: " + std::to_string(grid * grid) +
                                    " low-frequency patches vs " + std::to_string(patch_tokens.rows()) + " tokens");
    const ag::Var patches = ag::constant(unfold_patches(lf_image, patch_size));
    const ag::Var base = ag::add(params.reduce(patch_tokens), params.lf_project(patches));
    std::vector<ag::Var> out;
    out.reserve(params.per_block.size());
    for (const Linear& mlp : params.per_block) out.push_back(params.shared_lift(ag::relu(mlp(base))));
    return out;
}

}  // namespace cwsam
