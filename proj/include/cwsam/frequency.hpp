#pragma once

// Low-frequency branch: centered 2-D DFT, rectangular low-pass, inverse DFT,
// and the task-specific-input (TSI) token features fused into each encoder block.

#include <complex>
#include <cstddef>
#include <vector>

#include "cwsam/autograd.hpp"
#include "cwsam/matrix.hpp"
#include "cwsam/params.hpp"

namespace cwsam {

// Complex M x N spectrum with the DC bin stored at (M/2, N/2).
struct SpectrumGrid {
    std::size_t rows = 0;  // M
    std::size_t cols = 0;  // N
    std::vector<std::complex<double>> values;

    std::complex<double>& at(std::size_t u, std::size_t v) { return values[u * cols + v]; }
    const std::complex<double>& at(std::size_t u, std::size_t v) const { return values[u * cols + v]; }
    friend bool operator==(const SpectrumGrid&, const SpectrumGrid&) = default;
};

// Rectangle kept by the low-pass filter: bin (u, v) survives when
// M/2 - W/2 <= u <= M/2 + W/2 and N/2 - H/2 <= v <= N/2 + H/2.
struct LowPassSpec {
    std::size_t width = 1;   // W, along the row index u
    std::size_t height = 1;  // H, along the column index v
};

// W = fraction*M and H = fraction*N rounded to the nearest even number, clamped to [1, M] / [1, N].
LowPassSpec low_pass_spec(std::size_t rows, std::size_t cols, double fraction);

// Unnormalized forward transform, shifted so DC sits at the center.
SpectrumGrid dft2(const Matrix& image);
// Inverse of dft2 (undoes the shift and divides by M*N).
std::vector<std::complex<double>> idft2(const SpectrumGrid& spectrum);

SpectrumGrid lowpass(const SpectrumGrid& spectrum, const LowPassSpec& spec);

// Real part of idft2(lowpass(dft2(image))).
Matrix extract_low_frequency(const Matrix& image, double fraction);

struct TsiParams {
    Linear reduce;                 // embed_dim -> tsi_dim
    Linear lf_project;             // patch_size^2 -> tsi_dim
    std::vector<Linear> per_block; // depth x (tsi_dim -> tsi_dim), ReLU after each
    Linear shared_lift;            // tsi_dim -> embed_dim, shared by every block, zero at init
};

TsiParams make_tsi_params(ParameterStore& store, std::size_t embed_dim, std::size_t tsi_dim,
                          std::size_t patch_size, std::size_t depth);

// One [grid*grid, embed_dim] feature per encoder block:
//   base = reduce(patch_tokens) + lf_project(patches of lf_image)
//   out[i] = shared_lift(relu(per_block[i](base)))
std::vector<ag::Var> tsi_features(const Matrix& lf_image, const ag::Var& patch_tokens, const TsiParams& params,
                                  std::size_t patch_size);

}  // namespace cwsam
