#pragma once

// Full segmentation network: image encoder (+ optional TSI branch) and classwise decoder.

#include <cstddef>
#include <cstdint>
#include <optional>

#include "cwsam/autograd.hpp"
#include "cwsam/config.hpp"
#include "cwsam/decoder.hpp"
#include "cwsam/encoder.hpp"
#include "cwsam/frequency.hpp"
#include "cwsam/grid.hpp"
#include "cwsam/params.hpp"

namespace cwsam {

struct Model {
    ModelConfig config;
    ParameterStore store;
    EncoderParams encoder;
    std::optional<TsiParams> tsi;  // absent when the TSI branch is ablated
    DecoderParams decoder;
};

// Every parameter is seeded from (seed, parameter name); ablated modules have no parameters at all.
Model build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ParameterCount {
    std::size_t total = 0;
    std::size_t trainable = 0;
    std::size_t frozen() const { return total - trainable; }
};
ParameterCount count_parameters(const Model& model);

// Encoder output [grid^2, neck_dim]. `lf_image` is extract_low_frequency(image, lpf_fraction);
// it may be empty when TSI is disabled.
ag::Var encode(const Model& model, const Matrix& image, const Matrix& lf_image);

// Logits [num_classes, mask_size^2] for one mask slot.
ag::Var forward(const Model& model, const Matrix& image, const Matrix& lf_image, std::size_t slot = 0);

// Logits upsampled bilinearly to out_h x out_w, then per-pixel argmax.
LabelMap predict(const Model& model, const Matrix& image, const Matrix& lf_image, std::size_t out_h,
                 std::size_t out_w);

}  // namespace cwsam
