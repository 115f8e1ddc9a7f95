#pragma once

// Classwise mask decoder.
//
//   image embedding --input_proj--> two-way transformer (x2) --> sam upscaler --+
//          |                                                                   concat -> classwise upscaler -> E
//          +--------------------------------------------------> skip upscaler -+
//   refined mask token[slot] --> hyper MLP --> t;   logits[c, p] = sum_d E[p, d, c] * t[d]
//
// The sam and skip upscalers double the token grid; the classwise upscaler
// doubles it again, so logit maps are 4x the token grid on each side.

#include <cstddef>
#include <optional>
#include <vector>

#include "cwsam/autograd.hpp"
#include "cwsam/config.hpp"
#include "cwsam/layers.hpp"
#include "cwsam/params.hpp"

namespace cwsam {

struct DecoderAttention {
    Linear q, k, v, out;
    std::size_t heads = 1;

    ag::Var operator()(const ag::Var& query, const ag::Var& key, const ag::Var& value) const;
};

struct TwoWayBlock {
    DecoderAttention self_attn;
    Norm norm1;
    DecoderAttention cross_token_to_image;
    Norm norm2;
    Linear mlp1, mlp2;
    Norm norm3;
    DecoderAttention cross_image_to_token;
    Norm norm4;
};

// deconv(k2, s2) -> LayerNorm2d -> GELU -> 1x1 projection -> GELU
struct Upscaler {
    Deconv2x2 deconv;
    Norm norm;
    Linear proj;

    ag::Var operator()(const ag::Var& x, std::size_t grid) const;
};

// deconv(k2, s2) -> LayerNorm2d -> ReLU -> conv3x3 to classwise_channels * num_classes
struct ClasswiseUpscaler {
    Deconv2x2 deconv;
    Norm norm;
    Conv3x3 conv;
};

struct HyperMlp {
    Linear l1, l2, l3;

    ag::Var operator()(const ag::Var& x) const;
};

struct DecoderParams {
    std::size_t grid = 0;
    std::size_t num_classes = 0;
    std::size_t classwise_channels = 0;
    std::size_t upscale_out = 0;
    ag::Var mask_tokens;              // [slots, decoder_dim]
    std::optional<Linear> input_proj; // present when neck_dim != decoder_dim
    ag::Var image_pe;                 // [grid*grid, decoder_dim]
    std::vector<TwoWayBlock> blocks;
    Upscaler sam_upscaler;
    std::optional<Upscaler> skip_upscaler;  // absent when feature enhancement is ablated
    ClasswiseUpscaler classwise;
    std::vector<HyperMlp> hyper_mlps;
};

DecoderParams make_decoder_params(ParameterStore& store, const ModelConfig& cfg);

struct Refined {
    ag::Var tokens;  // [slots, decoder_dim]
    ag::Var image;   // [grid*grid, decoder_dim]
};

Refined two_way_refine(const ag::Var& image_emb, const DecoderParams& params);

// concat(sam_upscaler(refined), skip_upscaler(raw)) -> [(2*grid)^2, 2*upscale_out].
// Without the skip branch its half is zeros.
ag::Var feature_enhance(const ag::Var& raw_emb, const ag::Var& refined_emb, const DecoderParams& params);

// E as [(4*grid)^2, classwise_channels * num_classes], column d*num_classes + c.
ag::Var classwise_embedding(const ag::Var& feature, const DecoderParams& params);

// out[c, p] = sum_d e[p, d*num_classes + c] * t[0, d]  ->  [num_classes, pixels]
ag::Var classwise_product(const ag::Var& e, const ag::Var& t, std::size_t num_classes);

// [num_classes, (4*grid)^2] logits for one mask slot.
ag::Var classwise_logits(const ag::Var& feature, const ag::Var& refined_tokens, const DecoderParams& params,
                         std::size_t slot);

}  // namespace cwsam
