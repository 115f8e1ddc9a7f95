#pragma once

// Adapted ViT image encoder.
//
// Each block computes, with x~ = x_prev + tsi_in:
//   a   = Attention(LN1(x~))
//   x'  = a + Adapter_serial(a) + x~
//   out = MLP(LN2(x')) + Adapter_parallel(LN2(x')) + x'
// Adapter(f) = Up(ReLU(Down(f))) with Up zero-initialized, so at
// initialization every block computes exactly what the plain ViT block does.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "cwsam/autograd.hpp"
#include "cwsam/config.hpp"
#include "cwsam/layers.hpp"
#include "cwsam/params.hpp"

namespace cwsam {

struct AdapterParams {
    Linear down;  // embed_dim -> hidden
    Linear up;    // hidden -> embed_dim, zero at init
};

AdapterParams make_adapter(ParameterStore& store, const std::string& name, std::size_t embed_dim,
                           std::size_t hidden);

struct AttentionParams {
    Linear qkv;   // dim -> 3*dim
    Linear proj;  // dim -> dim
    std::size_t heads = 1;
};

struct MlpParams {
    Linear fc1;
    Linear fc2;
};

struct BlockParams {
    Norm norm1;
    Norm norm2;
    AttentionParams attn;
    MlpParams mlp;
    std::optional<AdapterParams> adapter_serial;
    std::optional<AdapterParams> adapter_parallel;
    std::size_t window_size = 0;  // 0 = global attention
};

struct NeckParams {
    Linear conv1;  // 1x1, embed_dim -> neck_dim, no bias
    Norm norm1;
    Conv3x3 conv2;  // neck_dim -> neck_dim, no bias
    Norm norm2;
};

struct EncoderParams {
    std::size_t patch_size = 16;
    std::size_t grid = 64;
    Linear patch_proj;  // patch_size^2 -> embed_dim
    ag::Var pos_embed;  // [grid*grid, embed_dim]
    std::vector<BlockParams> blocks;
    NeckParams neck;
};

EncoderParams make_encoder_params(ParameterStore& store, const ModelConfig& cfg);

// [grid*grid, embed_dim] tokens: patch projection plus positional embedding.
ag::Var patch_embed(const Matrix& image, const EncoderParams& params);

// Global multi-head self-attention over all rows of x.
ag::Var attention(const ag::Var& x, const AttentionParams& params);

// Self-attention within window x window tiles of a grid x grid token map.
// The grid is zero-padded up to a multiple of the window and cropped after.
ag::Var window_attention(const ag::Var& x, const AttentionParams& params, std::size_t grid, std::size_t window);

ag::Var adapter_forward(const ag::Var& f, const AdapterParams& params);

// tsi_in may be undefined.
ag::Var block_forward(const ag::Var& x_prev, const BlockParams& params, std::size_t grid, const ag::Var& tsi_in = {});

ag::Var neck_forward(const ag::Var& tokens, const NeckParams& neck, std::size_t grid);

// Blocks and neck over already-embedded tokens. `tsi` is empty or has one entry per block.
ag::Var encode_tokens(const ag::Var& tokens, std::span<const ag::Var> tsi, const EncoderParams& params);

// patch_embed -> blocks -> neck: [grid*grid, neck_dim].
ag::Var encoder_forward(const Matrix& image, std::span<const ag::Var> tsi, const EncoderParams& params);

}  // namespace cwsam
