#pragma once

// Convolution building blocks over channels-last feature maps [h*w, channels].

#include <cstddef>
#include <string>

#include "cwsam/autograd.hpp"
#include "cwsam/params.hpp"

namespace cwsam {

// 3x3 convolution, stride 1, zero padding 1. Weight is [out, 9*in] with the
// input columns ordered (ky, kx, channel).
struct Conv3x3 {
    ag::Var weight;
    ag::Var bias;  // optional [1, out]

    ag::Var operator()(const ag::Var& x, std::size_t h, std::size_t w) const;
};

Conv3x3 make_conv3x3(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t in,
                     std::size_t out, bool with_bias);

// Transposed convolution with kernel 2 and stride 2: [h*w, in] -> [(2h)*(2w), out].
// Weight is [4*out, in] with rows ordered (ky, kx, out_channel).
struct Deconv2x2 {
    ag::Var weight;
    ag::Var bias;  // [1, out]
    std::size_t out_channels = 0;

    ag::Var operator()(const ag::Var& x, std::size_t h, std::size_t w) const;
};

Deconv2x2 make_deconv2x2(ParameterStore& store, const std::string& name, ParamGroup group, std::size_t in,
                         std::size_t out);

}  // namespace cwsam
