#include "cwsam/decoder.hpp"

#include <array>
#include <stdexcept>
#include <string>

#include "cwsam/kernels.hpp"

namespace cwsam {
namespace {

constexpr double kNormEps = 1e-5;
constexpr double kNorm2dEps = 1e-6;

DecoderAttention make_attention(ParameterStore& store, const std::string& name, std::size_t dim,
                                std::size_t downsample, std::size_t heads) {
    const std::size_t inner = dim / downsample;
    const ParamGroup g = ParamGroup::decoder_transformer;
    DecoderAttention a;
    a.q = make_linear(store, name + ".q_proj", g, dim, inner);
    a.k = make_linear(store, name + ".k_proj", g, dim, inner);
    a.v = make_linear(store, name + ".v_proj", g, dim, inner);
    a.out = make_linear(store, name + ".out_proj", g, inner, dim);
    a.heads = heads;
    return a;
}

Upscaler make_upscaler(ParameterStore& store, const std::string& name, ParamGroup g, std::size_t in,
                       std::size_t hidden, std::size_t out) {
    Upscaler u;
    u.deconv = make_deconv2x2(store, name + ".deconv", g, in, hidden);
    u.norm = make_norm(store, name + ".norm", g, hidden, kNorm2dEps);
    u.proj = make_linear(store, name + ".proj", g, hidden, out);
    return u;
}

}  // namespace

ag::Var DecoderAttention::operator()(const ag::Var& query, const ag::Var& key, const ag::Var& value) const {
    return out(ag::attention(q(query), k(key), v(value), heads, 1));
}

ag::Var Upscaler::operator()(const ag::Var& x, std::size_t grid) const {
    ag::Var y = ag::gelu(norm(deconv(x, grid, grid)));
    return ag::gelu(proj(y));
}

ag::Var HyperMlp::operator()(const ag::Var& x) const { return l3(ag::relu(l2(ag::relu(l1(x))))); }

DecoderParams make_decoder_params(ParameterStore& store, const ModelConfig& cfg) {
    DecoderParams p;
    p.grid = cfg.grid_size();
    p.num_classes = cfg.num_classes;
    p.classwise_channels = cfg.classwise_channels;
    p.upscale_out = cfg.upscale_dims[2];
    const std::size_t d = cfg.decoder_dim;
    const ParamGroup fresh = ParamGroup::decoder_new;

    p.mask_tokens = store.normal("decoder.mask_tokens", fresh, cfg.num_mask_slots, d, 1.0);
    if (cfg.neck_dim != d) p.input_proj = make_linear(store, "decoder.input_proj", fresh, cfg.neck_dim, d);
    p.image_pe = store.normal("decoder.image_pe", ParamGroup::decoder_transformer, p.grid * p.grid, d, 0.02);
    for (std::size_t i = 0; i < 2; ++i) {
        const std::string pre = "decoder.transformer.layers." + std::to_string(i);
        const ParamGroup g = ParamGroup::decoder_transformer;
        TwoWayBlock b;
        b.self_attn = make_attention(store, pre + ".self_attn", d, 1, cfg.decoder_heads);
        b.norm1 = make_norm(store, pre + ".norm1", g, d, kNormEps);
        b.cross_token_to_image = make_attention(store, pre + ".cross_attn_token_to_image", d,
                                                cfg.decoder_attn_downsample, cfg.decoder_heads);
        b.norm2 = make_norm(store, pre + ".norm2", g, d, kNormEps);
        b.mlp1 = make_linear(store, pre + ".mlp.lin1", g, d, cfg.decoder_mlp_dim);
        b.mlp2 = make_linear(store, pre + ".mlp.lin2", g, cfg.decoder_mlp_dim, d);
        b.norm3 = make_norm(store, pre + ".norm3", g, d, kNormEps);
        b.cross_image_to_token = make_attention(store, pre + ".cross_attn_image_to_token", d,
                                                cfg.decoder_attn_downsample, cfg.decoder_heads);
        b.norm4 = make_norm(store, pre + ".norm4", g, d, kNormEps);
        p.blocks.push_back(std::move(b));
    }
    const auto& up = cfg.upscale_dims;
    p.sam_upscaler = make_upscaler(store, "decoder.output_upscaling", ParamGroup::decoder_sam_upscaler, d, up[1], up[2]);
    if (cfg.feature_enhance_enabled)
        p.skip_upscaler = make_upscaler(store, "decoder.skip_upscaling", fresh, cfg.neck_dim, up[1], up[2]);
    p.classwise.deconv = make_deconv2x2(store, "decoder.classwise.deconv", fresh, 2 * up[2], cfg.classwise_hidden);
    p.classwise.norm = make_norm(store, "decoder.classwise.norm", fresh, cfg.classwise_hidden, kNorm2dEps);
    p.classwise.conv = make_conv3x3(store, "decoder.classwise.conv", fresh, cfg.classwise_hidden,
                                    cfg.classwise_channels * cfg.num_classes, true);
    for (std::size_t s = 0; s < cfg.num_mask_slots; ++s) {
        const std::string pre = "decoder.hyper_mlps." + std::to_string(s);
        HyperMlp h;
        h.l1 = make_linear(store, pre + ".layers.0", fresh, d, d);
        h.l2 = make_linear(store, pre + ".layers.1", fresh, d, d);
        h.l3 = make_linear(store, pre + ".layers.2", fresh, d, cfg.classwise_channels);
        p.hyper_mlps.push_back(std::move(h));
    }
    return p;
}

Refined two_way_refine(const ag::Var& image_emb, const DecoderParams& p) {
    if (image_emb.rows() != p.grid * p.grid)
        throw std::invalid_argument("two_way_refine: embedding is not grid^2 tokens");
    ag::Var keys = p.input_proj ? (*p.input_proj)(image_emb) : image_emb;
    if (keys.cols() != p.image_pe.cols()) throw std::invalid_argument("two_way_refine: embedding width mismatch");
    ag::Var queries = p.mask_tokens;
    const ag::Var& query_pe = p.mask_tokens;
    const ag::Var& key_pe = p.image_pe;
    for (const TwoWayBlock& b : p.blocks) {
        ag::Var q = ag::add(queries, query_pe);
        queries = b.norm1(ag::add(queries, b.self_attn(q, q, queries)));

        q = ag::add(queries, query_pe);
        ag::Var k = ag::add(keys, key_pe);
        queries = b.norm2(ag::add(queries, b.cross_token_to_image(q, k, keys)));

        queries = b.norm3(ag::add(queries, b.mlp2(ag::relu(b.mlp1(queries)))));

        q = ag::add(queries, query_pe);
        k = ag::add(keys, key_pe);
        keys = b.norm4(ag::add(keys, b.cross_image_to_token(k, q, queries)));
    }
    return {queries, keys};
}

ag::Var feature_enhance(const ag::Var& raw_emb, const ag::Var& refined_emb, const DecoderParams& p) {
    if (raw_emb.rows() != refined_emb.rows() || raw_emb.rows() != p.grid * p.grid)
        throw std::invalid_argument("feature_enhance: raw and refined embeddings differ in size");
    const ag::Var sam = p.sam_upscaler(refined_emb, p.grid);
    const ag::Var skip = p.skip_upscaler ? (*p.skip_upscaler)(raw_emb, p.grid)
                                         : ag::constant(Matrix(sam.rows(), sam.cols()));
    const std::array<ag::Var, 2> parts{sam, skip};
    return ag::concat_cols(parts);
}

ag::Var classwise_embedding(const ag::Var& feature, const DecoderParams& p) {
    const std::size_t side = 2 * p.grid;
    if (feature.rows() != side * side || feature.cols() != 2 * p.upscale_out)
        throw std::invalid_argument("classwise_embedding: feature grid shape mismatch");
    ag::Var y = ag::relu(p.classwise.norm(p.classwise.deconv(feature, side, side)));
    return p.classwise.conv(y, 2 * side, 2 * side);
}

ag::Var classwise_product(const ag::Var& e, const ag::Var& t, std::size_t num_classes) {
    const std::size_t pixels = e.rows(), dims = t.cols();
    if (t.rows() != 1 || e.cols() != dims * num_classes)
        throw std::invalid_argument("classwise_product: embedding is not classwise_channels x num_classes");
    Matrix out(num_classes, pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        const double* er = e.value().row(p);
        for (std::size_t c = 0; c < num_classes; ++c) {
            double s = 0.0;
            for (std::size_t d = 0; d < dims; ++d) s += er[d * num_classes + c] * t.value()[d];
            out(c, p) = s;
        }
    }
    return ag::make_op(std::move(out), {e, t}, [e, t, num_classes, pixels, dims](ag::Node& self) {
        if (e.requires_grad()) {
            Matrix& ge = e.node()->grad_buffer();
            for (std::size_t p = 0; p < pixels; ++p)
                for (std::size_t d = 0; d < dims; ++d)
                    for (std::size_t c = 0; c < num_classes; ++c)
                        ge(p, d * num_classes + c) += self.grad(c, p) * t.value()[d];
        }
        if (t.requires_grad()) {
            Matrix& gt = t.node()->grad_buffer();
            for (std::size_t p = 0; p < pixels; ++p) {
                const double* er = e.value().row(p);
                for (std::size_t d = 0; d < dims; ++d) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < num_classes; ++c) s += self.grad(c, p) * er[d * num_classes + c];
                    gt[d] += s;
                }
            }
        }
    });
}

ag::Var classwise_logits(const ag::Var& feature, const ag::Var& refined_tokens, const DecoderParams& p,
                         std::size_t slot) {
    if (slot >= p.hyper_mlps.size())
        throw std::out_of_range("classwise_logits: slot " + std::to_string(slot) + " >= " +
                                std::to_string(p.hyper_mlps.size()) + " mask slots");
    const ag::Var e = classwise_embedding(feature, p);
    const ag::Var t = p.hyper_mlps[slot](ag::slice_rows(refined_tokens, slot, 1));
    return classwise_product(e, t, p.num_classes);
}

}  // namespace cwsam
