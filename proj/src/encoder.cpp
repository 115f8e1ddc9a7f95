#include "cwsam/encoder.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "cwsam/grid.hpp"

namespace cwsam {
namespace {

constexpr double kVitNormEps = 1e-6;

struct WindowLayout {
    std::vector<std::ptrdiff_t> partition;  // padded window order <- grid order
    std::vector<std::ptrdiff_t> restore;    // grid order <- padded window order
    std::size_t windows = 0;
};

WindowLayout window_layout(std::size_t grid, std::size_t window) {
    const std::size_t per_side = (grid + window - 1) / window;
    WindowLayout l;
    l.windows = per_side * per_side;
    l.partition.reserve(l.windows * window * window);
    l.restore.assign(grid * grid, 0);
    for (std::size_t wy = 0; wy < per_side; ++wy)
        for (std::size_t wx = 0; wx < per_side; ++wx)
            for (std::size_t ty = 0; ty < window; ++ty)
                for (std::size_t tx = 0; tx < window; ++tx) {
                    const std::size_t y = wy * window + ty, x = wx * window + tx;
                    if (y < grid && x < grid) {
                        l.restore[y * grid + x] = static_cast<std::ptrdiff_t>(l.partition.size());
                        l.partition.push_back(static_cast<std::ptrdiff_t>(y * grid + x));
                    } else {
                        l.partition.push_back(-1);
                    }
                }
    return l;
}

ag::Var attend(const ag::Var& x, const AttentionParams& p, std::size_t groups) {
    const std::size_t dim = x.cols();
    ag::Var qkv = p.qkv(x);
    ag::Var out = ag::attention(ag::slice_cols(qkv, 0, dim), ag::slice_cols(qkv, dim, dim),
                                ag::slice_cols(qkv, 2 * dim, dim), p.heads, groups);
    return p.proj(out);
}

}  // namespace

AdapterParams make_adapter(ParameterStore& store, const std::string& name, std::size_t embed_dim,
                           std::size_t hidden) {
    AdapterParams a;
    a.down = make_linear(store, name + ".down", ParamGroup::adapters, embed_dim, hidden);
    a.up.weight = store.zeros(name + ".up.weight", ParamGroup::adapters, embed_dim, hidden);
    a.up.bias = store.zeros(name + ".up.bias", ParamGroup::adapters, 1, embed_dim);
    return a;
}

EncoderParams make_encoder_params(ParameterStore& store, const ModelConfig& cfg) {
    EncoderParams e;
    e.patch_size = cfg.patch_size;
    e.grid = cfg.grid_size();
    const std::size_t d = cfg.embed_dim;
    e.patch_proj = make_linear(store, "encoder.patch_embed.proj", ParamGroup::patch_embed,
                               cfg.patch_size * cfg.patch_size, d);
    e.pos_embed = store.zeros("encoder.pos_embed", ParamGroup::pos_embed, e.grid * e.grid, d);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        const std::string pre = "encoder.blocks." + std::to_string(i);
        BlockParams b;
        b.norm1 = make_norm(store, pre + ".norm1", ParamGroup::blocks, d, kVitNormEps);
        b.attn.qkv = make_linear(store, pre + ".attn.qkv", ParamGroup::blocks, d, 3 * d);
        b.attn.proj = make_linear(store, pre + ".attn.proj", ParamGroup::blocks, d, d);
        b.attn.heads = cfg.num_heads;
        b.norm2 = make_norm(store, pre + ".norm2", ParamGroup::blocks, d, kVitNormEps);
        b.mlp.fc1 = make_linear(store, pre + ".mlp.lin1", ParamGroup::blocks, d, cfg.mlp_ratio * d);
        b.mlp.fc2 = make_linear(store, pre + ".mlp.lin2", ParamGroup::blocks, cfg.mlp_ratio * d, d);
        if (cfg.adapters_enabled) {
            b.adapter_serial = make_adapter(store, pre + ".adapter_serial", d, cfg.adapter_hidden_dim());
            b.adapter_parallel = make_adapter(store, pre + ".adapter_parallel", d, cfg.adapter_hidden_dim());
        }
        b.window_size = cfg.is_global_layer(i) ? 0 : cfg.window_size;
        e.blocks.push_back(std::move(b));
    }
    e.neck.conv1 = make_linear(store, "encoder.neck.conv1", ParamGroup::neck, d, cfg.neck_dim, false);
    e.neck.norm1 = make_norm(store, "encoder.neck.norm1", ParamGroup::neck, cfg.neck_dim, kVitNormEps);
    e.neck.conv2 = make_conv3x3(store, "encoder.neck.conv2", ParamGroup::neck, cfg.neck_dim, cfg.neck_dim, false);
    e.neck.norm2 = make_norm(store, "encoder.neck.norm2", ParamGroup::neck, cfg.neck_dim, kVitNormEps);
    return e;
}

ag::Var patch_embed(const Matrix& image, const EncoderParams& params) {
    const std::size_t side = params.grid * params.patch_size;
    if (image.rows() != side || image.cols() != side)
        throw std::invalid_argument("patch_embed: expected a " + std::to_string(side) + "x" + std::to_string(side) +
                                    " image, got " + std::to_string(image.rows()) + "x" +
                                    std::to_string(image.cols()));
    ag::Var patches = ag::constant(unfold_patches(image, params.patch_size));
    return ag::add(params.patch_proj(patches), params.pos_embed);
}

ag::Var attention(const ag::Var& x, const AttentionParams& params) { return attend(x, params, 1); }

ag::Var window_attention(const ag::Var& x, const AttentionParams& params, std::size_t grid, std::size_t window) {
    if (x.rows() != grid * grid) throw std::invalid_argument("window_attention: token count is not grid^2");
    const WindowLayout layout = window_layout(grid, window);
    ag::Var windows = ag::gather_rows(x, layout.partition);
    ag::Var attended = attend(windows, params, layout.windows);
    return ag::gather_rows(attended, layout.restore);
}

ag::Var adapter_forward(const ag::Var& f, const AdapterParams& params) {
    return params.up(ag::relu(params.down(f)));
}

ag::Var block_forward(const ag::Var& x_prev, const BlockParams& params, std::size_t grid, const ag::Var& tsi_in) {
    const ag::Var x = tsi_in.defined() ? ag::add(x_prev, tsi_in) : x_prev;
    const ag::Var h = params.norm1(x);
    ag::Var a = params.window_size == 0 ? attention(h, params.attn)
                                        : window_attention(h, params.attn, grid, params.window_size);
    if (params.adapter_serial) a = ag::add(a, adapter_forward(a, *params.adapter_serial));
    const ag::Var mid = ag::add(a, x);

    const ag::Var h2 = params.norm2(mid);
    ag::Var m = params.mlp.fc2(ag::gelu(params.mlp.fc1(h2)));
    if (params.adapter_parallel) m = ag::add(m, adapter_forward(h2, *params.adapter_parallel));
    return ag::add(m, mid);
}

ag::Var neck_forward(const ag::Var& tokens, const NeckParams& neck, std::size_t grid) {
    ag::Var y = neck.norm1(neck.conv1(tokens));
    return neck.norm2(neck.conv2(y, grid, grid));
}

ag::Var encode_tokens(const ag::Var& tokens, std::span<const ag::Var> tsi, const EncoderParams& params) {
    if (!tsi.empty() && tsi.size() != params.blocks.size())
        throw std::invalid_argument("encoder: " + std::to_string(tsi.size()) + " TSI features for " +
                                    std::to_string(params.blocks.size()) + " blocks");
    ag::Var x = tokens;
    for (std::size_t i = 0; i < params.blocks.size(); ++i)
        x = block_forward(x, params.blocks[i], params.grid, tsi.empty() ? ag::Var{} : tsi[i]);
    return neck_forward(x, params.neck, params.grid);
}

ag::Var encoder_forward(const Matrix& image, std::span<const ag::Var> tsi, const EncoderParams& params) {
    return encode_tokens(patch_embed(image, params), tsi, params);
}

}  // namespace cwsam
