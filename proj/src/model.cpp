#include "cwsam/model.hpp"

#include <stdexcept>

namespace cwsam {

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Model m{cfg, ParameterStore(cfg.freeze_policy, seed), {}, std::nullopt, {}};
    m.encoder = make_encoder_params(m.store, cfg);
    if (cfg.tsi_enabled)
        m.tsi = make_tsi_params(m.store, cfg.embed_dim, cfg.tsi_dim, cfg.patch_size, cfg.depth);
    m.decoder = make_decoder_params(m.store, cfg);
    return m;
}

ParameterCount count_parameters(const Model& model) {
    return {model.store.total_elements(), model.store.trainable_elements()};
}

ag::Var encode(const Model& model, const Matrix& image, const Matrix& lf_image) {
    const ag::Var tokens = patch_embed(image, model.encoder);
    if (!model.tsi) return encode_tokens(tokens, {}, model.encoder);
    if (lf_image.rows() != image.rows() || lf_image.cols() != image.cols())
        throw std::invalid_argument("encode: low-frequency image must match the input image");
    const std::vector<ag::Var> tsi = tsi_features(lf_image, tokens, *model.tsi, model.config.patch_size);
    return encode_tokens(tokens, tsi, model.encoder);
}

ag::Var forward(const Model& model, const Matrix& image, const Matrix& lf_image, std::size_t slot) {
    const ag::Var emb = encode(model, image, lf_image);
    const Refined refined = two_way_refine(emb, model.decoder);
    const ag::Var feature = feature_enhance(emb, refined.image, model.decoder);
    return classwise_logits(feature, refined.tokens, model.decoder, slot);
}

LabelMap predict(const Model& model, const Matrix& image, const Matrix& lf_image, std::size_t out_h,
                 std::size_t out_w) {
    ag::NoGradGuard no_grad;
    const std::size_t side = model.config.mask_size();
    const ag::Var logits = forward(model, image, lf_image, 0);
    return argmax_classes(bilinear_resize(logits.value(), side, side, out_h, out_w), out_h, out_w);
}

}  // namespace cwsam
