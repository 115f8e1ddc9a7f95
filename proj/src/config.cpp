#include "cwsam/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

namespace cwsam {
namespace {

using nlohmann::json;

// Reads fields out of one JSON object and rejects anything left unread.
class StrictObject {
public:
    StrictObject(const json& j, std::string scope) : j_(j), scope_(std::move(scope)) {
        if (!j_.is_object()) throw ConfigError(scope_ + ": expected a JSON object");
    }

    template <typename T>
    void read(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(scope_ + "." + key + ": " + e.what());
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(scope_ + ": unknown key \"" + it.key() + "\"");
        }
    }

private:
    const json& j_;
    std::string scope_;
    std::set<std::string> seen_;
};

[[noreturn]] void fail(const std::string& field, const std::string& why) {
    throw ConfigError("model." + field + ": " + why);
}

[[noreturn]] void fail_train(const std::string& field, const std::string& why) {
    throw ConfigError("train." + field + ": " + why);
}

std::string policy_name(FreezePolicy p) { return p == FreezePolicy::peft ? "peft" : "minimal"; }

FreezePolicy parse_policy(const std::string& s) {
    if (s == "peft") return FreezePolicy::peft;
    if (s == "minimal") return FreezePolicy::minimal;
    fail("freeze_policy", "expected \"peft\" or \"minimal\", got \"" + s + "\"");
}

}  // namespace

std::size_t ModelConfig::adapter_hidden_dim() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(embed_dim) * adapter_hidden_ratio));
}

bool ModelConfig::is_global_layer(std::size_t block) const {
    for (std::size_t g : global_attn_layers)
        if (g == block) return true;
    return false;
}

ModelConfig preset(std::string_view name) {
    ModelConfig c;  // defaults are sam-base
    if (name == "sam-base") return c;
    if (name == "desk-tiny") {
        c.image_size = 128;
        c.embed_dim = 64;
        c.depth = 4;
        c.num_heads = 4;
        c.window_size = 4;
        c.global_attn_layers = {1, 3};
        c.tsi_dim = 8;
        c.neck_dim = 32;
        c.decoder_dim = 32;
        c.decoder_heads = 2;
        c.decoder_mlp_dim = 256;
        c.upscale_dims = {32, 16, 8};
        c.classwise_hidden = 16;
        c.classwise_channels = 8;
        return c;
    }
    throw ConfigError("unknown preset \"" + std::string(name) + "\" (expected sam-base or desk-tiny)");
}

void validate(const ModelConfig& c) {
    if (c.patch_size == 0) fail("patch_size", "must be positive");
    if (c.image_size == 0 || c.image_size % c.patch_size != 0)
        fail("image_size", "must be a positive multiple of patch_size (" + std::to_string(c.patch_size) + ")");
    if (c.embed_dim == 0) fail("embed_dim", "must be positive");
    if (c.num_heads == 0 || c.embed_dim % c.num_heads != 0) fail("num_heads", "must divide embed_dim");
    if (c.depth == 0) fail("depth", "must be positive");
    if (c.mlp_ratio == 0) fail("mlp_ratio", "must be positive");
    for (std::size_t g : c.global_attn_layers)
        if (g >= c.depth) fail("global_attn_layers", "index " + std::to_string(g) + " is not < depth");
    if (c.window_size == 0) fail("window_size", "must be positive");
    if (!(c.adapter_hidden_ratio > 0.0) || !std::isfinite(c.adapter_hidden_ratio) || c.adapter_hidden_dim() < 1)
        fail("adapter_hidden_ratio", "adapter hidden dim round(embed_dim * ratio) must be >= 1");
    if (c.tsi_dim == 0) fail("tsi_dim", "must be positive");
    if (c.neck_dim == 0) fail("neck_dim", "must be positive");
    if (c.decoder_dim == 0) fail("decoder_dim", "must be positive");
    if (c.decoder_heads == 0 || c.decoder_dim % c.decoder_heads != 0)
        fail("decoder_heads", "must divide decoder_dim");
    if (c.decoder_attn_downsample == 0 || c.decoder_dim % c.decoder_attn_downsample != 0 ||
        (c.decoder_dim / c.decoder_attn_downsample) % c.decoder_heads != 0)
        fail("decoder_attn_downsample", "decoder_dim / downsample must be a positive multiple of decoder_heads");
    if (c.decoder_mlp_dim == 0) fail("decoder_mlp_dim", "must be positive");
    if (c.upscale_dims.size() != 3) fail("upscale_dims", "expected three channel counts [in, hidden, out]");
    for (std::size_t d : c.upscale_dims)
        if (d == 0) fail("upscale_dims", "channel counts must be positive");
    if (c.upscale_dims[0] != c.decoder_dim) fail("upscale_dims", "first entry must equal decoder_dim");
    if (c.classwise_hidden == 0) fail("classwise_hidden", "must be positive");
    if (c.classwise_channels == 0) fail("classwise_channels", "must be positive");
    if (c.num_classes < 2) fail("num_classes", "must be >= 2");
    if (c.num_mask_slots < 1) fail("num_mask_slots", "must be >= 1");
    if (!(c.lpf_fraction > 0.0 && c.lpf_fraction <= 1.0)) fail("lpf_fraction", "must lie in (0, 1]");
}

void validate(const TrainConfig& t, const ModelConfig& m) {
    if (!(t.initial_lr > 0.0) || !std::isfinite(t.initial_lr)) fail_train("initial_lr", "must be > 0");
    if (!(t.min_lr >= 0.0) || t.min_lr > t.initial_lr) fail_train("min_lr", "must lie in [0, initial_lr]");
    if (t.epochs == 0 && t.max_steps == 0) fail_train("epochs", "epochs or max_steps must be positive");
    if (t.batch_size == 0) fail_train("batch_size", "must be positive");
    if (!t.class_weights.empty() && t.class_weights.size() != m.num_classes)
        fail_train("class_weights", "expected " + std::to_string(m.num_classes) + " weights, got " +
                                        std::to_string(t.class_weights.size()));
    for (double w : t.class_weights)
        if (!(w > 0.0) || !std::isfinite(w)) fail_train("class_weights", "weights must be finite and > 0");
    if (t.ignore_index >= 0 && static_cast<std::size_t>(t.ignore_index) < m.num_classes)
        fail_train("ignore_index", "collides with a class label");
    if (t.background_class >= static_cast<int>(m.num_classes)) fail_train("background_class", "not a class index");
    if (!(t.weight_decay >= 0.0)) fail_train("weight_decay", "must be >= 0");
    if (!(t.beta1 >= 0.0 && t.beta1 < 1.0)) fail_train("beta1", "must lie in [0, 1)");
    if (!(t.beta2 >= 0.0 && t.beta2 < 1.0)) fail_train("beta2", "must lie in [0, 1)");
    if (!(t.adam_eps > 0.0)) fail_train("adam_eps", "must be > 0");
}

nlohmann::json to_json(const ModelConfig& c) {
    return json{
        {"image_size", c.image_size},
        {"patch_size", c.patch_size},
        {"embed_dim", c.embed_dim},
        {"depth", c.depth},
        {"num_heads", c.num_heads},
        {"mlp_ratio", c.mlp_ratio},
        {"global_attn_layers", c.global_attn_layers},
        {"window_size", c.window_size},
        {"adapter_hidden_ratio", c.adapter_hidden_ratio},
        {"tsi_dim", c.tsi_dim},
        {"neck_dim", c.neck_dim},
        {"decoder_dim", c.decoder_dim},
        {"decoder_heads", c.decoder_heads},
        {"decoder_mlp_dim", c.decoder_mlp_dim},
        {"decoder_attn_downsample", c.decoder_attn_downsample},
        {"upscale_dims", c.upscale_dims},
        {"classwise_hidden", c.classwise_hidden},
        {"classwise_channels", c.classwise_channels},
        {"num_classes", c.num_classes},
        {"num_mask_slots", c.num_mask_slots},
        {"lpf_fraction", c.lpf_fraction},
        {"tsi_enabled", c.tsi_enabled},
        {"adapters_enabled", c.adapters_enabled},
        {"feature_enhance_enabled", c.feature_enhance_enabled},
        {"freeze_policy", policy_name(c.freeze_policy)},
    };
}

nlohmann::json to_json(const TrainConfig& t) {
    return json{
        {"initial_lr", t.initial_lr},
        {"min_lr", t.min_lr},
        {"epochs", t.epochs},
        {"max_steps", t.max_steps},
        {"batch_size", t.batch_size},
        {"class_weights", t.class_weights},
        {"ignore_index", t.ignore_index},
        {"background_class", t.background_class},
        {"seed", t.seed},
        {"checkpoint_dir", t.checkpoint_dir},
        {"eval_interval", t.eval_interval},
        {"checkpoint_interval", t.checkpoint_interval},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"loss", t.loss == LossKind::weighted_sigmoid ? "weighted-sigmoid" : "softmax-ce"},
        {"normalization", t.normalization == Normalization::unit ? "unit" : "minmax"},
    };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    StrictObject o(j, "model");
    std::string base = "sam-base";
    o.read("preset", base);
    ModelConfig c = preset(base);
    o.read("image_size", c.image_size);
    o.read("patch_size", c.patch_size);
    o.read("embed_dim", c.embed_dim);
    o.read("depth", c.depth);
    o.read("num_heads", c.num_heads);
    o.read("mlp_ratio", c.mlp_ratio);
    o.read("global_attn_layers", c.global_attn_layers);
    o.read("window_size", c.window_size);
    o.read("adapter_hidden_ratio", c.adapter_hidden_ratio);
    o.read("tsi_dim", c.tsi_dim);
    o.read("neck_dim", c.neck_dim);
    o.read("decoder_dim", c.decoder_dim);
    o.read("decoder_heads", c.decoder_heads);
    o.read("decoder_mlp_dim", c.decoder_mlp_dim);
    o.read("decoder_attn_downsample", c.decoder_attn_downsample);
    o.read("upscale_dims", c.upscale_dims);
    o.read("classwise_hidden", c.classwise_hidden);
    o.read("classwise_channels", c.classwise_channels);
    o.read("num_classes", c.num_classes);
    o.read("num_mask_slots", c.num_mask_slots);
    o.read("lpf_fraction", c.lpf_fraction);
    o.read("tsi_enabled", c.tsi_enabled);
    o.read("adapters_enabled", c.adapters_enabled);
    o.read("feature_enhance_enabled", c.feature_enhance_enabled);
    std::string policy = policy_name(c.freeze_policy);
    o.read("freeze_policy", policy);
    c.freeze_policy = parse_policy(policy);
    o.finish();
    return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    StrictObject o(j, "train");
    TrainConfig t;
    o.read("initial_lr", t.initial_lr);
    o.read("min_lr", t.min_lr);
    o.read("epochs", t.epochs);
    o.read("max_steps", t.max_steps);
    o.read("batch_size", t.batch_size);
    o.read("class_weights", t.class_weights);
    o.read("ignore_index", t.ignore_index);
    o.read("background_class", t.background_class);
    o.read("seed", t.seed);
    o.read("checkpoint_dir", t.checkpoint_dir);
    o.read("eval_interval", t.eval_interval);
    o.read("checkpoint_interval", t.checkpoint_interval);
    o.read("weight_decay", t.weight_decay);
    o.read("beta1", t.beta1);
    o.read("beta2", t.beta2);
    o.read("adam_eps", t.adam_eps);
    std::string loss = "weighted-sigmoid";
    o.read("loss", loss);
    if (loss == "weighted-sigmoid") t.loss = LossKind::weighted_sigmoid;
    else if (loss == "softmax-ce") t.loss = LossKind::softmax_ce;
    else fail_train("loss", "expected weighted-sigmoid or softmax-ce");
    std::string norm = "unit";
    o.read("normalization", norm);
    if (norm == "unit") t.normalization = Normalization::unit;
    else if (norm == "minmax") t.normalization = Normalization::minmax;
    else fail_train("normalization", "expected unit or minmax");
    o.finish();
    return t;
}

std::pair<ModelConfig, TrainConfig> parse_config(const nlohmann::json& doc) {
    StrictObject top(doc, "config");
    json model = json::object(), train = json::object();
    top.read("model", model);
    top.read("train", train);
    top.finish();
    ModelConfig m = model_config_from_json(model);
    validate(m);
    TrainConfig t = train_config_from_json(train);
    validate(t, m);
    return {m, t};
}

std::pair<ModelConfig, TrainConfig> load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(doc);
}

std::string serialize_config(const ModelConfig& model, const TrainConfig& train) {
    return json{{"model", to_json(model)}, {"train", to_json(train)}}.dump(2);
}

std::string fingerprint(const ModelConfig& cfg) {
    const std::string canon = to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canon) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void apply_ablation(ModelConfig& cfg, std::string_view name) {
    if (name == "no-adapters") cfg.adapters_enabled = false;
    else if (name == "no-tsi") cfg.tsi_enabled = false;
    else if (name == "no-fe") cfg.feature_enhance_enabled = false;
    else throw ConfigError("unknown ablation \"" + std::string(name) + "\" (expected no-adapters, no-tsi, no-fe)");
}

}  // namespace cwsam
