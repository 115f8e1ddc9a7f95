#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace cwsam {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Which parameter groups train.
//  peft:    everything except patch projection and the transformer blocks'
//           attention/MLP/norm weights (reproduces the published 15.3M
//           trainable count at sam-base).
//  minimal: adapters, TSI branch, and the decoder's newly added parts only.
enum class FreezePolicy { peft, minimal };

struct ModelConfig {
    std::size_t image_size = 1024;
    std::size_t patch_size = 16;
    std::size_t embed_dim = 768;
    std::size_t depth = 12;
    std::size_t num_heads = 12;
    std::size_t mlp_ratio = 4;
    std::vector<std::size_t> global_attn_layers{2, 5, 8, 11};
    std::size_t window_size = 14;
    double adapter_hidden_ratio = 0.25;
    std::size_t tsi_dim = 24;
    std::size_t neck_dim = 256;
    std::size_t decoder_dim = 256;
    std::size_t decoder_heads = 8;
    std::size_t decoder_mlp_dim = 2048;
    std::size_t decoder_attn_downsample = 2;
    std::vector<std::size_t> upscale_dims{256, 64, 32};
    std::size_t classwise_hidden = 64;
    std::size_t classwise_channels = 32;
    std::size_t num_classes = 5;
    std::size_t num_mask_slots = 4;
    double lpf_fraction = 0.25;
    bool tsi_enabled = true;
    bool adapters_enabled = true;
    bool feature_enhance_enabled = true;
    FreezePolicy freeze_policy = FreezePolicy::peft;

    std::size_t grid_size() const { return image_size / patch_size; }
    std::size_t adapter_hidden_dim() const;
    // Side of the classwise logit map: 4x the token grid.
    std::size_t mask_size() const { return 4 * grid_size(); }
    bool is_global_layer(std::size_t block) const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LossKind { weighted_sigmoid, softmax_ce };
enum class Normalization { unit, minmax };

struct TrainConfig {
    double initial_lr = 2e-4;
    double min_lr = 0.0;
    std::size_t epochs = 120;
    // 0 derives the step budget as epochs * ceil(dataset / batch_size).
    std::size_t max_steps = 0;
    std::size_t batch_size = 1;
    std::vector<double> class_weights;  // empty means all ones
    int ignore_index = 255;
    int background_class = -1;          // excluded from reports when >= 0
    std::uint64_t seed = 0;
    std::string checkpoint_dir;
    std::size_t eval_interval = 0;
    std::size_t checkpoint_interval = 0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    LossKind loss = LossKind::weighted_sigmoid;
    Normalization normalization = Normalization::unit;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

ModelConfig preset(std::string_view name);

// Throws ConfigError naming the offending field.
void validate(const ModelConfig& cfg);
void validate(const TrainConfig& cfg, const ModelConfig& model);

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Parses {"model": {...}, "train": {...}} and validates both.
std::pair<ModelConfig, TrainConfig> load_config(const std::filesystem::path& path);
std::pair<ModelConfig, TrainConfig> parse_config(const nlohmann::json& doc);
std::string serialize_config(const ModelConfig& model, const TrainConfig& train);

// 16 hex digits, FNV-1a over the canonical JSON of the model config.
std::string fingerprint(const ModelConfig& cfg);

// Disables one module by ablation name: no-adapters, no-tsi, no-fe.
void apply_ablation(ModelConfig& cfg, std::string_view name);

}  // namespace cwsam
