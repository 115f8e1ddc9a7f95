#pragma once

// AdamW + cosine schedule training loop, evaluation, and checkpoint resume.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwsam/checkpoint.hpp"
#include "cwsam/config.hpp"
#include "cwsam/data.hpp"
#include "cwsam/model.hpp"
#include "cwsam/objectives.hpp"

namespace cwsam {

// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total_steps)) / 2; throws unless 0 <= step <= total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min);

struct AdamWSettings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// Decoupled weight decay (p -= lr * wd * p) followed by a bias-corrected Adam step.
// Moments exist only for trainable parameters; a parameter without a gradient
// this step is left untouched.
class AdamW {
public:
    AdamW(const ParameterStore& store, AdamWSettings settings);

    void step(ParameterStore& store, double lr);

    std::size_t steps_taken() const { return t_; }
    const AdamWSettings& settings() const { return settings_; }
    std::size_t state_size() const { return moments_.size(); }
    bool has_state(const std::string& name) const { return moments_.count(name) != 0; }

    // Moments as "adamw.m/<name>" and "adamw.v/<name>".
    void export_state(ArrayMap& out) const;
    void import_state(const ArrayMap& arrays, std::size_t steps_taken);
    nlohmann::json describe() const;

private:
    struct Moments {
        Matrix m, v;
    };
    AdamWSettings settings_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> moments_;
};

// A sample with everything the loop needs precomputed.
struct PreparedSample {
    Matrix image;
    Matrix lf;        // low-frequency image (empty when TSI is disabled)
    LabelMap mask;    // full resolution, for evaluation
    LabelMap target;  // nearest-resampled to the logit map, for the loss
};

std::vector<PreparedSample> prepare_samples(std::span<const Sample> samples, const ModelConfig& cfg);

struct LossRecord {
    std::size_t step = 0;  // 1-based index of the completed step
    double lr = 0.0;
    double loss = 0.0;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};
nlohmann::json to_json(const LossRecord& r);

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step, double loss);
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

// Loss of one prepared sample under the configured objective (slot 0 logits).
ag::Var sample_loss(const Model& model, const PreparedSample& s, const TrainConfig& cfg);

class Trainer {
public:
    Trainer(Model& model, std::span<const PreparedSample> data, const TrainConfig& cfg, std::uint64_t init_seed);

    std::size_t total_steps() const { return total_steps_; }
    std::size_t steps_done() const { return step_; }
    bool finished() const { return step_ >= total_steps_; }

    LossRecord step();

    Checkpoint snapshot() const;
    // Continues from a snapshot taken by a trainer over the same data and config.
    void restore(const Checkpoint& ckpt);

    const AdamW& optimizer() const { return opt_; }
    const Model& model() const { return model_; }
    const TrainConfig& config() const { return cfg_; }

private:
    void next_epoch();

    Model& model_;
    std::span<const PreparedSample> data_;
    TrainConfig cfg_;
    std::uint64_t init_seed_;
    std::size_t total_steps_;
    std::size_t step_ = 0;
    AdamW opt_;
    std::mt19937_64 rng_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

std::size_t total_steps_for(const TrainConfig& cfg, std::size_t dataset_size);

using Predictor = std::function<LabelMap(const PreparedSample&)>;
Predictor model_predictor(const Model& model);

ConfusionMatrix confusion(const Predictor& predict, std::span<const PreparedSample> data, std::size_t num_classes,
                          int ignore_index);

// Shards the data over `workers` threads and merges the confusion matrices;
// the result does not depend on the worker count.
MetricsReport evaluate(const Predictor& predict, std::span<const PreparedSample> data, std::size_t num_classes,
                       int ignore_index, int background_class = -1, std::size_t workers = 1);

struct TrainHooks {
    std::span<const PreparedSample> eval_data;                  // used when eval_interval > 0
    std::function<void(const LossRecord&)> on_step;
    std::function<void(const MetricsReport&)> on_eval;
    std::optional<std::filesystem::path> checkpoint_root;       // step-NNNNNN dirs every checkpoint_interval
};

struct TrainResult {
    std::vector<LossRecord> losses;
    std::vector<std::filesystem::path> checkpoints;
};

// Runs the trainer to completion.
TrainResult train(Trainer& trainer, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace cwsam
