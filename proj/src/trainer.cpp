#include "cwsam/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

#include "cwsam/frequency.hpp"

namespace cwsam {

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0, double lr_min) {
    if (total_steps == 0 || step > total_steps)
        throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr_min + (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t)) / 2.0;
}

AdamW::AdamW(const ParameterStore& store, AdamWSettings settings) : settings_(settings) {
    for (const Parameter& p : store.all())
        if (p.trainable)
            moments_.emplace(p.name, Moments{Matrix(p.var.rows(), p.var.cols()), Matrix(p.var.rows(), p.var.cols())});
}

void AdamW::step(ParameterStore& store, double lr) {
    ++t_;
    const double b1 = settings_.beta1, b2 = settings_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double decay = 1.0 - lr * settings_.weight_decay;
    for (Parameter& p : store.all()) {
        if (!p.trainable || !p.var.has_grad()) continue;
        Moments& mo = moments_.at(p.name);
        Matrix& w = p.var.mutable_value();
        const Matrix& g = p.var.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] *= decay;
            mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * g[i];
            mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * g[i] * g[i];
            const double mhat = mo.m[i] / c1, vhat = mo.v[i] / c2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + settings_.eps);
        }
    }
}

void AdamW::export_state(ArrayMap& out) const {
    for (const auto& [name, mo] : moments_) {
        out.insert_or_assign("adamw.m/" + name, mo.m);
        out.insert_or_assign("adamw.v/" + name, mo.v);
    }
}

void AdamW::import_state(const ArrayMap& arrays, std::size_t steps_taken) {
    for (auto& [name, mo] : moments_) {
        auto m = arrays.find("adamw.m/" + name), v = arrays.find("adamw.v/" + name);
        if (m == arrays.end() || v == arrays.end()) throw CheckpointError("checkpoint lacks optimizer state for " + name);
        if (m->second.rows() != mo.m.rows() || m->second.cols() != mo.m.cols() || v->second.rows() != mo.v.rows() ||
            v->second.cols() != mo.v.cols())
            throw CheckpointError("optimizer state for " + name + " has the wrong shape");
        mo.m = m->second;
        mo.v = v->second;
    }
    t_ = steps_taken;
}

nlohmann::json AdamW::describe() const {
    return {{"name", "adamw"},
            {"beta1", settings_.beta1},
            {"beta2", settings_.beta2},
            {"eps", settings_.eps},
            {"weight_decay", settings_.weight_decay},
            {"steps_taken", t_}};
}

std::vector<PreparedSample> prepare_samples(std::span<const Sample> samples, const ModelConfig& cfg) {
    std::vector<PreparedSample> out;
    out.reserve(samples.size());
    const std::size_t side = cfg.mask_size();
    for (const Sample& s : samples) {
        if (s.image.rows() != cfg.image_size || s.image.cols() != cfg.image_size)
            throw std::invalid_argument("sample is " + std::to_string(s.image.cols()) + "x" +
                                        std::to_string(s.image.rows()) + ", model expects " +
                                        std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
        PreparedSample p;
        p.image = s.image;
        if (cfg.tsi_enabled) p.lf = extract_low_frequency(s.image, cfg.lpf_fraction);
        p.mask = s.mask;
        p.target = resize_labels_nearest(s.mask, side, side);
        out.push_back(std::move(p));
    }
    return out;
}

nlohmann::json to_json(const LossRecord& r) { return {{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}}; }

TrainingDiverged::TrainingDiverged(std::size_t step, double loss)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": loss is " + std::to_string(loss)),
      step_(step) {}

ag::Var sample_loss(const Model& model, const PreparedSample& s, const TrainConfig& cfg) {
    LossSpec spec;
    spec.weights = cfg.class_weights.empty() ? std::vector<double>(model.config.num_classes, 1.0) : cfg.class_weights;
    spec.ignore_index = cfg.ignore_index;
    const ag::Var logits = forward(model, s.image, s.lf, 0);
    return cfg.loss == LossKind::softmax_ce ? softmax_ce_loss(logits, s.target, spec)
                                            : weighted_loss(logits, s.target, spec);
}

std::size_t total_steps_for(const TrainConfig& cfg, std::size_t dataset_size) {
    if (cfg.max_steps > 0) return cfg.max_steps;
    const std::size_t per_epoch = (dataset_size + cfg.batch_size - 1) / cfg.batch_size;
    return cfg.epochs * per_epoch;
}

namespace {

AdamWSettings settings_from(const TrainConfig& cfg) {
    return {cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
}

// Fields that must agree for a resumed run to continue the original one.
TrainConfig resume_relevant(TrainConfig c) {
    c.checkpoint_dir.clear();
    c.eval_interval = 0;
    c.checkpoint_interval = 0;
    return c;
}

}  // namespace

Trainer::Trainer(Model& model, std::span<const PreparedSample> data, const TrainConfig& cfg, std::uint64_t init_seed)
    : model_(model),
      data_(data),
      cfg_(cfg),
      init_seed_(init_seed),
      total_steps_(0),
      opt_(model.store, settings_from(cfg)),
      rng_(cfg.seed) {
    if (data.empty()) throw std::invalid_argument("training dataset is empty");
    if (cfg.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    total_steps_ = total_steps_for(cfg, data.size());
}

void Trainer::next_epoch() {
    order_.resize(data_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
}

LossRecord Trainer::step() {
    if (finished()) throw std::logic_error("trainer: step budget exhausted");
    const double lr = cosine_lr(step_, total_steps_, cfg_.initial_lr, cfg_.min_lr);
    if (cursor_ >= order_.size()) next_epoch();
    const std::size_t batch = std::min(cfg_.batch_size, order_.size() - cursor_);

    model_.store.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const ag::Var loss = sample_loss(model_, data_[order_[cursor_ + b]], cfg_);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) throw TrainingDiverged(step_ + 1, value);
        total += value;
        ag::backward(batch == 1 ? loss : ag::scale(loss, 1.0 / static_cast<double>(batch)));
    }
    cursor_ += batch;
    opt_.step(model_.store, lr);
    model_.store.zero_grad();
    ++step_;
    return {step_, lr, total / static_cast<double>(batch)};
}

Checkpoint Trainer::snapshot() const {
    Checkpoint c;
    c.model = model_.config;
    c.train = cfg_;
    c.fingerprint = fingerprint(model_.config);
    c.init_seed = init_seed_;
    c.step = step_;
    std::ostringstream rng;
    rng << rng_;
    c.rng_state = rng.str();
    c.order = order_;
    c.cursor = cursor_;
    c.freeze_mask = model_.store.freeze_mask();
    c.optimizer = opt_.describe();
    c.arrays = capture_parameters(model_);
    opt_.export_state(c.arrays);
    return c;
}

void Trainer::restore(const Checkpoint& c) {
    if (c.fingerprint != fingerprint(model_.config))
        throw CheckpointError("checkpoint model fingerprint " + c.fingerprint + " does not match the model");
    if (!(resume_relevant(c.train) == resume_relevant(cfg_)))
        throw CheckpointError("checkpoint training config differs from the resumed run");
    if (!c.order.empty() && c.order.size() != data_.size())
        throw CheckpointError("checkpoint was taken over a dataset of a different size");
    if (c.cursor > c.order.size() || c.step > total_steps_) throw CheckpointError("checkpoint position out of range");
    restore_parameters(model_, c.arrays);
    opt_.import_state(c.arrays, c.step);
    std::istringstream rng(c.rng_state);
    rng >> rng_;
    if (!rng) throw CheckpointError("checkpoint RNG state is unreadable");
    order_ = c.order;
    cursor_ = c.cursor;
    step_ = c.step;
}

Predictor model_predictor(const Model& model) {
    return [&model](const PreparedSample& s) { return predict(model, s.image, s.lf, s.mask.height, s.mask.width); };
}

ConfusionMatrix confusion(const Predictor& predict, std::span<const PreparedSample> data, std::size_t num_classes,
                          int ignore_index) {
    ConfusionMatrix cm(num_classes);
    for (const PreparedSample& s : data) accumulate(predict(s), s.mask, ignore_index, cm);
    return cm;
}

MetricsReport evaluate(const Predictor& predict, std::span<const PreparedSample> data, std::size_t num_classes,
                       int ignore_index, int background_class, std::size_t workers) {
    if (data.empty()) throw std::invalid_argument("evaluation dataset is empty");
    const auto start = std::chrono::steady_clock::now();
    workers = std::clamp<std::size_t>(workers, 1, data.size());
    std::vector<ConfusionMatrix> parts(workers, ConfusionMatrix(num_classes));
    std::vector<std::exception_ptr> errors(workers);
    auto run = [&](std::size_t w) {
        const std::size_t lo = data.size() * w / workers, hi = data.size() * (w + 1) / workers;
        try {
            parts[w] = confusion(predict, data.subspan(lo, hi - lo), num_classes, ignore_index);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
        for (auto& t : threads) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    ConfusionMatrix cm(num_classes);
    for (const auto& p : parts) cm += p;
    MetricsReport r = make_report(cm, background_class);
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

TrainResult train(Trainer& trainer, const TrainConfig& cfg, const TrainHooks& hooks) {
    TrainResult result;
    auto save = [&](const std::string& name) {
        const auto dir = *hooks.checkpoint_root / name;
        save_checkpoint(dir, trainer.snapshot());
        result.checkpoints.push_back(dir);
    };
    while (!trainer.finished()) {
        const LossRecord rec = trainer.step();
        result.losses.push_back(rec);
        if (hooks.on_step) hooks.on_step(rec);
        if (cfg.eval_interval > 0 && rec.step % cfg.eval_interval == 0 && !hooks.eval_data.empty()) {
            MetricsReport report = evaluate(model_predictor(trainer.model()), hooks.eval_data,
                                            trainer.model().config.num_classes, cfg.ignore_index, cfg.background_class);
            report.step = rec.step;
            if (hooks.on_eval) hooks.on_eval(report);
        }
        if (hooks.checkpoint_root && cfg.checkpoint_interval > 0 && rec.step % cfg.checkpoint_interval == 0 &&
            !trainer.finished()) {
            char name[32];
            std::snprintf(name, sizeof name, "step-%06zu", rec.step);
            save(name);
        }
    }
    if (hooks.checkpoint_root) save("final");
    return result;
}

}  // namespace cwsam
