#include "cwsam/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwsam/checkpoint.hpp"
#include "cwsam/config.hpp"
#include "cwsam/data.hpp"
#include "cwsam/fsutil.hpp"
#include "cwsam/frequency.hpp"
#include "cwsam/image_io.hpp"
#include "cwsam/model.hpp"
#include "cwsam/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cwsam::cli {
namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::optional<fs::path> env_checkpoint_dir() {
    const char* v = std::getenv(kCheckpointEnv);
    if (!v || !*v) return std::nullopt;
    return fs::path(v);
}

// A checkpoint directory, or a `train` output directory holding checkpoints/final.
fs::path resolve_checkpoint(const std::string& flag) {
    fs::path p;
    if (!flag.empty()) {
        p = flag;
    } else if (auto env = env_checkpoint_dir()) {
        p = *env;
    } else {
        throw UsageError(std::string("--ckpt not given and ") + kCheckpointEnv + " is not set");
    }
    if (fs::exists(p / "meta.json")) return p;
    if (fs::exists(p / "checkpoints" / "final" / "meta.json")) return p / "checkpoints" / "final";
    throw CheckpointError("no checkpoint found at " + p.string());
}

void apply_ablations(ModelConfig& cfg, const std::vector<std::string>& ablations) {
    for (const auto& a : ablations) apply_ablation(cfg, a);
    validate(cfg);
}

json count_json(const Model& model) {
    const ParameterCount n = count_parameters(model);
    std::map<std::string, std::pair<std::size_t, std::size_t>> groups;
    // Ablated groups are listed with zero counts.
    for (int g = 0; g <= static_cast<int>(ParamGroup::decoder_new); ++g)
        groups[std::string(group_name(static_cast<ParamGroup>(g)))] = {0, 0};
    for (const Parameter& p : model.store.all()) {
        auto& g = groups[std::string(group_name(p.group))];
        g.first += p.var.value().size();
        if (p.trainable) g.second += p.var.value().size();
    }
    json by_group = json::object();
    for (const auto& [name, g] : groups) by_group[name] = {{"total", g.first}, {"trainable", g.second}};
    return {{"total", n.total},
            {"trainable", n.trainable},
            {"frozen", n.frozen()},
            {"total_millions", static_cast<double>(n.total) / 1e6},
            {"trainable_millions", static_cast<double>(n.trainable) / 1e6},
            {"fingerprint", fingerprint(model.config)},
            {"groups", by_group}};
}

// ---- gen-data -------------------------------------------------------------

struct GenDataArgs {
    std::string out;
    std::size_t n = 50;
    std::size_t size = 128;
    std::size_t classes = 3;
    std::uint64_t seed = 0;
    double test_fraction = 0.2;
    std::size_t looks = 4;
    std::size_t regions = 6;
    int bit_depth = 16;
};

int gen_data(const GenDataArgs& a, std::ostream& out, std::ostream& err) {
    if (a.classes < 2) throw ConfigError("model.num_classes: must be >= 2 (got " + std::to_string(a.classes) + ")");
    if (a.test_fraction < 0.0 || a.test_fraction > 1.0) throw UsageError("--test-fraction must lie in [0, 1]");
    SyntheticSpec spec = default_synthetic_spec(a.size, a.classes);
    spec.looks = a.looks;
    spec.n_regions = a.regions;
    spec.validate();

    const auto n_test = static_cast<std::size_t>(std::llround(a.test_fraction * static_cast<double>(a.n)));
    const std::size_t n_train = a.n - n_test;
    const fs::path dir(a.out);
    publish_directory(dir, [&](const fs::path& tmp) {
        json manifest = json::array();
        auto emit = [&](Split split, std::size_t count) {
            for (std::size_t i = 0; i < count; ++i) {
                const Sample s = generate_synthetic(spec, sample_seed(a.seed, split, i));
                char stem[64];
                std::snprintf(stem, sizeof stem, "%s-%04zu.png", std::string(split_name(split)).c_str(), i);
                write_png(tmp / "images" / stem, from_matrix(s.image, a.bit_depth));
                write_label_png(tmp / "masks" / stem, s.mask);
                manifest.push_back({{"image", std::string("images/") + stem},
                                    {"mask", std::string("masks/") + stem},
                                    {"split", split_name(split)}});
            }
        };
        emit(Split::train, n_train);
        emit(Split::test, n_test);
        write_text_atomically(tmp / "manifest.json", manifest.dump(2) + "\n");
    });
    err << "gen-data: wrote " << a.n << " samples to " << dir.string() << "\n";
    out << json{{"manifest", (dir / "manifest.json").string()},
                {"records", a.n},
                {"train", n_train},
                {"test", n_test},
                {"size", a.size},
                {"classes", a.classes},
                {"seed", a.seed}}
               .dump(2)
        << "\n";
    return ok;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::vector<std::string> ablate;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> steps;
    std::size_t workers = 1;
};

int train_cmd(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    auto [mcfg, tcfg] = load_config(a.config);
    apply_ablations(mcfg, a.ablate);
    if (a.seed) tcfg.seed = *a.seed;
    if (a.steps) tcfg.max_steps = *a.steps;
    validate(tcfg, mcfg);

    fs::path out_dir;
    if (!a.out.empty())
        out_dir = a.out;
    else if (!tcfg.checkpoint_dir.empty())
        out_dir = tcfg.checkpoint_dir;
    else if (auto env = env_checkpoint_dir())
        out_dir = *env;
    else
        throw UsageError(std::string("no output directory: pass --out or set ") + kCheckpointEnv);

    const auto records = load_manifest(a.data);
    const auto train_samples = load_samples(records, Split::train, mcfg.image_size, tcfg.normalization);
    if (train_samples.empty()) throw DataError("manifest " + a.data + " has no train records");
    auto eval_samples = load_samples(records, Split::test, mcfg.image_size, tcfg.normalization);
    const bool eval_on_train = eval_samples.empty();
    const auto train_data = prepare_samples(train_samples, mcfg);
    const auto eval_data = eval_on_train ? train_data : prepare_samples(eval_samples, mcfg);

    Model model = build_model(mcfg, tcfg.seed);
    const ParameterCount counts = count_parameters(model);
    err << "train: " << train_data.size() << " train / " << eval_data.size() << (eval_on_train ? " (train)" : "")
        << " eval samples; parameters " << counts.total << " total, " << counts.trainable << " trainable\n";

    json report;
    publish_directory(out_dir, [&](const fs::path& tmp) {
        Trainer trainer(model, train_data, tcfg, tcfg.seed);
        const std::size_t every = std::max<std::size_t>(1, trainer.total_steps() / 20);
        std::ostringstream loss_log;
        std::ostringstream eval_log;
        TrainHooks hooks;
        hooks.eval_data = eval_data;
        hooks.checkpoint_root = tmp / "checkpoints";
        hooks.on_step = [&](const LossRecord& r) {
            loss_log << to_json(r).dump() << "\n";
            if (r.step % every == 0 || r.step == trainer.total_steps())
                err << "step " << r.step << "/" << trainer.total_steps() << " lr " << r.lr << " loss " << r.loss
                    << "\n";
        };
        hooks.on_eval = [&](const MetricsReport& m) {
            eval_log << to_json(m).dump() << "\n";
            err << "eval @" << m.step << " mIoU " << m.iou.mean << " OA " << m.overall_accuracy << "\n";
        };
        fs::create_directories(*hooks.checkpoint_root);
        const TrainResult result = train(trainer, tcfg, hooks);

        MetricsReport final_report = evaluate(model_predictor(model), eval_data, mcfg.num_classes, tcfg.ignore_index,
                                              tcfg.background_class, a.workers);
        final_report.step = trainer.steps_done();
        report = to_json(final_report);
        report["eval_split"] = eval_on_train ? "train" : "test";
        report["checkpoint"] = (out_dir / "checkpoints" / "final").string();
        report["parameters"] = {{"total", counts.total}, {"trainable", counts.trainable}};
        write_text_atomically(tmp / "loss.jsonl", loss_log.str());
        if (!eval_log.str().empty()) write_text_atomically(tmp / "eval.jsonl", eval_log.str());
        write_text_atomically(tmp / "metrics.json", report.dump(2) + "\n");
        write_text_atomically(tmp / "config.json", serialize_config(mcfg, tcfg) + "\n");
    });
    out << report.dump(2) << "\n";
    return ok;
}

// ---- eval / predict ---------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string config;
    std::vector<std::string> ablate;
    std::string split = "test";
    std::size_t workers = 1;
};

Checkpoint open_checkpoint(const std::string& flag, const std::string& config, const std::vector<std::string>& ablate) {
    const fs::path dir = resolve_checkpoint(flag);
    if (config.empty()) {
        if (!ablate.empty()) throw UsageError("--ablate needs --config when loading a checkpoint");
        return load_checkpoint(dir);
    }
    auto [mcfg, tcfg] = load_config(config);
    apply_ablations(mcfg, ablate);
    return load_checkpoint(dir, mcfg);
}

int eval_cmd(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const Checkpoint ckpt = open_checkpoint(a.ckpt, a.config, a.ablate);
    const Model model = model_from_checkpoint(ckpt);
    const Split split = parse_split(a.split);
    const auto records = load_manifest(a.data);
    const auto samples = load_samples(records, split, ckpt.model.image_size, ckpt.train.normalization);
    if (samples.empty()) throw DataError("manifest " + a.data + " has no " + a.split + " records");
    const auto data = prepare_samples(samples, ckpt.model);
    err << "eval: " << data.size() << " " << a.split << " samples, checkpoint step " << ckpt.step << "\n";
    MetricsReport r = evaluate(model_predictor(model), data, ckpt.model.num_classes, ckpt.train.ignore_index,
                               ckpt.train.background_class, a.workers);
    r.step = ckpt.step;
    out << to_json(r).dump(2) << "\n";
    return ok;
}

struct PredictArgs {
    std::string ckpt;
    std::string image;
    std::string out;
    std::string color;
};

int predict_cmd(const PredictArgs& a, std::ostream& out, std::ostream& err) {
    const Checkpoint ckpt = load_checkpoint(resolve_checkpoint(a.ckpt));
    const Model model = model_from_checkpoint(ckpt);
    const Matrix image = to_matrix(read_png(a.image), ckpt.train.normalization);
    if (image.rows() != ckpt.model.image_size || image.cols() != ckpt.model.image_size)
        throw ImageError(a.image + ": model expects a " + std::to_string(ckpt.model.image_size) + "x" +
                         std::to_string(ckpt.model.image_size) + " image");
    const Matrix lf = ckpt.model.tsi_enabled ? extract_low_frequency(image, ckpt.model.lpf_fraction) : Matrix();
    const LabelMap labels = predict(model, image, lf, image.rows(), image.cols());
    write_label_png(a.out, labels);
    if (!a.color.empty()) write_color_label_png(a.color, labels);

    std::vector<std::size_t> histogram(ckpt.model.num_classes, 0);
    for (auto l : labels.labels) ++histogram[l];
    err << "predict: wrote " << a.out << "\n";
    json j{{"out", a.out}, {"height", labels.height}, {"width", labels.width}, {"class_pixels", histogram}};
    if (!a.color.empty()) j["color"] = a.color;
    out << j.dump(2) << "\n";
    return ok;
}

// ---- params / extract-lf ----------------------------------------------------

struct ParamsArgs {
    std::string config;
    std::string ckpt;
    std::string preset;
    std::vector<std::string> ablate;
    std::optional<std::size_t> classes;
};

int params_cmd(const ParamsArgs& a, std::ostream& out, std::ostream&) {
    const int sources = !a.config.empty() + !a.ckpt.empty() + !a.preset.empty();
    if (sources != 1) throw UsageError("params needs exactly one of --config, --ckpt, --preset");
    ModelConfig cfg;
    if (!a.config.empty()) {
        cfg = load_config(a.config).first;
    } else if (!a.preset.empty()) {
        cfg = preset(a.preset);
    } else {
        cfg = load_checkpoint(resolve_checkpoint(a.ckpt)).model;
    }
    if (a.classes) cfg.num_classes = *a.classes;
    apply_ablations(cfg, a.ablate);
    // Counts do not depend on parameter values, so the seed is irrelevant.
    const Model model = build_model(cfg, 0);
    out << count_json(model).dump(2) << "\n";
    return ok;
}

struct ExtractArgs {
    std::string image;
    double fraction = 0.25;
    std::string out;
    int bit_depth = 0;
};

int extract_lf_cmd(const ExtractArgs& a, std::ostream& out, std::ostream& err) {
    if (!(a.fraction > 0.0 && a.fraction <= 1.0)) throw UsageError("--fraction must lie in (0, 1]");
    const GrayImage in = read_png(a.image);
    const Matrix lf = extract_low_frequency(to_matrix(in, Normalization::unit), a.fraction);
    const int depth = a.bit_depth == 0 ? in.bit_depth : a.bit_depth;
    write_png(a.out, from_matrix(lf, depth));
    const LowPassSpec lp = low_pass_spec(in.height, in.width, a.fraction);
    err << "extract-lf: wrote " << a.out << "\n";
    out << json{{"out", a.out},
                {"height", in.height},
                {"width", in.width},
                {"bit_depth", depth},
                {"lowpass", {{"width", lp.width}, {"height", lp.height}}}}
               .dump(2)
        << "\n";
    return ok;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Classwise SAM-adapter segmentation toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "cwsam 1.0");

    GenDataArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic speckled scene dataset with a manifest");
    c_gen->add_option("--out", gen.out, "Output directory (must be absent or empty)")->required();
    c_gen->add_option("--n", gen.n, "Number of image/mask pairs")->capture_default_str();
    c_gen->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
    c_gen->add_option("--classes", gen.classes, "Number of classes")->capture_default_str();
    c_gen->add_option("--seed", gen.seed, "Base seed")->capture_default_str();
    c_gen->add_option("--test-fraction", gen.test_fraction, "Share of samples tagged test")->capture_default_str();
    c_gen->add_option("--looks", gen.looks, "Speckle looks L")->capture_default_str();
    c_gen->add_option("--regions", gen.regions, "Region generator sites per image")->capture_default_str();
    c_gen->add_option("--bit-depth", gen.bit_depth, "Image PNG bit depth")
        ->check(CLI::IsMember({8, 16}))
        ->capture_default_str();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train a model from a config and a manifest");
    c_train->add_option("--config", tr.config, "Config JSON")->required();
    c_train->add_option("--data", tr.data, "Dataset manifest JSON")->required();
    c_train->add_option("--out", tr.out, std::string("Output directory (default: $") + kCheckpointEnv + ")");
    c_train->add_option("--ablate", tr.ablate, "Disable a module: no-adapters, no-tsi, no-fe (repeatable)");
    c_train->add_option("--seed", tr.seed, "Override train.seed");
    c_train->add_option("--steps", tr.steps, "Override train.max_steps");
    c_train->add_option("--workers", tr.workers, "Evaluation threads")->capture_default_str();

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split");
    c_eval->add_option("--ckpt", ev.ckpt, std::string("Checkpoint or train output dir (default: $") + kCheckpointEnv + ")");
    c_eval->add_option("--data", ev.data, "Dataset manifest JSON")->required();
    c_eval->add_option("--config", ev.config, "Config the checkpoint must match");
    c_eval->add_option("--ablate", ev.ablate, "Ablations applied to --config");
    c_eval->add_option("--split", ev.split, "train or test")->capture_default_str();
    c_eval->add_option("--workers", ev.workers, "Evaluation threads")->capture_default_str();

    PredictArgs pr;
    auto* c_pred = app.add_subcommand("predict", "Write a label PNG for one image");
    c_pred->add_option("--ckpt", pr.ckpt, std::string("Checkpoint or train output dir (default: $") + kCheckpointEnv + ")");
    c_pred->add_option("--image", pr.image, "Input PNG")->required();
    c_pred->add_option("--out", pr.out, "Output label PNG")->required();
    c_pred->add_option("--color", pr.color, "Optional colorized PNG");

    ParamsArgs pa;
    auto* c_params = app.add_subcommand("params", "Report total and trainable parameter counts");
    c_params->add_option("--config", pa.config, "Config JSON");
    c_params->add_option("--ckpt", pa.ckpt, "Checkpoint");
    c_params->add_option("--preset", pa.preset, "sam-base or desk-tiny");
    c_params->add_option("--ablate", pa.ablate, "Disable a module (repeatable)");
    c_params->add_option("--classes", pa.classes, "Override num_classes");

    ExtractArgs ex;
    auto* c_lf = app.add_subcommand("extract-lf", "Low-pass an image through the centered 2-D DFT");
    c_lf->add_option("--image", ex.image, "Input PNG")->required();
    c_lf->add_option("--fraction", ex.fraction, "Retained spectrum fraction per axis")->capture_default_str();
    c_lf->add_option("--out", ex.out, "Output PNG")->required();
    c_lf->add_option("--bit-depth", ex.bit_depth, "Output depth (default: input depth)")
        ->check(CLI::IsMember({0, 8, 16}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? ok : usage;
    }

    try {
        if (*c_gen) return gen_data(gen, out, err);
        if (*c_train) return train_cmd(tr, out, err);
        if (*c_eval) return eval_cmd(ev, out, err);
        if (*c_pred) return predict_cmd(pr, out, err);
        if (*c_params) return params_cmd(pa, out, err);
        if (*c_lf) return extract_lf_cmd(ex, out, err);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return usage;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return usage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << "\n";
        return input;
    } catch (const ImageError& e) {
        err << "image error: " << e.what() << "\n";
        return input;
    } catch (const CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return checkpoint;
    } catch (const TrainingDiverged& e) {
        err << "error: " << e.what() << "\n";
        return diverged;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return failure;
    }
    return usage;
}

}  // namespace cwsam::cli
