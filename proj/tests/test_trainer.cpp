#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "cwsam/checkpoint.hpp"
#include "cwsam/trainer.hpp"
#include "support.hpp"

using namespace cwsam;

namespace {

ModelConfig tiny_config() {
    ModelConfig c = preset("desk-tiny");
    c.image_size = 32;
    c.patch_size = 8;
    c.embed_dim = 16;
    c.depth = 2;
    c.num_heads = 2;
    c.window_size = 2;
    c.global_attn_layers = {1};
    c.tsi_dim = 4;
    c.neck_dim = 8;
    c.decoder_dim = 8;
    c.decoder_heads = 2;
    c.decoder_mlp_dim = 16;
    c.upscale_dims = {8, 6, 4};
    c.classwise_hidden = 6;
    c.classwise_channels = 3;
    c.num_classes = 3;
    return c;
}

TrainConfig tiny_train(std::size_t steps, std::uint64_t seed = 0) {
    TrainConfig t;
    t.max_steps = steps;
    t.initial_lr = 1e-3;
    t.seed = seed;
    return t;
}

std::vector<PreparedSample> tiny_data(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
    const auto raw = synthetic_split(default_synthetic_spec(c.image_size, c.num_classes), seed, Split::train, n);
    return prepare_samples(raw, c);
}

bool same_parameters(const Model& a, const Model& b) {
    const auto& pa = a.store.all();
    const auto& pb = b.store.all();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (pa[i].name != pb[i].name || !(pa[i].var.value() == pb[i].var.value())) return false;
    return true;
}

// Parameter count from the architecture's layer list.
std::size_t closed_form_total(const ModelConfig& c) {
    const std::size_t D = c.embed_dim, P = c.patch_size, G = c.grid_size(), N = c.neck_dim, d = c.decoder_dim;
    const std::size_t h = c.adapter_hidden_dim(), r = c.mlp_ratio * D, t = c.tsi_dim, S = c.num_mask_slots;
    const std::size_t i = d / c.decoder_attn_downsample, m = c.decoder_mlp_dim;
    const std::size_t u1 = c.upscale_dims[1], u2 = c.upscale_dims[2], ch = c.classwise_hidden;
    const std::size_t cc = c.classwise_channels, K = c.num_classes;

    std::size_t n = P * P * D + D + G * G * D;
    std::size_t block = 2 * D + (3 * D * D + 3 * D) + (D * D + D) + 2 * D + (D * r + r) + (r * D + D);
    if (c.adapters_enabled) block += 2 * (D * h + h + h * D + D);
    n += c.depth * block;
    n += D * N + 2 * N + 9 * N * N + 2 * N;
    if (c.tsi_enabled) n += (D * t + t) + (P * P * t + t) + c.depth * (t * t + t) + (t * D + D);
    n += S * d + G * G * d;
    if (N != d) n += N * d + d;
    const std::size_t cross = 3 * (d * i + i) + (i * d + d);
    n += 2 * (4 * (d * d + d) + 2 * cross + 4 * 2 * d + (d * m + m) + (m * d + d));
    auto upscaler = [&](std::size_t in) { return (4 * u1 * in + u1) + 2 * u1 + (u1 * u2 + u2); };
    n += upscaler(d);
    if (c.feature_enhance_enabled) n += upscaler(N);
    n += (4 * ch * 2 * u2 + ch) + 2 * ch + (cc * K * 9 * ch + cc * K);
    n += S * (2 * (d * d + d) + d * cc + cc);
    return n;
}

}  // namespace

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 2e-4, 0.0) == doctest::Approx(2e-4));
    CHECK(cosine_lr(50, 100, 2e-4, 0.0) == doctest::Approx(1e-4));
    CHECK(cosine_lr(100, 100, 2e-4, 1e-6) == doctest::Approx(1e-6));
    CHECK(cosine_lr(25, 100, 1.0, 0.0) == doctest::Approx((1 + std::cos(std::numbers::pi / 4)) / 2));
    for (std::size_t s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, 1.0, 0.1) <= cosine_lr(s - 1, 100, 1.0, 0.1));
    CHECK_THROWS_AS(cosine_lr(101, 100, 1.0, 0.0), std::out_of_range);
    CHECK_THROWS_AS(cosine_lr(0, 0, 1.0, 0.0), std::out_of_range);
}

TEST_CASE("AdamW matches a hand-computed step") {
    ParameterStore store(FreezePolicy::peft, 0);
    ag::Var w = store.add("w", ParamGroup::adapters, Matrix(1, 2, std::vector<double>{1.0, -2.0}));
    AdamW opt(store, {0.9, 0.999, 1e-8, 0.1});
    w.node()->grad_buffer() = Matrix(1, 2, std::vector<double>{0.5, -0.25});
    opt.step(store, 0.01);
    // t=1: mhat = g, vhat = g^2, update = lr * g / (|g| + eps); decay first: w * (1 - lr*wd)
    const double a = 1.0 * (1 - 0.001) - 0.01 * 0.5 / (0.5 + 1e-8);
    const double b = -2.0 * (1 - 0.001) - 0.01 * -0.25 / (0.25 + 1e-8);
    CHECK(w.value()[0] == doctest::Approx(a).epsilon(1e-15));
    CHECK(w.value()[1] == doctest::Approx(b).epsilon(1e-15));

    // t=2 with gradient g2
    w.node()->grad_buffer() = Matrix(1, 2, std::vector<double>{-1.0, 0.0});
    opt.step(store, 0.01);
    const double m = 0.9 * 0.05 + 0.1 * -1.0, v = 0.999 * 0.00025 + 0.001 * 1.0;
    const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
    CHECK(w.value()[0] == doctest::Approx(a * (1 - 0.001) - 0.01 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-14));
}

TEST_CASE("optimizer state exists only for trainable parameters") {
    const Model m = build_model(tiny_config(), 1);
    const AdamW opt(m.store, {});
    std::size_t trainable = 0;
    for (const auto& p : m.store.all()) {
        CHECK(opt.has_state(p.name) == p.trainable);
        trainable += p.trainable;
    }
    CHECK(opt.state_size() == trainable);
}

TEST_CASE("a zero learning-rate step leaves every parameter unchanged") {
    const ModelConfig c = tiny_config();
    Model m = build_model(c, 2), ref = build_model(c, 2);
    const auto data = tiny_data(c, 2, 3);
    TrainConfig t = tiny_train(3);
    t.initial_lr = 0.0;
    Trainer tr(m, data, t, 2);
    tr.step();
    CHECK(same_parameters(m, ref));
}

TEST_CASE("frozen parameters never change; trainable ones do") {
    const ModelConfig c = tiny_config();
    Model m = build_model(c, 4);
    const Model ref = build_model(c, 4);
    const auto data = tiny_data(c, 3, 5);
    Trainer tr(m, data, tiny_train(4), 4);
    while (!tr.finished()) tr.step();
    std::size_t changed = 0;
    for (std::size_t i = 0; i < m.store.all().size(); ++i) {
        const auto& p = m.store.all()[i];
        const bool same = p.var.value() == ref.store.all()[i].var.value();
        if (!p.trainable) CHECK_MESSAGE(same, p.name);
        changed += !same;
    }
    CHECK(changed > 0);
    CHECK(m.store.find("tsi.shared_lift.weight")->var.value() != ref.store.find("tsi.shared_lift.weight")->var.value());
}

TEST_CASE("training is deterministic for a fixed seed") {
    const ModelConfig c = tiny_config();
    const auto data = tiny_data(c, 3, 6);
    Model a = build_model(c, 7), b = build_model(c, 7);
    Trainer ta(a, data, tiny_train(5, 3), 7), tb(b, data, tiny_train(5, 3), 7);
    const auto la = train(ta, tiny_train(5, 3)).losses, lb = train(tb, tiny_train(5, 3)).losses;
    CHECK(la == lb);
    CHECK(same_parameters(a, b));
}

TEST_CASE("resume from a snapshot is bit-exact") {
    const ModelConfig c = tiny_config();
    const auto data = tiny_data(c, 3, 8);
    const TrainConfig t = tiny_train(7, 5);

    Model straight = build_model(c, 9);
    Trainer ts(straight, data, t, 9);
    const auto full = train(ts, t).losses;

    Model first = build_model(c, 9);
    Trainer t1(first, data, t, 9);
    for (int i = 0; i < 4; ++i) t1.step();  // stops mid-epoch (cursor 1 of 3)
    testing::TempDir dir("resume");
    save_checkpoint(dir / "ck", t1.snapshot());

    const Checkpoint ck = load_checkpoint(dir / "ck", c);
    Model second = model_from_checkpoint(ck);
    Trainer t2(second, data, t, ck.init_seed);
    t2.restore(ck);
    CHECK(t2.steps_done() == 4);
    std::vector<LossRecord> tail;
    while (!t2.finished()) tail.push_back(t2.step());
    REQUIRE(tail.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) CHECK(tail[i] == full[4 + i]);
    CHECK(same_parameters(second, straight));

    SUBCASE("restore rejects a different training config") {
        Model other = build_model(c, 9);
        Trainer t3(other, data, tiny_train(7, 6), 9);
        CHECK_THROWS_AS(t3.restore(ck), CheckpointError);
    }
    SUBCASE("restore rejects a different dataset size") {
        Model other = build_model(c, 9);
        const auto more = tiny_data(c, 4, 8);
        Trainer t3(other, more, t, 9);
        CHECK_THROWS_AS(t3.restore(ck), CheckpointError);
    }
}

TEST_CASE("checkpoint round trip and fingerprint rejection") {
    const ModelConfig c = tiny_config();
    Model m = build_model(c, 10);
    const auto data = tiny_data(c, 2, 11);
    Trainer tr(m, data, tiny_train(2), 10);
    tr.step();
    testing::TempDir dir("ckpt");
    const Checkpoint ck = tr.snapshot();
    save_checkpoint(dir / "a", ck);
    CHECK(std::filesystem::exists(dir / "a" / "arrays.bin"));
    CHECK(std::filesystem::exists(dir / "a" / "meta.json"));
    const Checkpoint back = load_checkpoint(dir / "a");
    CHECK(back.arrays == ck.arrays);
    CHECK(back.model == ck.model);
    CHECK(back.train == ck.train);
    CHECK(back.step == 1);
    CHECK(back.freeze_mask == ck.freeze_mask);
    const Model restored = model_from_checkpoint(back);
    CHECK(same_parameters(restored, m));

    ModelConfig other = c;
    other.num_classes = 4;
    CHECK_THROWS_AS(load_checkpoint(dir / "a", other), CheckpointError);
    CHECK_THROWS_AS(save_checkpoint(dir / "a", ck), std::exception);  // refuses to overwrite
    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), CheckpointError);

    ArrayMap arrays = ck.arrays;
    arrays.erase("decoder.mask_tokens");
    Model fresh = build_model(c, 0);
    CHECK_THROWS_AS(restore_parameters(fresh, arrays), CheckpointError);
}

TEST_CASE("array file round trip and corruption") {
    testing::TempDir dir("arrays");
    std::mt19937_64 rng(12);
    ArrayMap a{{"x", testing::random_matrix(3, 4, rng)}, {"y/z", testing::random_matrix(1, 1, rng)}, {"e", Matrix(0, 0)}};
    a["x"][0] = -0.0;
    a["x"][1] = std::numeric_limits<double>::denorm_min();
    write_arrays(dir / "f.bin", a);
    const ArrayMap b = read_arrays(dir / "f.bin");
    CHECK(b == a);
    CHECK(std::signbit(b.at("x")[0]));
    std::filesystem::resize_file(dir / "f.bin", std::filesystem::file_size(dir / "f.bin") - 3);
    CHECK_THROWS_AS(read_arrays(dir / "f.bin"), CheckpointError);
}

TEST_CASE("evaluation") {
    const ModelConfig c = tiny_config();
    auto data = tiny_data(c, 6, 13);

    SUBCASE("oracle predictor scores 1") {
        const Predictor oracle = [](const PreparedSample& s) { return s.mask; };
        const MetricsReport r = evaluate(oracle, data, 3, 255);
        CHECK(r.iou.mean == 1.0);
        CHECK(r.overall_accuracy == 1.0);
    }
    SUBCASE("constant predictor on a half/half map") {
        PreparedSample s;
        s.mask = LabelMap{2, 2, {0, 0, 1, 1}};
        const std::vector<PreparedSample> one{s};
        const Predictor zeros = [](const PreparedSample& p) {
            return LabelMap{p.mask.height, p.mask.width, std::vector<std::uint8_t>(p.mask.labels.size(), 0)};
        };
        const MetricsReport r = evaluate(zeros, one, 2, 255);
        CHECK(r.overall_accuracy == doctest::Approx(0.5));
        CHECK(r.iou.mean == doctest::Approx(0.25));
    }
    SUBCASE("sharded evaluation equals sequential") {
        const Model m = build_model(c, 14);
        const Predictor p = model_predictor(m);
        const ConfusionMatrix seq = confusion(p, data, 3, 255);
        const MetricsReport one = evaluate(p, data, 3, 255, -1, 1), four = evaluate(p, data, 3, 255, -1, 4);
        CHECK(one.iou.per_class == four.iou.per_class);
        CHECK(one.overall_accuracy == four.overall_accuracy);
        CHECK(one.overall_accuracy == overall_accuracy(seq));
    }
    SUBCASE("empty evaluation set") {
        const Predictor oracle = [](const PreparedSample& s) { return s.mask; };
        CHECK_THROWS_AS(evaluate(oracle, std::span<const PreparedSample>{}, 3, 255), std::invalid_argument);
    }
}

TEST_CASE("parameter counts follow the closed form") {
    ModelConfig tiny = preset("desk-tiny");
    tiny.num_classes = 3;
    CHECK(count_parameters(build_model(tiny, 0)).total == closed_form_total(tiny));
    for (const char* abl : {"no-adapters", "no-tsi", "no-fe"}) {
        ModelConfig a = tiny;
        apply_ablation(a, abl);
        CHECK_MESSAGE(count_parameters(build_model(a, 0)).total == closed_form_total(a), abl);
    }
    ModelConfig odd = tiny_config();
    odd.decoder_dim = 12;
    odd.upscale_dims[0] = 12;
    CHECK(count_parameters(build_model(odd, 0)).total == closed_form_total(odd));

    // sam-base: trainable is everything but the patch projection and the ViT block weights
    const ModelConfig base = preset("sam-base");
    const Model m = build_model(base, 0);
    const ParameterCount pc = count_parameters(m);
    CHECK(pc.total == closed_form_total(base));
    const std::size_t D = base.embed_dim, r = base.mlp_ratio * D;
    const std::size_t frozen = 16 * 16 * D + D + base.depth * (4 * D + 3 * D * D + 3 * D + D * D + D + 2 * D * r + r + D);
    CHECK(pc.frozen() == frozen);
}

TEST_CASE("non-finite loss stops training with the step number") {
    ModelConfig c = tiny_config();
    c.tsi_enabled = false;
    Model m = build_model(c, 15);
    auto data = tiny_data(c, 2, 16);
    for (auto& s : data) s.image(3, 3) = std::numeric_limits<double>::quiet_NaN();
    Trainer tr(m, data, tiny_train(3), 15);
    try {
        tr.step();
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK(e.step() == 1);
    }
}

TEST_CASE("trainer input validation") {
    const ModelConfig c = tiny_config();
    Model m = build_model(c, 0);
    CHECK_THROWS_AS(Trainer(m, std::span<const PreparedSample>{}, tiny_train(1), 0), std::invalid_argument);
    const auto data = tiny_data(c, 3, 0);
    TrainConfig t;
    t.epochs = 2;
    t.batch_size = 2;
    Trainer tr(m, data, t, 0);
    CHECK(tr.total_steps() == 4);
    const std::vector<Sample> wrong{generate_synthetic(default_synthetic_spec(16, 3), 0)};
    CHECK_THROWS_AS(prepare_samples(wrong, c), std::invalid_argument);
}

TEST_CASE("checkpoints land at the configured interval plus final") {
    const ModelConfig c = tiny_config();
    Model m = build_model(c, 17);
    const auto data = tiny_data(c, 2, 17);
    TrainConfig t = tiny_train(5);
    t.checkpoint_interval = 2;
    t.eval_interval = 5;
    Trainer tr(m, data, t, 17);
    testing::TempDir dir("interval");
    TrainHooks hooks;
    hooks.checkpoint_root = dir.path();
    hooks.eval_data = data;
    std::size_t evals = 0;
    hooks.on_eval = [&](const MetricsReport& r) {
        ++evals;
        CHECK(r.step == 5);
    };
    const TrainResult res = train(tr, t, hooks);
    CHECK(res.losses.size() == 5);
    CHECK(evals == 1);
    REQUIRE(res.checkpoints.size() == 3);
    CHECK(res.checkpoints[0].filename() == "step-000002");
    CHECK(res.checkpoints[2].filename() == "final");
    CHECK(load_checkpoint(res.checkpoints[2]).step == 5);
}

TEST_CASE("loss goes down over a short run in most seeds") {
    const ModelConfig c = tiny_config();
    const auto data = tiny_data(c, 4, 18);
    int decreased = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Model m = build_model(c, seed);
        TrainConfig t = tiny_train(12, seed);
        t.initial_lr = 2e-3;
        auto mean_loss = [&] {
            double s = 0;
            ag::NoGradGuard ng;
            for (const auto& d : data) s += sample_loss(m, d, t).value()[0];
            return s / static_cast<double>(data.size());
        };
        const double before = mean_loss();
        Trainer tr(m, data, t, seed);
        train(tr, t);
        decreased += mean_loss() < before;
    }
    CHECK(decreased >= 4);
}
