#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <string>

#include "cwsam/config.hpp"
#include "support.hpp"

using namespace cwsam;
using nlohmann::json;

namespace {

// Message of the ConfigError thrown by parse_config, or "" if none.
std::string parse_error(const json& doc) {
    try {
        parse_config(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

bool mentions(const std::string& msg, const std::string& field) { return msg.find(field) != std::string::npos; }

}  // namespace

TEST_CASE("sam-base preset") {
    const ModelConfig c = preset("sam-base");
    CHECK(c.patch_size == 16);
    CHECK(c.embed_dim == 768);
    CHECK(c.depth == 12);
    CHECK(c.num_heads == 12);
    CHECK(c.window_size == 14);
    CHECK(c.global_attn_layers == std::vector<std::size_t>{2, 5, 8, 11});
    CHECK(c.adapter_hidden_dim() == 192);
    CHECK(c.tsi_dim == 24);
    CHECK(c.neck_dim == 256);
    CHECK(c.decoder_dim == 256);
    CHECK(c.upscale_dims == std::vector<std::size_t>{256, 64, 32});
    CHECK(c.classwise_channels == 32);
    CHECK(c.num_mask_slots == 4);
    CHECK(c.grid_size() == 64);
    CHECK_NOTHROW(validate(c));
}

TEST_CASE("desk-tiny preset keeps the sam-base topology") {
    const ModelConfig c = preset("desk-tiny"), base = preset("sam-base");
    CHECK(c.image_size == 128);
    CHECK(c.embed_dim == 64);
    CHECK(c.depth == 4);
    CHECK(c.num_heads == 4);
    CHECK(c.window_size == 4);
    CHECK(c.global_attn_layers == std::vector<std::size_t>{1, 3});
    CHECK(c.tsi_dim == 8);
    CHECK(c.neck_dim == 32);
    CHECK(c.decoder_dim == 32);
    CHECK(c.upscale_dims == std::vector<std::size_t>{32, 16, 8});
    CHECK(c.classwise_channels == 8);
    CHECK(c.adapter_hidden_dim() == 16);
    CHECK(c.patch_size == base.patch_size);
    CHECK(c.adapter_hidden_ratio == base.adapter_hidden_ratio);
    CHECK(c.num_mask_slots == base.num_mask_slots);
    CHECK_NOTHROW(validate(c));
}

TEST_CASE("unknown preset is rejected") { CHECK_THROWS_AS(preset("vit-huge"), ConfigError); }

TEST_CASE("load_config accepts the documented schema") {
    testing::TempDir dir("config");
    const auto path = dir / "c.json";
    std::ofstream(path) << R"({"model": {"image_size": 1024, "patch_size": 16}, "train": {"initial_lr": 0.0002}})";
    const auto [m, t] = load_config(path);
    CHECK(m.grid_size() == 64);
    CHECK(t.initial_lr == 0.0002);
}

TEST_CASE("invariant violations name the field") {
    CHECK(mentions(parse_error({{"model", {{"image_size", 100}, {"patch_size", 16}}}}), "model.image_size"));
    CHECK(mentions(parse_error({{"model", {{"lpf_fraction", 0.0}}}}), "model.lpf_fraction"));
    CHECK(mentions(parse_error({{"model", {{"lpf_fraction", 1.5}}}}), "model.lpf_fraction"));
    CHECK(mentions(parse_error({{"model", {{"num_heads", 7}}}}), "model.num_heads"));
    CHECK(mentions(parse_error({{"model", {{"global_attn_layers", {2, 12}}}}}), "model.global_attn_layers"));
    CHECK(mentions(parse_error({{"model", {{"num_classes", 1}}}}), "model.num_classes"));
    CHECK(mentions(parse_error({{"model", {{"num_mask_slots", 0}}}}), "model.num_mask_slots"));
    CHECK(mentions(parse_error({{"model", {{"adapter_hidden_ratio", 0.0001}}}}), "model.adapter_hidden_ratio"));
    CHECK(mentions(parse_error({{"train", {{"initial_lr", 0.0}}}}), "train.initial_lr"));
    CHECK(mentions(parse_error({{"train", {{"class_weights", {1.0, 1.0}}}}}), "train.class_weights"));
    CHECK(mentions(parse_error({{"train", {{"class_weights", {1.0, 1.0, -1.0, 1.0, 1.0}}}}}), "train.class_weights"));
}

TEST_CASE("class_weights must match num_classes") {
    CHECK(parse_error({{"model", {{"num_classes", 5}}}, {"train", {{"class_weights", {1.5, 1, 0.5, 1.9, 0.1}}}}})
              .empty());
    CHECK_FALSE(
        parse_error({{"model", {{"num_classes", 4}}}, {"train", {{"class_weights", {1.5, 1, 0.5, 1.9, 0.1}}}}})
            .empty());
}

TEST_CASE("unknown keys are hard errors") {
    CHECK(mentions(parse_error({{"model", {{"embed_dimm", 768}}}}), "embed_dimm"));
    CHECK(mentions(parse_error({{"train", {{"lr", 1e-3}}}}), "lr"));
    CHECK(mentions(parse_error({{"optimizer", json::object()}}), "optimizer"));
}

TEST_CASE("type errors name the field") {
    CHECK(mentions(parse_error({{"model", {{"depth", "twelve"}}}}), "model.depth"));
}

TEST_CASE("malformed JSON and missing files") {
    testing::TempDir dir("config");
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
}

TEST_CASE("serialize -> load round trips both presets unchanged") {
    testing::TempDir dir("config");
    for (const char* name : {"sam-base", "desk-tiny"}) {
        const ModelConfig m = preset(name);
        TrainConfig t;
        t.class_weights = {1.5, 1, 0.5, 1.9, 0.1};
        t.seed = 1234567890123ULL;
        t.initial_lr = 2e-4;
        const auto path = dir / (std::string(name) + ".json");
        std::ofstream(path) << serialize_config(m, t);
        const auto [m2, t2] = load_config(path);
        CHECK(m2 == m);
        CHECK(t2 == t);
        CHECK(fingerprint(m2) == fingerprint(m));
    }
}

TEST_CASE("fingerprint separates configs and is stable") {
    const ModelConfig a = preset("desk-tiny");
    ModelConfig b = a;
    CHECK(fingerprint(a) == fingerprint(b));
    CHECK(fingerprint(a).size() == 16);
    b.num_classes = 6;
    CHECK(fingerprint(a) != fingerprint(b));
    b = a;
    apply_ablation(b, "no-tsi");
    CHECK(fingerprint(a) != fingerprint(b));
}

TEST_CASE("ablation names") {
    ModelConfig c = preset("desk-tiny");
    apply_ablation(c, "no-adapters");
    apply_ablation(c, "no-tsi");
    apply_ablation(c, "no-fe");
    CHECK_FALSE(c.adapters_enabled);
    CHECK_FALSE(c.tsi_enabled);
    CHECK_FALSE(c.feature_enhance_enabled);
    CHECK_THROWS_AS(apply_ablation(c, "no-decoder"), ConfigError);
}

TEST_CASE("preset key inside model object selects the base") {
    const auto [m, t] = parse_config({{"model", {{"preset", "desk-tiny"}, {"num_classes", 3}}}});
    CHECK(m.embed_dim == 64);
    CHECK(m.num_classes == 3);
}
