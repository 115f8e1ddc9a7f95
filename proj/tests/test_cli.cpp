#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "cwsam/checkpoint.hpp"
#include "cwsam/cli.hpp"
#include "cwsam/data.hpp"
#include "cwsam/image_io.hpp"
#include "support.hpp"

using namespace cwsam;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
    json doc() const { return json::parse(out); }
};

Result run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "cwsam");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
    return {code, out.str(), err.str()};
}

// Runs the installed binary through the shell; returns the exit status.
int run_binary(const std::string& args, std::string* out = nullptr) {
    const std::string cmd = std::string(CWSAM_BINARY) + " " + args + " 2>/dev/null";
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p != nullptr);
    std::string text;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) text.append(buf, n);
    const int status = ::pclose(p);
    if (out) *out = text;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

const char* kTinyConfig = R"({
  "model": {"preset": "desk-tiny", "image_size": 32, "patch_size": 8, "embed_dim": 16, "depth": 2,
            "num_heads": 2, "window_size": 2, "global_attn_layers": [1], "tsi_dim": 4, "neck_dim": 8,
            "decoder_dim": 8, "decoder_heads": 2, "decoder_mlp_dim": 16, "upscale_dims": [8, 6, 4],
            "classwise_hidden": 6, "classwise_channels": 3, "num_classes": 3},
  "train": {"max_steps": 4, "initial_lr": 0.001, "seed": 1}
})";

// One dataset + one trained run shared by the slower tests.
struct Fixture {
    testing::TempDir dir{"cli"};
    fs::path data = dir / "data";
    fs::path config = dir / "config.json";
    fs::path run = dir / "run";
    Fixture() {
        write_text(config, kTinyConfig);
        REQUIRE(run_cli({"gen-data", "--out", data.string(), "--n", "6", "--size", "32", "--seed", "3"}).code == 0);
        const Result r = run_cli({"train", "--config", config.string(), "--data", (data / "manifest.json").string(),
                                  "--out", run.string()});
        REQUIRE_MESSAGE(r.code == 0, r.err);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("gen-data writes the requested records deterministically") {
    testing::TempDir dir("gen");
    const Result a = run_cli({"gen-data", "--out", (dir / "a").string(), "--n", "5", "--size", "16", "--seed", "2"});
    REQUIRE(a.code == 0);
    CHECK(a.doc()["records"] == 5);
    CHECK(a.doc()["train"] == 4);
    CHECK(a.doc()["test"] == 1);
    const auto recs = load_manifest(dir / "a" / "manifest.json");
    CHECK(recs.size() == 5);
    REQUIRE(run_cli({"gen-data", "--out", (dir / "b").string(), "--n", "5", "--size", "16", "--seed", "2"}).code == 0);
    for (const char* f : {"images/train-0000.png", "masks/test-0000.png", "manifest.json"}) {
        std::ifstream x(dir / "a" / f, std::ios::binary), y(dir / "b" / f, std::ios::binary);
        CHECK(std::string(std::istreambuf_iterator<char>(x), {}) == std::string(std::istreambuf_iterator<char>(y), {}));
    }
    CHECK(read_png(dir / "a" / "images/train-0000.png").bit_depth == 16);
    // refuses to write into a non-empty directory
    CHECK(run_cli({"gen-data", "--out", (dir / "a").string(), "--n", "1"}).code != 0);
}

TEST_CASE("gen-data rejects a single class as a config error") {
    testing::TempDir dir("gen1");
    const Result r = run_cli({"gen-data", "--out", (dir / "x").string(), "--classes", "1"});
    CHECK(r.code == cli::usage);
    CHECK(r.err.find("num_classes") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "x"));
}

TEST_CASE("train produces checkpoints, logs and metrics") {
    Fixture& f = fixture();
    for (const char* p : {"checkpoints/final/arrays.bin", "checkpoints/final/meta.json", "loss.jsonl", "metrics.json",
                          "config.json"})
        CHECK_MESSAGE(fs::exists(f.run / p), p);
    std::ifstream loss(f.run / "loss.jsonl");
    std::size_t lines = 0;
    for (std::string line; std::getline(loss, line);) {
        const json j = json::parse(line);
        CHECK(j["step"] == ++lines);
    }
    CHECK(lines == 4);
    std::ifstream m(f.run / "metrics.json");
    const json metrics = json::parse(m);
    CHECK(metrics["miou"].get<double>() >= 0.0);
    CHECK(metrics["eval_split"] == "test");
    CHECK(load_checkpoint(f.run / "checkpoints/final").step == 4);
}

TEST_CASE("train refuses a missing manifest with its path") {
    Fixture& f = fixture();
    testing::TempDir dir("nomani");
    const Result r = run_cli({"train", "--config", f.config.string(), "--data", (dir / "absent.json").string(),
                              "--out", (dir / "o").string()});
    CHECK(r.code == cli::input);
    CHECK(r.err.find("absent.json") != std::string::npos);
}

TEST_CASE("train reports config errors with the field name") {
    testing::TempDir dir("badcfg");
    write_text(dir / "c.json", R"({"model": {"preset": "desk-tiny", "num_classes": 1}})");
    const Result r = run_cli({"train", "--config", (dir / "c.json").string(), "--data", "x", "--out",
                              (dir / "o").string()});
    CHECK(r.code == cli::usage);
    CHECK(r.err.find("num_classes") != std::string::npos);
}

TEST_CASE("train uses the checkpoint directory from the environment") {
    Fixture& f = fixture();
    testing::TempDir dir("env");
    ::setenv(cli::kCheckpointEnv, (dir / "envrun").string().c_str(), 1);
    const Result r = run_cli({"train", "--config", f.config.string(), "--data", (f.data / "manifest.json").string(),
                              "--steps", "1"});
    ::unsetenv(cli::kCheckpointEnv);
    CHECK(r.code == 0);
    CHECK(fs::exists(dir / "envrun" / "checkpoints" / "final" / "meta.json"));
}

TEST_CASE("eval and predict use the trained checkpoint") {
    Fixture& f = fixture();
    const Result e = run_cli({"eval", "--ckpt", f.run.string(), "--data", (f.data / "manifest.json").string()});
    REQUIRE_MESSAGE(e.code == 0, e.err);
    std::ifstream m(f.run / "metrics.json");
    const json trained = json::parse(m);
    CHECK(e.doc()["miou"] == trained["miou"]);

    const Result multi = run_cli(
        {"eval", "--ckpt", f.run.string(), "--data", (f.data / "manifest.json").string(), "--workers", "3"});
    CHECK(multi.doc()["miou"] == e.doc()["miou"]);

    const fs::path label = f.dir / "pred.png", color = f.dir / "pred_rgb.png";
    const Result p = run_cli({"predict", "--ckpt", f.run.string(), "--image",
                              (f.data / "images/test-0000.png").string(), "--out", label.string(), "--color",
                              color.string()});
    REQUIRE_MESSAGE(p.code == 0, p.err);
    const LabelMap lm = read_label_png(label);
    CHECK(lm.height == 32);
    for (auto l : lm.labels) CHECK(l < 3);
    CHECK(read_png_header(color).width == 32);
}

TEST_CASE("eval rejects a checkpoint that does not match the config") {
    Fixture& f = fixture();
    const Result r = run_cli({"eval", "--ckpt", f.run.string(), "--data", (f.data / "manifest.json").string(),
                              "--config", f.config.string(), "--ablate", "no-tsi"});
    CHECK(r.code == cli::checkpoint);
    const Result ok = run_cli(
        {"eval", "--ckpt", f.run.string(), "--data", (f.data / "manifest.json").string(), "--config", f.config.string()});
    CHECK(ok.code == 0);
    const Result missing = run_cli({"eval", "--ckpt", (f.dir / "nothing").string(), "--data",
                                    (f.data / "manifest.json").string()});
    CHECK(missing.code == cli::checkpoint);
}

TEST_CASE("an ablated run has no parameters for the removed module") {
    Fixture& f = fixture();
    testing::TempDir dir("abl");
    const Result r = run_cli({"train", "--config", f.config.string(), "--data", (f.data / "manifest.json").string(),
                              "--out", (dir / "o").string(), "--ablate", "no-adapters", "--steps", "1"});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    const Checkpoint ck = load_checkpoint(dir / "o" / "checkpoints" / "final");
    CHECK_FALSE(ck.model.adapters_enabled);
    for (const auto& [name, _] : ck.arrays) CHECK(name.find("adapter") == std::string::npos);
    const Result p = run_cli({"params", "--ckpt", (dir / "o").string()});
    CHECK(p.doc()["groups"]["adapters"]["total"] == 0);
}

TEST_CASE("params on the base preset") {
    const Result r = run_cli({"params", "--preset", "sam-base"});
    REQUIRE(r.code == 0);
    const json j = r.doc();
    CHECK(j["total"].get<std::size_t>() == j["trainable"].get<std::size_t>() + j["frozen"].get<std::size_t>());
    const double m = j["trainable_millions"].get<double>();
    CHECK(m > 15.29 * 0.85);
    CHECK(m < 15.29 * 1.15);
    CHECK(run_cli({"params"}).code == cli::usage);
    CHECK(run_cli({"params", "--preset", "nope"}).code == cli::usage);
}

TEST_CASE("extract-lf at fraction 1 reproduces the input") {
    testing::TempDir dir("lf");
    std::mt19937_64 rng(1);
    GrayImage img{16, 16, 16, {}};
    for (int i = 0; i < 256; ++i) img.pixels.push_back(static_cast<std::uint16_t>(rng() % 65536));
    write_png(dir / "in.png", img);
    const Result r = run_cli(
        {"extract-lf", "--image", (dir / "in.png").string(), "--fraction", "1.0", "--out", (dir / "o.png").string()});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    CHECK(read_png(dir / "o.png") == img);
    const Result smooth = run_cli(
        {"extract-lf", "--image", (dir / "in.png").string(), "--fraction", "0.25", "--out", (dir / "s.png").string()});
    CHECK(smooth.doc()["lowpass"]["width"] == 4);
    CHECK(run_cli({"extract-lf", "--image", (dir / "in.png").string(), "--fraction", "0", "--out",
                   (dir / "z.png").string()})
              .code == cli::usage);
    CHECK(run_cli({"extract-lf", "--image", (dir / "none.png").string(), "--out", (dir / "z.png").string()}).code ==
          cli::input);
}

TEST_CASE("usage errors") {
    CHECK(run_cli({}).code == cli::usage);
    CHECK(run_cli({"frobnicate"}).code == cli::usage);
    CHECK(run_cli({"train"}).code == cli::usage);
    const Result help = run_cli({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("gen-data") != std::string::npos);
}

TEST_CASE("the installed binary follows the same exit-code contract") {
    Fixture& f = fixture();
    std::string out;
    CHECK(run_binary("--help", &out) == 0);
    CHECK(out.find("extract-lf") != std::string::npos);
    CHECK(run_binary("params --preset desk-tiny", &out) == 0);
    CHECK(json::parse(out)["total"] == 326168);
    CHECK(run_binary("params --preset desk-tiny --classes 3", &out) == 0);
    CHECK(json::parse(out)["total"] == 323848);
    CHECK(run_binary("gen-data --out " + (f.dir / "bin1").string() + " --classes 1") == cli::usage);
    CHECK(run_binary("eval --ckpt " + (f.dir / "missing").string() + " --data " + (f.data / "manifest.json").string()) ==
          cli::checkpoint);
    CHECK(run_binary("bogus") == cli::usage);
}
