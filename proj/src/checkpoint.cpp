#include "cwsam/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "cwsam/fsutil.hpp"

namespace fs = std::filesystem;

namespace cwsam {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint byte layout assumes a little-endian host");

constexpr char kMagic[8] = {'C', 'W', 'S', 'A', 'M', 'C', 'K', '1'};
constexpr std::uint32_t kDtypeF64 = 1;
constexpr std::string_view kOptimizerPrefix = "adamw.";

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const fs::path& file) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw CheckpointError(file.string() + ": truncated");
    return v;
}

}  // namespace

void write_arrays(const fs::path& file, const ArrayMap& arrays) {
    write_atomically(file, [&](const fs::path& tmp) {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw CheckpointError("cannot write " + tmp.string());
        out.write(kMagic, sizeof kMagic);
        put<std::uint64_t>(out, arrays.size());
        for (const auto& [name, m] : arrays) {
            put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<std::uint32_t>(out, kDtypeF64);
            put<std::uint64_t>(out, m.rows());
            put<std::uint64_t>(out, m.cols());
            out.write(reinterpret_cast<const char*>(m.ptr()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        }
        out.close();
        if (!out) throw CheckpointError("write failed: " + tmp.string());
    });
}

ArrayMap read_arrays(const fs::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + file.string());
    char magic[sizeof kMagic];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw CheckpointError(file.string() + ": not a checkpoint array file");
    const auto count = get<std::uint64_t>(in, file);
    ArrayMap arrays;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(in, file);
        if (len > 4096) throw CheckpointError(file.string() + ": corrupt array name");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw CheckpointError(file.string() + ": truncated");
        if (get<std::uint32_t>(in, file) != kDtypeF64)
            throw CheckpointError(file.string() + ": array " + name + " has an unsupported dtype");
        const auto rows = get<std::uint64_t>(in, file), cols = get<std::uint64_t>(in, file);
        if (rows != 0 && cols > (std::uint64_t{1} << 40) / rows) throw CheckpointError(file.string() + ": corrupt shape");
        Matrix m(rows, cols);
        if (!in.read(reinterpret_cast<char*>(m.ptr()), static_cast<std::streamsize>(m.size() * sizeof(double))))
            throw CheckpointError(file.string() + ": truncated");
        if (!arrays.emplace(std::move(name), std::move(m)).second)
            throw CheckpointError(file.string() + ": duplicate array name");
    }
    return arrays;
}

void save_checkpoint(const fs::path& dir, const Checkpoint& c) {
    nlohmann::json meta{
        {"format", "cwsam-checkpoint-1"},
        {"model", to_json(c.model)},
        {"train", to_json(c.train)},
        {"fingerprint", c.fingerprint},
        {"init_seed", c.init_seed},
        {"step", c.step},
        {"rng_state", c.rng_state},
        {"order", c.order},
        {"cursor", c.cursor},
        {"freeze_mask", c.freeze_mask},
        {"optimizer", c.optimizer},
    };
    publish_directory(dir, [&](const fs::path& tmp) {
        write_arrays(tmp / "arrays.bin", c.arrays);
        write_text_atomically(tmp / "meta.json", meta.dump(2) + "\n");
    });
}

Checkpoint load_checkpoint(const fs::path& dir) {
    const fs::path meta_path = dir / "meta.json";
    std::ifstream in(meta_path);
    if (!in) throw CheckpointError("cannot open " + meta_path.string());
    Checkpoint c;
    try {
        const nlohmann::json meta = nlohmann::json::parse(in);
        if (meta.at("format") != "cwsam-checkpoint-1") throw CheckpointError(meta_path.string() + ": unknown format");
        c.model = model_config_from_json(meta.at("model"));
        c.train = train_config_from_json(meta.at("train"));
        c.fingerprint = meta.at("fingerprint").get<std::string>();
        c.init_seed = meta.at("init_seed").get<std::uint64_t>();
        c.step = meta.at("step").get<std::size_t>();
        c.rng_state = meta.at("rng_state").get<std::string>();
        c.order = meta.at("order").get<std::vector<std::size_t>>();
        c.cursor = meta.at("cursor").get<std::size_t>();
        c.freeze_mask = meta.at("freeze_mask").get<FreezeMask>();
        c.optimizer = meta.at("optimizer");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(meta_path.string() + ": " + e.what());
    }
    if (fingerprint(c.model) != c.fingerprint)
        throw CheckpointError(meta_path.string() + ": stored fingerprint does not match the stored model config");
    c.arrays = read_arrays(dir / "arrays.bin");
    return c;
}

Checkpoint load_checkpoint(const fs::path& dir, const ModelConfig& expected) {
    Checkpoint c = load_checkpoint(dir);
    const std::string want = fingerprint(expected);
    if (c.fingerprint != want)
        throw CheckpointError("checkpoint " + dir.string() + " was saved for model fingerprint " + c.fingerprint +
                              ", config has " + want);
    return c;
}

ArrayMap capture_parameters(const Model& model) {
    ArrayMap arrays;
    for (const Parameter& p : model.store.all()) arrays.emplace(p.name, p.var.value());
    return arrays;
}

void restore_parameters(Model& model, const ArrayMap& arrays) {
    for (Parameter& p : model.store.all()) {
        auto it = arrays.find(p.name);
        if (it == arrays.end()) throw CheckpointError("checkpoint has no array for parameter " + p.name);
        if (it->second.rows() != p.var.rows() || it->second.cols() != p.var.cols())
            throw CheckpointError("checkpoint array " + p.name + " has the wrong shape");
        p.var.mutable_value() = it->second;
    }
    for (const auto& [name, _] : arrays)
        if (!name.starts_with(kOptimizerPrefix) && !model.store.find(name))
            throw CheckpointError("checkpoint array " + name + " matches no model parameter");
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
    Model m = build_model(ckpt.model, ckpt.init_seed);
    restore_parameters(m, ckpt.arrays);
    const FreezeMask mask = m.store.freeze_mask();
    if (!ckpt.freeze_mask.empty() && mask != ckpt.freeze_mask)
        throw CheckpointError("checkpoint freeze mask differs from the model's freeze policy");
    return m;
}

}  // namespace cwsam
