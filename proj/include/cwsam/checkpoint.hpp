#pragma once

// Checkpoint directory:
//   arrays.bin  "CWSAMCK1", u64 count, then per array: u32 name length, name,
//               u32 dtype (1 = f64), u64 rows, u64 cols, rows*cols little-endian f64
//   meta.json   configs, fingerprint, step, RNG state, freeze mask, optimizer settings

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cwsam/config.hpp"
#include "cwsam/matrix.hpp"
#include "cwsam/model.hpp"
#include "cwsam/params.hpp"

namespace cwsam {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using ArrayMap = std::map<std::string, Matrix>;

struct Checkpoint {
    ModelConfig model;
    TrainConfig train;
    std::string fingerprint;     // fingerprint(model) at save time
    std::uint64_t init_seed = 0; // seed the parameters were initialised from
    std::size_t step = 0;
    std::string rng_state;       // shuffling engine, textual form
    std::vector<std::size_t> order;  // current epoch's sample order
    std::size_t cursor = 0;          // position inside `order`
    FreezeMask freeze_mask;
    nlohmann::json optimizer;    // hyperparameters, for the record
    ArrayMap arrays;             // parameters by name, plus optimizer moments
};

void write_arrays(const std::filesystem::path& file, const ArrayMap& arrays);
ArrayMap read_arrays(const std::filesystem::path& file);

// The directory must be absent or empty; it appears only once complete.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
// Also rejects a checkpoint whose model fingerprint differs from `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig& expected);

ArrayMap capture_parameters(const Model& model);
// Requires exactly one array per parameter with a matching shape; arrays whose
// names start with "adamw." are ignored.
void restore_parameters(Model& model, const ArrayMap& arrays);

// Rebuilds the model a checkpoint was taken from.
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace cwsam
