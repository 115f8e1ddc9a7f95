#pragma once

// `cwsam` command line: gen-data, train, eval, predict, params, extract-lf.
// Data-bearing results go to `out` as a single JSON document; logs go to `err`.

#include <iosfwd>

namespace cwsam::cli {

enum ExitCode : int {
    ok = 0,
    failure = 1,
    usage = 2,       // bad flags or invalid config
    input = 3,       // missing/unreadable data or images
    checkpoint = 4,  // unreadable checkpoint or fingerprint mismatch
    diverged = 5,    // non-finite training loss
};

// Default checkpoint location when --out / --ckpt are not given.
inline constexpr const char* kCheckpointEnv = "CWSAM_CHECKPOINT_DIR";

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cwsam::cli
