#include "cwsam/kernels.hpp"

#include <cstdlib>
#include <string_view>

namespace cwsam::kernels {

const KernelTable& active() {
    static const KernelTable& chosen = [] () -> const KernelTable& {
        const char* env = std::getenv("CWSAM_KERNELS");
        if (env != nullptr && std::string_view(env) == "scalar") return scalar_table();
        if (const KernelTable* simd = avx2_table()) return *simd;
        return scalar_table();
    }();
    return chosen;
}

}  // namespace cwsam::kernels
