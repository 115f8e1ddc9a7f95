#include "cwsam/fsutil.hpp"

#include <atomic>
#include <fstream>
#include <stdexcept>
#include <string>
#include <system_error>

#include <unistd.h>

namespace fs = std::filesystem;

namespace cwsam {
namespace {

fs::path temp_sibling(const fs::path& path, std::string_view tag) {
    static std::atomic<unsigned> counter{0};
    fs::path p = path;
    if (p.filename().empty()) p = p.parent_path();
    return p.parent_path() / ("." + p.filename().string() + "." + std::string(tag) + "-" +
                              std::to_string(::getpid()) + "-" + std::to_string(counter++));
}

}  // namespace

void write_atomically(const fs::path& path, const std::function<void(const fs::path&)>& write) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const fs::path tmp = temp_sibling(path, "tmp");
    try {
        write(tmp);
        fs::rename(tmp, path);
    } catch (...) {
        std::error_code ec;
        fs::remove(tmp, ec);
        throw;
    }
}

void write_text_atomically(const fs::path& path, std::string_view text) {
    write_atomically(path, [&](const fs::path& tmp) {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.close();
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    });
}

void publish_directory(const fs::path& dir, const std::function<void(const fs::path&)>& fill) {
    if (fs::exists(dir) && !(fs::is_directory(dir) && fs::is_empty(dir)))
        throw std::runtime_error("output directory " + dir.string() + " exists and is not empty");
    const fs::path parent = dir.has_parent_path() ? dir.parent_path() : fs::path(".");
    fs::create_directories(parent);
    const fs::path tmp = temp_sibling(dir, "partial");
    try {
        fs::create_directory(tmp);
        fill(tmp);
        if (fs::exists(dir)) fs::remove(dir);
        fs::rename(tmp, dir);
    } catch (...) {
        std::error_code ec;
        fs::remove_all(tmp, ec);
        throw;
    }
}

}  // namespace cwsam
