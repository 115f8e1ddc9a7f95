#pragma once

#include <filesystem>
#include <functional>
#include <string_view>

namespace cwsam {

// Calls write(tmp) with a sibling temporary path, then renames tmp onto `path`.
// On any exception the temporary is removed and `path` is left untouched.
void write_atomically(const std::filesystem::path& path,
                      const std::function<void(const std::filesystem::path&)>& write);

void write_text_atomically(const std::filesystem::path& path, std::string_view text);

// Same contract for a directory: the callback fills a fresh temporary
// directory which then replaces `dir` (which must be absent or empty).
void publish_directory(const std::filesystem::path& dir,
                       const std::function<void(const std::filesystem::path&)>& fill);

}  // namespace cwsam
