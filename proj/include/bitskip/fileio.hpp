#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace bitskip {

// Whole-file read; IoError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

// Writes `<path>.tmp`, then renames it over `path`. Creates parent
// directories as needed.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace bitskip
