#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mmo {

/// Writes to a sibling temp file, then renames over `path`, so readers see
/// either the old file or the complete new one.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace mmo
