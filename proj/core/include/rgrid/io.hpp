#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace rgrid {

/// Writes to a sibling temp file, then renames over `path`, so readers never
/// observe a partial artifact. Creates parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// 16 lowercase hex digits.
std::string hex64(std::uint64_t value);

/// printf "%.6g"; "nan"/"inf" spelled out.
std::string format_g6(double value);

}  // namespace rgrid
