#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace kinetos {

// Round-trip decimal form used in every CSV we write ("%.17g").
std::string fmt(double x);

void write_file(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);
// FNV-1a 64 of a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);
std::string hex64(std::uint64_t h);

}  // namespace kinetos
