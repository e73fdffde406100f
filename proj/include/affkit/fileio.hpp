#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace affkit {

// Writes to a sibling temporary file and renames it over `path`, so readers
// never observe a partially written file. Parent directories are created.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, std::string_view text);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

// Fixed-point formatting used by every report: 6 decimals.
std::string format_fixed6(double value);
// Shortest representation that parses back to the same double.
std::string format_roundtrip(double value);

// splitmix64 finalizer, used to derive independent per-item seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace affkit
