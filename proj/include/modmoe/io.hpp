#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace modmoe {

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& data);

// shortest representation that round-trips the value exactly
std::string fmt_float(float v);
std::string fmt_float(double v);

// rows are pre-formatted fields; values must not contain commas or newlines
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

uint64_t fnv1a(const void* data, size_t len, uint64_t seed = 14695981039346656037ull);
uint64_t fnv1a(const std::string& s, uint64_t seed = 14695981039346656037ull);
std::string hex64(uint64_t v);

}  // namespace modmoe
