#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "json.hpp"

namespace davdd {

using Json = nlohmann::json;

std::uint64_t fnv1a64(std::string_view bytes);
/// Deterministic child seed for stream `a`, sub-stream `b` of `base` (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0);
/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string hash_file(const std::string& path);
/// Hash over every regular file below `dir`, visited in sorted path order,
/// covering relative names and contents.
std::string hash_directory(const std::string& dir);
/// hash_file or hash_directory depending on what `path` is.
std::string hash_path(const std::string& path);

void ensure_dir(const std::string& dir);
bool path_exists(const std::string& path);
/// Throws IoError naming `path` when it is absent.
void require_path(const std::string& path);

void write_text(const std::string& path, std::string_view text);
std::string read_text(const std::string& path);
/// Pretty-printed with sorted keys and a trailing newline.
void write_json(const std::string& path, const Json& j);
Json read_json(const std::string& path);

/// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

}  // namespace davdd
