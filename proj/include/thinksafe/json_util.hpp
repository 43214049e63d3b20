#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

namespace thinksafe {

// Single-line dump; non-ASCII passes through, invalid UTF-8 is replaced.
inline std::string dump_compact(const nlohmann::ordered_json& j) {
  return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string sha256_hex(const std::string& bytes);

}  // namespace thinksafe
