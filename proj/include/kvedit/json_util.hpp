#pragma once

#include "kvedit/memory_core.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace kvedit {

nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& j);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

// Throws ConfigMismatch naming `where` when `given` has a key that `reference`
// lacks. Nested objects are checked recursively.
void reject_unknown_keys(const nlohmann::json& given, const nlohmann::json& reference, const std::string& where);

}  // namespace kvedit
