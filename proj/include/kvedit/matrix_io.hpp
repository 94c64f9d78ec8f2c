#pragma once

// Binary matrix container ("AELM") and small-matrix CSV helpers.
//
// Layout, all little-endian:
//   offset 0   4 bytes  magic "AELM"
//   offset 4   u32      version (currently 1)
//   offset 8   u32      dtype tag (1 = float64)
//   offset 12  u64      rows
//   offset 20  u64      cols
//   offset 28  rows*cols float64 values, row-major

#include "kvedit/memory_core.hpp"

#include <filesystem>
#include <string>

namespace kvedit {

inline constexpr std::uint32_t kAelmVersion = 1;
inline constexpr std::uint32_t kAelmDtypeF64 = 1;
inline constexpr std::size_t kAelmHeaderBytes = 28;

void write_aelm(const std::filesystem::path& path, const Matrix& m);
// Throws MalformedDump on bad magic, unknown version/dtype or a short payload.
Matrix read_aelm(const std::filesystem::path& path);

std::string to_aelm_bytes(const Matrix& m);
Matrix from_aelm_bytes(const std::string& bytes);

void write_csv(const std::filesystem::path& path, const Matrix& m);
Matrix read_csv(const std::filesystem::path& path);

}  // namespace kvedit
