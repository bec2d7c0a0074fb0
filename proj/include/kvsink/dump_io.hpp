#pragma once

// KVSD tensor dump files:
//
//   offset 0   magic "KVSD"
//          4   u32 version (1)
//          8   u32 dtype (1 = float32, 2 = float64)
//         12   u32 ndim
//         16   u64 dims[ndim]
//              payload, row-major
//
// All integers and payload values are little-endian regardless of host.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvsink/tensor.hpp"

namespace kvsink {

inline constexpr std::uint32_t kDumpVersion = 1;

enum class DType : std::uint32_t { F32 = 1, F64 = 2 };

std::vector<std::uint8_t> encode_dump(const DenseTensor& t, DType dtype = DType::F64);
DenseTensor decode_dump(std::span<const std::uint8_t> bytes);

void write_dump(const std::filesystem::path& path, const DenseTensor& t, DType dtype = DType::F64);
DenseTensor read_dump(const std::filesystem::path& path);

/// Whole-file write through a temporary sibling and rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace kvsink
