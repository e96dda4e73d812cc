#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "caselab/tensor.hpp"

namespace caselab {

inline constexpr uint16_t kCheckpointVersion = 1;

// CRC-32 over the buffer (reflected 0xEDB88320 polynomial, 0xFFFFFFFF
// initial value and final xor); crc32 of "123456789" is 0xCBF43926.
uint32_t crc32(const void* data, size_t n);

// Binary tensor archive: "CASELAB1", version u16, entry count u32, then per
// entry a u16 name length, the utf-8 name, a u8 rank (at most 8), u32 dims,
// and the f32 payload, everything little-endian and row-major, closed by a
// CRC-32 of all prior bytes. Writes go to "<path>.tmp" and rename into
// place, so a crash never leaves a half-written checkpoint behind.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Tensor>>& entries);
void save_checkpoint(const std::string& path, const NamedTensors& params);

// Entries in file order. Truncation, trailing bytes, duplicate names, or a
// CRC mismatch raise IoError.
std::vector<std::pair<std::string, Tensor>> load_checkpoint(
    const std::string& path);

// Restores live tensors from the file: the name sets must match exactly and
// every shape must agree; gradient flags and other tensor state are left
// untouched.
void load_checkpoint_into(const std::string& path, const NamedTensors& params);

}  // namespace caselab
