// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fpe/tensor.hpp"

namespace fpe::io {

class IoError : public Error {
 public:
  using Error::Error;
};

uint16_t float_to_half(float value);
float half_to_float(uint16_t bits);
float bf16_to_float(uint16_t bits);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
// Writes via a sibling temp file and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// safetensors checkpoints (F32 / F16 / BF16 / F64 are widened to float32).
std::map<std::string, Tensor> load_safetensors(const std::filesystem::path& path);
void save_safetensors(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors);

enum class DType { f32, f16 };

std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

struct ContainerEntry {
  std::string name;
  Tensor tensor;
  DType dtype = DType::f32;  // storage dtype; tensors are always float32 in memory
};

// Tensor container: 16-byte little-endian header {magic "FPET", u32 version,
// u64 entry count}, raw entry payloads, a JSON index
// [{name, dtype, shape, offset, nbytes}], and a 16-byte trailer
// {u64 index offset, u64 index length}.
inline constexpr uint32_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const std::vector<ContainerEntry>& entries);
std::vector<ContainerEntry> read_container(const std::filesystem::path& path);
std::string read_container_index(const std::filesystem::path& path);

}  // namespace fpe::io
