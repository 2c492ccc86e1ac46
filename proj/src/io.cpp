// SPDX-License-Identifier: Apache-2.0
#include "fpe/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace fpe::io {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "container IO assumes a little-endian host");

uint16_t float_to_half(float value) {
  const uint32_t x = std::bit_cast<uint32_t>(value);
  const uint32_t sign = (x >> 16) & 0x8000u;
  const uint32_t exp = (x >> 23) & 0xffu;
  uint32_t mant = x & 0x7fffffu;
  if (exp == 0xff) return static_cast<uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
  int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return static_cast<uint16_t>(sign | 0x7c00u);
  if (e <= 0) {
    if (e < -10) return static_cast<uint16_t>(sign);
    mant |= 0x800000u;
    const int shift = 14 - e;
    uint32_t half_mant = mant >> shift;
    const uint32_t rem = mant & ((1u << shift) - 1u);
    const uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (half_mant & 1u))) ++half_mant;
    return static_cast<uint16_t>(sign | half_mant);
  }
  uint32_t h = sign | (static_cast<uint32_t>(e) << 10) | (mant >> 13);
  const uint32_t rem = mant & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;  // may carry into the exponent, which is correct
  return static_cast<uint16_t>(h);
}

float half_to_float(uint16_t bits) {
  const uint32_t sign = static_cast<uint32_t>(bits & 0x8000u) << 16;
  uint32_t exp = (bits >> 10) & 0x1fu;
  uint32_t mant = bits & 0x3ffu;
  uint32_t out;
  if (exp == 0) {
    if (mant == 0) {
      out = sign;
    } else {
      int e = -1;
      do {
        ++e;
        mant <<= 1;
      } while ((mant & 0x400u) == 0);
      out = sign | (static_cast<uint32_t>(127 - 15 - e) << 23) | ((mant & 0x3ffu) << 13);
    }
  } else if (exp == 0x1f) {
    out = sign | 0x7f800000u | (mant << 13);
  } else {
    out = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(out);
}

float bf16_to_float(uint16_t bits) { return std::bit_cast<float>(static_cast<uint32_t>(bits) << 16); }

std::vector<uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<uint8_t> bytes(size);
  if (size && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw IoError("short read from " + path.string());
  }
  return bytes;
}

std::string read_text(const fs::path& path) {
  auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_file_atomic(const fs::path& path, std::span<const uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

namespace {

uint64_t read_u64(const uint8_t* p) {
  uint64_t v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

void append_u32(std::vector<uint8_t>& out, uint32_t v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

void append_u64(std::vector<uint8_t>& out, uint64_t v) {
  const auto* p = reinterpret_cast<const uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

Tensor decode_floats(const uint8_t* src, size_t nbytes, const std::string& dtype, const Shape& shape,
                     const std::string& where) {
  const int64_t n = shape_numel(shape);
  Tensor t(shape);
  auto expect = [&](size_t width) {
    if (nbytes != static_cast<size_t>(n) * width) throw IoError("size mismatch for " + where);
  };
  if (dtype == "F32" || dtype == "f32") {
    expect(4);
    std::memcpy(t.data(), src, nbytes);
  } else if (dtype == "F16" || dtype == "f16") {
    expect(2);
    for (int64_t i = 0; i < n; ++i) {
      uint16_t h;
      std::memcpy(&h, src + 2 * i, 2);
      t[i] = half_to_float(h);
    }
  } else if (dtype == "BF16") {
    expect(2);
    for (int64_t i = 0; i < n; ++i) {
      uint16_t h;
      std::memcpy(&h, src + 2 * i, 2);
      t[i] = bf16_to_float(h);
    }
  } else if (dtype == "F64") {
    expect(8);
    for (int64_t i = 0; i < n; ++i) {
      double d;
      std::memcpy(&d, src + 8 * i, 8);
      t[i] = static_cast<float>(d);
    }
  } else {
    throw IoError("unsupported dtype " + dtype + " for " + where);
  }
  return t;
}

}  // namespace

std::map<std::string, Tensor> load_safetensors(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 8) throw IoError("truncated safetensors file " + path.string());
  const uint64_t header_len = read_u64(bytes.data());
  if (8 + header_len > bytes.size()) throw IoError("bad safetensors header length in " + path.string());
  const json header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  const uint8_t* base = bytes.data() + 8 + header_len;
  const size_t data_len = bytes.size() - 8 - header_len;
  std::map<std::string, Tensor> out;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    Shape shape = info.at("shape").get<Shape>();
    const auto offsets = info.at("data_offsets").get<std::vector<uint64_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_len) {
      throw IoError("bad offsets for " + name + " in " + path.string());
    }
    out.emplace(name, decode_floats(base + offsets[0], offsets[1] - offsets[0], info.at("dtype").get<std::string>(),
                                    shape, name + " in " + path.string()));
  }
  return out;
}

void save_safetensors(const fs::path& path, const std::map<std::string, Tensor>& tensors) {
  json header = json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const uint64_t nbytes = static_cast<uint64_t>(t.numel()) * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t.shape()}, {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  std::string h = header.dump();
  while (h.size() % 8) h.push_back(' ');
  std::vector<uint8_t> out;
  append_u64(out, h.size());
  out.insert(out.end(), h.begin(), h.end());
  for (const auto& [name, t] : tensors) {
    const auto* p = reinterpret_cast<const uint8_t*>(t.data());
    out.insert(out.end(), p, p + t.numel() * 4);
  }
  write_file_atomic(path, out);
}

std::string dtype_name(DType dtype) { return dtype == DType::f16 ? "f16" : "f32"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f16") return DType::f16;
  throw IoError("unknown dtype '" + name + "'");
}

void write_container(const fs::path& path, const std::vector<ContainerEntry>& entries) {
  std::vector<uint8_t> out{'F', 'P', 'E', 'T'};
  append_u32(out, kContainerVersion);
  append_u64(out, entries.size());
  json index = json::array();
  for (const auto& e : entries) {
    const uint64_t offset = out.size();
    if (e.dtype == DType::f32) {
      const auto* p = reinterpret_cast<const uint8_t*>(e.tensor.data());
      out.insert(out.end(), p, p + e.tensor.numel() * 4);
    } else {
      for (float v : e.tensor.values()) {
        const uint16_t h = float_to_half(v);
        out.push_back(static_cast<uint8_t>(h & 0xffu));
        out.push_back(static_cast<uint8_t>(h >> 8));
      }
    }
    index.push_back({{"name", e.name},
                     {"dtype", dtype_name(e.dtype)},
                     {"shape", e.tensor.shape()},
                     {"offset", offset},
                     {"nbytes", out.size() - offset}});
  }
  const uint64_t index_offset = out.size();
  const std::string text = index.dump();
  out.insert(out.end(), text.begin(), text.end());
  append_u64(out, index_offset);
  append_u64(out, text.size());
  write_file_atomic(path, out);
}

namespace {

json parse_index(const std::vector<uint8_t>& bytes, const fs::path& path) {
  if (bytes.size() < 32 || std::memcmp(bytes.data(), "FPET", 4) != 0) {
    throw IoError(path.string() + " is not a tensor container");
  }
  uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kContainerVersion) throw IoError("unsupported container version in " + path.string());
  const uint64_t count = read_u64(bytes.data() + 8);
  const uint64_t index_offset = read_u64(bytes.data() + bytes.size() - 16);
  const uint64_t index_len = read_u64(bytes.data() + bytes.size() - 8);
  if (index_offset + index_len + 16 != bytes.size()) throw IoError("corrupt container trailer in " + path.string());
  json index = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(index_offset),
                           bytes.begin() + static_cast<std::ptrdiff_t>(index_offset + index_len));
  if (index.size() != count) throw IoError("container entry count mismatch in " + path.string());
  return index;
}

}  // namespace

std::vector<ContainerEntry> read_container(const fs::path& path) {
  const auto bytes = read_file(path);
  const json index = parse_index(bytes, path);
  std::vector<ContainerEntry> entries;
  for (const auto& item : index) {
    ContainerEntry e;
    e.name = item.at("name").get<std::string>();
    e.dtype = parse_dtype(item.at("dtype").get<std::string>());
    const uint64_t offset = item.at("offset").get<uint64_t>();
    const uint64_t nbytes = item.at("nbytes").get<uint64_t>();
    if (offset + nbytes > bytes.size()) throw IoError("entry " + e.name + " out of bounds in " + path.string());
    e.tensor = decode_floats(bytes.data() + offset, nbytes, dtype_name(e.dtype), item.at("shape").get<Shape>(),
                             e.name + " in " + path.string());
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string read_container_index(const fs::path& path) { return parse_index(read_file(path), path).dump(); }

}  // namespace fpe::io
