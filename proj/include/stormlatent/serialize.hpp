#pragma once

// Binary tensor container ("LPTF") and named-tensor archives.
//
// Container layout, all integers little-endian:
//   "LPTF" | version u8 = 0x01 | dtype u8 = 0x01 (f64) | rank u32 | extents u32... | payload f64...
// Archive layout:
//   count u32 | { name_len u32 | utf-8 name | container }...

#include "stormlatent/tensor.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace stormlatent {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void write_archive(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_archive(std::istream& is);

void save_archive(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_archive(const std::filesystem::path& path);

// Lookup by name; throws std::out_of_range naming the missing entry.
const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name);
bool has_tensor(const NamedTensors& tensors, const std::string& name);

// FNV-1a 64-bit over a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);

}  // namespace stormlatent
