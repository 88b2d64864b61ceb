#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "declip/tensor.hpp"

namespace declip {

/// Ordered named tensors; order is preserved on disk.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// DTEN layout, little-endian:
//   "DTEN" | u32 version = 1 | u32 section count
//   per section: u16 name length | name bytes | u8 dtype | u8 rank |
//                rank × u64 dims | u64 absolute payload offset
//   payloads, contiguous, in section order.
inline constexpr char kContainerMagic[4] = {'D', 'T', 'E', 'N'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::size_t kMaxSectionName = 64;

std::vector<char> encode_tensors(const NamedTensors& sections);
NamedTensors decode_tensors(const std::vector<char>& bytes, const std::string& origin = "<memory>");

/// Writes to a temporary sibling then renames over `path`.
void write_tensor(const std::filesystem::path& path, const NamedTensors& sections);
NamedTensors read_tensor(const std::filesystem::path& path);

/// Atomic text write with the same temp-then-rename protocol.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

const Tensor& find_section(const NamedTensors& sections, const std::string& name);
const Tensor* find_section_or_null(const NamedTensors& sections, const std::string& name);

}  // namespace declip
