#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "mirrormamba/tensor.hpp"

// MMTF: "MMTF", u32 version (1), u32 rank, u32 dims[rank], then the values as
// little-endian f32. All integers are little-endian.

namespace mm {

inline constexpr std::uint32_t kMmtfVersion = 1;

/// Malformed or truncated file. offset() is the byte position of the fault.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Byte size of the MMTF encoding of a tensor with this shape.
std::uint64_t mmtf_size(const Shape& shape);

template <typename T>
void write_mmtf(std::ostream& os, const Tensor<T>& t);

/// Reads one MMTF record. base_offset is added to reported error offsets.
template <typename T>
Tensor<T> read_mmtf(std::istream& is, std::uint64_t base_offset = 0);

template <typename T>
void save_mmtf(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_mmtf(const std::filesystem::path& path);

namespace io {

void put_u32(std::ostream& os, std::uint32_t v);
void put_u64(std::ostream& os, std::uint64_t v);
void put_f32(std::ostream& os, float v);
std::uint32_t get_u32(std::istream& is, std::uint64_t& offset);
std::uint64_t get_u64(std::istream& is, std::uint64_t& offset);

}  // namespace io

}  // namespace mm
