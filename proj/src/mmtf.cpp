#include "mirrormamba/mmtf.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

namespace mm {

namespace io {

void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = char((v >> (8 * i)) & 0xFF);
  os.write(b.data(), 8);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(std::istream& is, std::uint64_t& offset) {
  std::array<unsigned char, 4> b;
  if (!is.read(reinterpret_cast<char*>(b.data()), 4)) throw FormatError("unexpected end of file", offset);
  offset += 4;
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

std::uint64_t get_u64(std::istream& is, std::uint64_t& offset) {
  const std::uint64_t lo = get_u32(is, offset);
  const std::uint64_t hi = get_u32(is, offset);
  return lo | hi << 32;
}

}  // namespace io

std::uint64_t mmtf_size(const Shape& shape) { return 12 + 4 * shape.size() + 4 * shape_numel(shape); }

template <typename T>
void write_mmtf(std::ostream& os, const Tensor<T>& t) {
  os.write("MMTF", 4);
  io::put_u32(os, kMmtfVersion);
  io::put_u32(os, std::uint32_t(t.rank()));
  for (auto d : t.shape()) io::put_u32(os, std::uint32_t(d));
  std::vector<char> buf(4 * t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(float(t[i]));
    for (int k = 0; k < 4; ++k) buf[4 * i + k] = char((bits >> (8 * k)) & 0xFF);
  }
  os.write(buf.data(), std::streamsize(buf.size()));
}

template <typename T>
Tensor<T> read_mmtf(std::istream& is, std::uint64_t base_offset) {
  std::uint64_t off = base_offset;
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("unexpected end of file reading MMTF magic", off);
  if (std::memcmp(magic, "MMTF", 4) != 0) throw FormatError("bad MMTF magic", off);
  off += 4;
  const auto version_at = off;
  const auto version = io::get_u32(is, off);
  if (version != kMmtfVersion)
    throw FormatError("unsupported MMTF version " + std::to_string(version), version_at);
  const auto rank = io::get_u32(is, off);
  if (rank == 0 || rank > 8) throw FormatError("implausible MMTF rank " + std::to_string(rank), off - 4);
  Shape shape(rank);
  for (auto& d : shape) {
    d = io::get_u32(is, off);
    if (d == 0) throw FormatError("zero extent in MMTF shape", off - 4);
  }
  const std::size_t n = shape_numel(shape);
  std::vector<unsigned char> buf(4 * n);
  if (!is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
    throw FormatError("truncated MMTF payload, expected " + std::to_string(buf.size()) + " bytes", off);
  std::vector<T> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t bits = std::uint32_t(buf[4 * i]) | std::uint32_t(buf[4 * i + 1]) << 8 |
                               std::uint32_t(buf[4 * i + 2]) << 16 | std::uint32_t(buf[4 * i + 3]) << 24;
    values[i] = T(std::bit_cast<float>(bits));
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_mmtf(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_mmtf(os, t);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

template <typename T>
Tensor<T> load_mmtf(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_mmtf<T>(is);
}

template void write_mmtf(std::ostream&, const Tensor<float>&);
template void write_mmtf(std::ostream&, const Tensor<double>&);
template Tensor<float> read_mmtf(std::istream&, std::uint64_t);
template Tensor<double> read_mmtf(std::istream&, std::uint64_t);
template void save_mmtf(const std::filesystem::path&, const Tensor<float>&);
template void save_mmtf(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_mmtf(const std::filesystem::path&);
template Tensor<double> load_mmtf(const std::filesystem::path&);

}  // namespace mm
