#pragma once

// MMF1 binary blocks: 'M','M','F','1', u32 version (=1), u32 rank, rank x u32
// dims, then float64 payload, all little-endian, row-major (last dim fastest).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mamover/common.hpp"
#include "mamover/geom.hpp"

namespace mamover::mmf {

inline constexpr std::array<char, 4> kMagic{'M', 'M', 'F', '1'};
inline constexpr std::uint32_t kVersion = 1;

struct Block {
  std::vector<std::uint32_t> dims;
  std::vector<double> data;

  std::size_t count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("MMF1: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw Error("MMF1: truncated offset table");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace detail

inline std::size_t block_bytes(std::size_t rank, std::size_t count) { return 12 + 4 * rank + 8 * count; }

inline void write_block(std::ostream& os, std::span<const std::uint32_t> dims, std::span<const double> data) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  require(n == data.size(), "MMF1: payload size does not match dims");
  os.write(kMagic.data(), 4);
  detail::put_u32(os, kVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) detail::put_u32(os, d);
  for (double v : data) detail::put_f64(os, v);
  if (!os) throw Error("MMF1: write failed");
}

inline Block read_block(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), 4) || magic != kMagic) throw Error("MMF1: bad magic");
  if (detail::get_u32(is) != kVersion) throw Error("MMF1: unsupported version");
  Block b;
  std::uint32_t rank = detail::get_u32(is);
  require(rank <= 16, "MMF1: implausible rank");
  for (std::uint32_t r = 0; r < rank; ++r) b.dims.push_back(detail::get_u32(is));
  std::size_t n = b.count();
  b.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) b.data[i] = detail::get_f64(is);
  if (!is) throw Error("MMF1: truncated payload");
  return b;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path);
  return is;
}

inline void save_block(const std::string& path, std::span<const std::uint32_t> dims, std::span<const double> data) {
  auto os = open_out(path);
  write_block(os, dims, data);
}

inline Block load_block(const std::string& path) {
  auto is = open_in(path);
  return read_block(is);
}

/// Fields are stored rank-2 as (ny, nx) over the unit square.
inline void write_field(std::ostream& os, const ScalarField2D& f) {
  std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(f.grid().ny()),
                                    static_cast<std::uint32_t>(f.grid().nx())};
  write_block(os, dims, f.values());
}

inline ScalarField2D field_from_block(const Block& b) {
  require(b.dims.size() == 2, "MMF1: field block must be rank 2");
  StructuredGrid g(static_cast<int>(b.dims[1]), static_cast<int>(b.dims[0]));
  return ScalarField2D(g, b.data);
}

inline void save_field(const std::string& path, const ScalarField2D& f) {
  auto os = open_out(path);
  write_field(os, f);
}

inline ScalarField2D load_field(const std::string& path) { return field_from_block(load_block(path)); }

/// A stack of equally-shaped fields as one rank-3 block (count, ny, nx).
inline void save_stack(const std::string& path, std::span<const ScalarField2D> frames) {
  require(!frames.empty(), "MMF1: empty stack");
  const auto& g = frames.front().grid();
  std::vector<double> all;
  all.reserve(frames.size() * g.num_nodes());
  for (const auto& f : frames) {
    require(f.grid() == g, "MMF1: stack frames on different grids");
    all.insert(all.end(), f.values().begin(), f.values().end());
  }
  std::array<std::uint32_t, 3> dims{static_cast<std::uint32_t>(frames.size()),
                                    static_cast<std::uint32_t>(g.ny()), static_cast<std::uint32_t>(g.nx())};
  save_block(path, dims, all);
}

inline std::vector<ScalarField2D> load_stack(const std::string& path) {
  Block b = load_block(path);
  if (b.dims.size() == 2) return {field_from_block(b)};
  require(b.dims.size() == 3, "MMF1: stack block must be rank 3");
  StructuredGrid g(static_cast<int>(b.dims[2]), static_cast<int>(b.dims[1]));
  std::vector<ScalarField2D> out;
  std::size_t n = g.num_nodes();
  for (std::uint32_t t = 0; t < b.dims[0]; ++t)
    out.emplace_back(g, std::vector<double>(b.data.begin() + t * n, b.data.begin() + (t + 1) * n));
  return out;
}

/// Mesh file: u64 byte-offset table {x block, y block}, then the two rank-2
/// MMF1 blocks of x and y coordinates. The base domain is the coordinate
/// bounding box (boundary nodes stay on the boundary).
inline void save_mesh(const std::string& path, const MovedMesh& mesh) {
  const auto& g = mesh.base();
  std::array<std::uint32_t, 2> dims{static_cast<std::uint32_t>(g.ny()), static_cast<std::uint32_t>(g.nx())};
  std::vector<double> xs, ys;
  for (const auto& p : mesh.coords()) {
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  auto os = open_out(path);
  std::uint64_t first = 16;
  detail::put_u64(os, first);
  detail::put_u64(os, first + block_bytes(2, xs.size()));
  write_block(os, dims, xs);
  write_block(os, dims, ys);
}

inline MovedMesh load_mesh(const std::string& path) {
  auto is = open_in(path);
  std::uint64_t ox = detail::get_u64(is);
  std::uint64_t oy = detail::get_u64(is);
  is.seekg(static_cast<std::streamoff>(ox));
  Block bx = read_block(is);
  is.seekg(static_cast<std::streamoff>(oy));
  Block by = read_block(is);
  require(bx.dims.size() == 2 && bx.dims == by.dims, "MMF1 mesh: inconsistent coordinate blocks");
  Rect dom{bx.data[0], bx.data[0], by.data[0], by.data[0]};
  for (double v : bx.data) dom.x0 = std::min(dom.x0, v), dom.x1 = std::max(dom.x1, v);
  for (double v : by.data) dom.y0 = std::min(dom.y0, v), dom.y1 = std::max(dom.y1, v);
  StructuredGrid g(static_cast<int>(bx.dims[1]), static_cast<int>(bx.dims[0]), dom);
  std::vector<Vec2> coords(bx.data.size());
  for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = {bx.data[k], by.data[k]};
  return {g, std::move(coords)};
}

}  // namespace mamover::mmf
