#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <variant>
#include <vector>

namespace mdseg {

/// 3-D voxel grid with physical spacing. Storage is X-fastest
/// (index = x + nx*(y + ny*z)), matching the MTVOL payload order.
template <class T>
struct Grid3 {
  std::array<int64_t, 3> dims{0, 0, 0};            // X, Y, Z
  std::array<double, 3> spacing{1.0, 1.0, 1.0};    // mm
  std::vector<T> data;

  Grid3() = default;
  Grid3(int64_t nx, int64_t ny, int64_t nz, T fill = T(0))
      : dims{nx, ny, nz}, data(static_cast<size_t>(nx * ny * nz), fill) {}

  int64_t nx() const { return dims[0]; }
  int64_t ny() const { return dims[1]; }
  int64_t nz() const { return dims[2]; }
  int64_t numel() const { return dims[0] * dims[1] * dims[2]; }

  T& at(int64_t x, int64_t y, int64_t z) {
    return data[static_cast<size_t>(x + dims[0] * (y + dims[1] * z))];
  }
  const T& at(int64_t x, int64_t y, int64_t z) const {
    return data[static_cast<size_t>(x + dims[0] * (y + dims[1] * z))];
  }

  bool in_bounds(int64_t x, int64_t y, int64_t z) const {
    return x >= 0 && x < dims[0] && y >= 0 && y < dims[1] && z >= 0 && z < dims[2];
  }
};

using GridF = Grid3<float>;
using GridU8 = Grid3<uint8_t>;

// MTVOL container: little-endian, magic "MTVL", version u32=1,
// dtype u32 (0=float32, 1=uint8), shape 3*u64 (X,Y,Z), spacing 3*f64,
// raw voxel payload in X-fastest order.
void write_volume(const GridF& g, const std::filesystem::path& path);
void write_volume(const GridU8& g, const std::filesystem::path& path);

using AnyGrid = std::variant<GridF, GridU8>;
AnyGrid read_volume(const std::filesystem::path& path);
GridF read_volume_f32(const std::filesystem::path& path);
GridU8 read_volume_u8(const std::filesystem::path& path);

}  // namespace mdseg
