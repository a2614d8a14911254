#pragma once

#include "mdseg/grid.hpp"

namespace mdseg {

/// One 6-connected dilation step (face neighbors only).
inline GridU8 dilate6(const GridU8& in) {
  GridU8 out = in;
  const int64_t nx = in.nx(), ny = in.ny(), nz = in.nz();
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (in.at(x, y, z)) continue;
        const bool hit = (x > 0 && in.at(x - 1, y, z)) || (x + 1 < nx && in.at(x + 1, y, z)) ||
                         (y > 0 && in.at(x, y - 1, z)) || (y + 1 < ny && in.at(x, y + 1, z)) ||
                         (z > 0 && in.at(x, y, z - 1)) || (z + 1 < nz && in.at(x, y, z + 1));
        if (hit) out.at(x, y, z) = 1;
      }
  return out;
}

/// One 6-connected erosion step. Voxels on the grid border erode
/// (outside counts as background).
inline GridU8 erode6(const GridU8& in) {
  GridU8 out = in;
  const int64_t nx = in.nx(), ny = in.ny(), nz = in.nz();
  for (int64_t z = 0; z < nz; ++z)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t x = 0; x < nx; ++x) {
        if (!in.at(x, y, z)) continue;
        const bool keep = x > 0 && in.at(x - 1, y, z) && x + 1 < nx && in.at(x + 1, y, z) &&
                          y > 0 && in.at(x, y - 1, z) && y + 1 < ny && in.at(x, y + 1, z) &&
                          z > 0 && in.at(x, y, z - 1) && z + 1 < nz && in.at(x, y, z + 1);
        if (!keep) out.at(x, y, z) = 0;
      }
  return out;
}

/// Signed margin: >0 dilations, <0 erosions, iterated per step.
inline GridU8 apply_margin(GridU8 mask, int margin_voxels) {
  for (int i = 0; i < margin_voxels; ++i) mask = dilate6(mask);
  for (int i = 0; i < -margin_voxels; ++i) mask = erode6(mask);
  return mask;
}

}  // namespace mdseg
