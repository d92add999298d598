#pragma once

#include "uscalib/geometry.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace uscalib {

/// 3-D voxel intensity grid with per-axis metric scale and the acquisition
/// facts the scanner owns (probe geometry, water temperature).
struct Volume {
    std::array<int, 3> dims{0, 0, 0};
    ScaleVector scale;
    Vec3 probe_origin_voxel = Vec3::Zero();
    double probe_radius_mm = 0.0;
    double temperature_c = 0.0;
    std::vector<std::uint8_t> vox;  ///< x-fastest: idx = x + dims[0]*(y + dims[1]*z)

    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
    }
    std::uint8_t at(int x, int y, int z) const { return vox[index(x, y, z)]; }
    std::uint8_t& at(int x, int y, int z) { return vox[index(x, y, z)]; }
    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
};

}  // namespace uscalib
