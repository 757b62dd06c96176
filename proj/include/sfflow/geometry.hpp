#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "sfflow/common.hpp"

namespace sfflow {

/// Shoebox room plus the simulation parameters that go with it.
struct RoomSpec {
  Vec3 dimensions{4.0, 6.0, 3.0};  // x, y, z extents in meters
  double t60 = 0.2;
  double speed_of_sound = 343.0;
  double sample_rate = 2000.0;
  std::size_t rir_length = 128;
  int max_image_order = -1;  // < 0 selects the T60-derived default

  double volume() const { return dimensions[0] * dimensions[1] * dimensions[2]; }

  double surface_area() const {
    const auto& d = dimensions;
    return 2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2]);
  }

  bool contains(const Vec3& p, double margin = 0.0) const {
    for (int a = 0; a < 3; ++a)
      if (!(p[a] > margin && p[a] < dimensions[a] - margin)) return false;
    return true;
  }

  /// ceil(c * t60 / min dimension) + 2 unless set explicitly.
  int image_order() const {
    if (max_image_order >= 0) return max_image_order;
    const double min_dim = std::min({dimensions[0], dimensions[1], dimensions[2]});
    return static_cast<int>(std::ceil(speed_of_sound * t60 / min_dim)) + 2;
  }

  void validate() const {
    for (double d : dimensions)
      if (!(d > 0.0) || !std::isfinite(d)) throw InvalidArgument("room dimensions must be positive");
    if (!(t60 > 0.0)) throw InvalidArgument("room t60 must be positive");
    if (!(speed_of_sound > 0.0)) throw InvalidArgument("speed of sound must be positive");
    if (!(sample_rate > 0.0)) throw InvalidArgument("sample rate must be positive");
    if (rir_length == 0) throw InvalidArgument("rir_length must be positive");
  }

  bool operator==(const RoomSpec&) const = default;
};

inline constexpr double kSourceWallMargin = 0.01;

struct SourcePlacement {
  Vec3 position{};

  void validate(const RoomSpec& room) const {
    if (!room.contains(position, kSourceWallMargin))
      throw InvalidArgument("source must lie inside the room with a 1 cm wall margin");
  }

  bool operator==(const SourcePlacement&) const = default;
};

/// Uniform microphone lattice. Axis order of the cube is d <-> z, h <-> y, w <-> x.
struct MicGrid {
  Vec3 origin{};  // position of grid index (0, 0, 0)
  double spacing = 0.1;
  std::array<std::size_t, 3> counts{11, 11, 11};  // D, H, W

  std::size_t depth() const { return counts[0]; }
  std::size_t height() const { return counts[1]; }
  std::size_t width() const { return counts[2]; }
  std::size_t size() const { return counts[0] * counts[1] * counts[2]; }

  std::size_t flat_index(std::size_t d, std::size_t h, std::size_t w) const {
    return (d * counts[1] + h) * counts[2] + w;
  }

  std::array<std::size_t, 3> unflatten(std::size_t j) const {
    const std::size_t w = j % counts[2];
    const std::size_t h = (j / counts[2]) % counts[1];
    const std::size_t d = j / (counts[1] * counts[2]);
    return {d, h, w};
  }

  Vec3 position(std::size_t d, std::size_t h, std::size_t w) const {
    return {origin[0] + spacing * static_cast<double>(w),
            origin[1] + spacing * static_cast<double>(h),
            origin[2] + spacing * static_cast<double>(d)};
  }

  Vec3 position(std::size_t j) const {
    const auto [d, h, w] = unflatten(j);
    return position(d, h, w);
  }

  Vec3 center() const {
    return {origin[0] + spacing * static_cast<double>(counts[2] - 1) / 2.0,
            origin[1] + spacing * static_cast<double>(counts[1] - 1) / 2.0,
            origin[2] + spacing * static_cast<double>(counts[0] - 1) / 2.0};
  }

  /// Axis-aligned bounds of the grid points, grown by `pad` on every side.
  std::pair<Vec3, Vec3> bounds(double pad = 0.0) const {
    const Vec3 hi = position(counts[0] - 1, counts[1] - 1, counts[2] - 1);
    return {Vec3{origin[0] - pad, origin[1] - pad, origin[2] - pad},
            Vec3{hi[0] + pad, hi[1] + pad, hi[2] + pad}};
  }

  /// Grid of the given counts centered in the room.
  static MicGrid centered(const RoomSpec& room, std::array<std::size_t, 3> counts, double spacing) {
    MicGrid g;
    g.spacing = spacing;
    g.counts = counts;
    const double ext_x = spacing * static_cast<double>(counts[2] - 1);
    const double ext_y = spacing * static_cast<double>(counts[1] - 1);
    const double ext_z = spacing * static_cast<double>(counts[0] - 1);
    g.origin = {(room.dimensions[0] - ext_x) / 2.0, (room.dimensions[1] - ext_y) / 2.0,
                (room.dimensions[2] - ext_z) / 2.0};
    return g;
  }

  void validate(const RoomSpec& room) const {
    if (!(spacing > 0.0)) throw InvalidArgument("grid spacing must be positive");
    for (auto c : counts)
      if (c == 0) throw InvalidArgument("grid counts must be positive");
    const auto [lo, hi] = bounds();
    if (!room.contains(lo) || !room.contains(hi))
      throw InvalidArgument("microphone grid must lie strictly inside the room");
  }

  bool operator==(const MicGrid&) const = default;
};

/// 9-dimensional observation descriptor: source-to-mic vector followed by the
/// six source-to-wall distances (x low, x high, y low, y high, z low, z high).
inline std::array<double, 9> geometric_descriptor(const RoomSpec& room, const Vec3& source,
                                                  const Vec3& mic) {
  std::array<double, 9> g{};
  for (int a = 0; a < 3; ++a) {
    g[a] = mic[a] - source[a];
    g[3 + 2 * a] = source[a];
    g[4 + 2 * a] = room.dimensions[a] - source[a];
  }
  return g;
}

}  // namespace sfflow
