#pragma once

#include <cstddef>
#include <vector>

#include "sfflow/geometry.hpp"

namespace sfflow {

inline constexpr double kDbFloor = -100.0;

/// F x D x H x W grid of ATF magnitudes in dB, row-major [f][d][h][w].
struct ATFCube {
  std::size_t n_bins = 0;
  MicGrid grid;
  Vec3 source{};
  std::vector<double> values;

  ATFCube() = default;
  ATFCube(std::size_t f, const MicGrid& g, const Vec3& src)
      : n_bins(f), grid(g), source(src), values(f * g.size(), 0.0) {}

  std::size_t positions() const { return grid.size(); }

  double& at(std::size_t f, std::size_t j) { return values[f * grid.size() + j]; }
  double at(std::size_t f, std::size_t j) const { return values[f * grid.size() + j]; }

  /// Magnitude vector over all bins at flat grid index j.
  std::vector<double> spectrum(std::size_t j) const {
    std::vector<double> m(n_bins);
    for (std::size_t f = 0; f < n_bins; ++f) m[f] = at(f, j);
    return m;
  }

  bool same_shape(const ATFCube& o) const {
    return n_bins == o.n_bins && grid.counts == o.grid.counts;
  }

  bool operator==(const ATFCube&) const = default;
};

}  // namespace sfflow
