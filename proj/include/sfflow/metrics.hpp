#pragma once

// Log-spectral distortion and plot-ready slice export.

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <string>
#include <vector>

#include "sfflow/cube.hpp"
#include "sfflow/geometry.hpp"

namespace sfflow {

/// Inclusive 1-based frequency-bin range (bin k <-> k * fs / rir_length).
struct BinRange {
  std::size_t lo = 1;
  std::size_t hi = 1;

  std::size_t size() const { return hi - lo + 1; }
  std::string label() const { return std::to_string(lo) + "-" + std::to_string(hi); }

  void validate(std::size_t n_bins) const {
    if (lo == 0 || hi < lo) throw InvalidArgument("empty bin range " + label());
    if (hi > n_bins)
      throw InvalidArgument("bin range " + label() + " exceeds " + std::to_string(n_bins) + " bins");
  }

  bool operator==(const BinRange&) const = default;
};

/// Parses "LO..HI".
inline BinRange parse_bin_range(const std::string& text) {
  const auto sep = text.find("..");
  auto parse = [&](std::string_view s) {
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || s.empty())
      throw InvalidArgument("bad bin range '" + text + "', expected LO..HI");
    return v;
  };
  if (sep == std::string::npos) throw InvalidArgument("bad bin range '" + text + "', expected LO..HI");
  const std::string_view v(text);
  BinRange r{parse(v.substr(0, sep)), parse(v.substr(sep + 2))};
  if (r.lo == 0 || r.hi < r.lo) throw InvalidArgument("empty bin range '" + text + "'");
  return r;
}

/// Per-position mean squared dB error over the bins in `r`.
inline std::vector<double> per_position_mse(const ATFCube& est, const ATFCube& truth, BinRange r) {
  if (!est.same_shape(truth)) throw InvalidArgument("lsd: cube shapes differ");
  r.validate(truth.n_bins);
  const std::size_t n = truth.positions();
  std::vector<double> mse(n, 0.0);
  for (std::size_t f = r.lo - 1; f < r.hi; ++f)
    for (std::size_t j = 0; j < n; ++j) {
      const double e = est.at(f, j) - truth.at(f, j);
      mse[j] += e * e;
    }
  for (auto& v : mse) v /= static_cast<double>(r.size());
  return mse;
}

/// Mean over grid positions of the RMS dB error across the selected bins.
inline double lsd(const ATFCube& est, const ATFCube& truth, BinRange r) {
  const auto mse = per_position_mse(est, truth, r);
  double sum = 0.0;
  for (double v : mse) sum += std::sqrt(v);
  return sum / static_cast<double>(mse.size());
}

inline double lsd(const ATFCube& est, const ATFCube& truth) {
  return lsd(est, truth, BinRange{1, truth.n_bins});
}

// --- slices ---------------------------------------------------------------------

/// One horizontal plane (fixed d index) at one frequency bin.
struct SliceSpec {
  std::size_t d = 0;
  std::size_t bin = 1;  // 1-based

  bool operator==(const SliceSpec&) const = default;
};

/// Nearest plane for a z offset from the grid centre and nearest bin for a
/// frequency in Hz.
inline SliceSpec resolve_slice(const RoomSpec& room, const MicGrid& grid, std::size_t n_bins,
                               double z_offset, double freq_hz) {
  const double d = static_cast<double>(grid.counts[0] - 1) / 2.0 + z_offset / grid.spacing;
  const double k = freq_hz * static_cast<double>(room.rir_length) / room.sample_rate;
  const long di = std::lround(d), ki = std::lround(k);
  if (di < 0 || di >= static_cast<long>(grid.counts[0]))
    throw InvalidArgument("slice z offset " + std::to_string(z_offset) + " m lies outside the grid");
  if (ki < 1 || ki > static_cast<long>(n_bins))
    throw InvalidArgument("slice frequency " + std::to_string(freq_hz) + " Hz has no bin");
  return {static_cast<std::size_t>(di), static_cast<std::size_t>(ki)};
}

/// H x W grid of dB values; row h, column w.
inline std::vector<std::vector<double>> extract_slice(const ATFCube& cube, SliceSpec s) {
  const auto& c = cube.grid.counts;
  if (s.d >= c[0] || s.bin == 0 || s.bin > cube.n_bins) throw InvalidArgument("slice outside cube");
  std::vector<std::vector<double>> out(c[1], std::vector<double>(c[2]));
  for (std::size_t h = 0; h < c[1]; ++h)
    for (std::size_t w = 0; w < c[2]; ++w) out[h][w] = cube.at(s.bin - 1, cube.grid.flat_index(s.d, h, w));
  return out;
}

inline void write_slice_csv(const std::filesystem::path& path, const ATFCube& cube, SliceSpec s) {
  std::ofstream os(path);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << std::setprecision(17);
  for (const auto& row : extract_slice(cube, s)) {
    for (std::size_t w = 0; w < row.size(); ++w) os << (w ? "," : "") << row[w];
    os << '\n';
  }
}

inline std::string slice_file_name(const std::string& label, SliceSpec s) {
  return label + "_d" + std::to_string(s.d) + "_bin" + std::to_string(s.bin) + ".csv";
}

/// Writes one CSV per (cube, slice) into `dir`; returns the paths written.
inline std::vector<std::filesystem::path> dump_slices(
    const std::filesystem::path& dir, const std::vector<std::pair<std::string, const ATFCube*>>& cubes,
    const std::vector<SliceSpec>& slices) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& [label, cube] : cubes)
    for (const auto& s : slices) {
      written.push_back(dir / slice_file_name(label, s));
      write_slice_csv(written.back(), *cube, s);
    }
  return written;
}

}  // namespace sfflow
