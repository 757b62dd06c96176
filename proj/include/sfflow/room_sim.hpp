#pragma once

// Shoebox-room impulse responses by the image-source method, and their
// conversion to ATF magnitude spectra on a microphone grid.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <string>
#include <thread>
#include <vector>

#include "sfflow/common.hpp"
#include "sfflow/cube.hpp"
#include "sfflow/geometry.hpp"

namespace sfflow {

inline constexpr double kSabineConstant = 0.161;
inline constexpr double kMinAbsorption = 1e-6;
inline constexpr int kFractionalDelayTaps = 81;
inline constexpr int kFractionalDelayHalf = kFractionalDelayTaps / 2;
inline constexpr double kMinSourceMicDistance = 0.01;

struct Rir {
  std::vector<double> samples;
  SourcePlacement source;
  Vec3 mic{};
};

struct ImageSource {
  Vec3 position{};
  int reflections = 0;
};

/// Uniform wall absorption that realises the room's T60 under Sabine's formula.
inline double absorption_from_t60(const RoomSpec& room) {
  if (!(room.t60 > 0.0)) throw InvalidArgument("absorption_from_t60: t60 must be positive");
  const double alpha = kSabineConstant * room.volume() / (room.surface_area() * room.t60);
  if (alpha > 1.0 + 1e-12) {
    const double achievable = kSabineConstant * room.volume() / room.surface_area();
    throw InvalidArgument("absorption_from_t60: t60 = " + std::to_string(room.t60) +
                          " s is below the shortest achievable T60 of " +
                          std::to_string(achievable) + " s (alpha = 1)");
  }
  return std::clamp(alpha, kMinAbsorption, 1.0);
}

namespace detail {

// Image coordinate along one axis for lattice index n (|n| reflections).
inline double image_coordinate(double x, double length, int n) {
  if (n % 2 == 0) return static_cast<double>(n) * length + x;
  return static_cast<double>(n + 1) * length - x;
}

}  // namespace detail

/// All image sources whose total reflection count is <= order.
///
/// Index n_a per axis maps to coordinate n*L + x (n even) or (n+1)*L - x (n
/// odd), with |n_a| reflections on that axis. Order 0 yields the source only.
inline std::vector<ImageSource> image_sources(const RoomSpec& room, const SourcePlacement& src,
                                              int order) {
  if (order < 0) throw InvalidArgument("image_sources: order must be non-negative");
  std::vector<ImageSource> out;
  for (int nx = -order; nx <= order; ++nx) {
    const int rx = order - std::abs(nx);
    for (int ny = -rx; ny <= rx; ++ny) {
      const int rz = rx - std::abs(ny);
      for (int nz = -rz; nz <= rz; ++nz) {
        ImageSource img;
        img.position = {detail::image_coordinate(src.position[0], room.dimensions[0], nx),
                        detail::image_coordinate(src.position[1], room.dimensions[1], ny),
                        detail::image_coordinate(src.position[2], room.dimensions[2], nz)};
        img.reflections = std::abs(nx) + std::abs(ny) + std::abs(nz);
        out.push_back(img);
      }
    }
  }
  return out;
}

namespace detail {

inline double hann_sinc(double x) {
  const double half = kFractionalDelayHalf + 0.5;
  if (std::abs(x) >= half) return 0.0;
  const double window = 0.5 * (1.0 + std::cos(kPi * x / half));
  const double sinc = (x == 0.0) ? 1.0 : std::sin(kPi * x) / (kPi * x);
  return window * sinc;
}

// Adds `amplitude` at fractional sample position `delay` (already including
// the global kernel offset) using the windowed-sinc kernel.
inline void add_fractional_impulse(std::vector<double>& out, double delay, double amplitude) {
  const long center = std::lround(delay);
  const long n = static_cast<long>(out.size());
  const long lo = std::max(0L, center - kFractionalDelayHalf);
  const long hi = std::min(n - 1, center + kFractionalDelayHalf);
  for (long k = lo; k <= hi; ++k) out[k] += amplitude * hann_sinc(static_cast<double>(k) - delay);
}

// Latest propagation distance that can still place kernel taps in the RIR.
inline double max_audible_distance(const RoomSpec& room) {
  return room.speed_of_sound * static_cast<double>(room.rir_length) / room.sample_rate;
}

inline std::vector<double> reflection_gains(const RoomSpec& room, int order) {
  const double beta = std::sqrt(1.0 - absorption_from_t60(room));
  std::vector<double> gains(order + 1);
  gains[0] = 1.0;
  for (int k = 1; k <= order; ++k) gains[k] = gains[k - 1] * beta;
  return gains;
}

inline void accumulate_images(std::vector<double>& out, const RoomSpec& room,
                              const std::vector<ImageSource>& images,
                              const std::vector<double>& gains, const Vec3& mic) {
  const double samples_per_meter = room.sample_rate / room.speed_of_sound;
  const double horizon = max_audible_distance(room);
  for (const auto& img : images) {
    const double r = distance(img.position, mic);
    if (r > horizon) continue;
    if (r < kMinSourceMicDistance)
      throw InvalidArgument("simulate_rir: image-to-mic distance below 1 cm");
    const double amplitude = gains[img.reflections] / (4.0 * kPi * r);
    if (amplitude == 0.0) continue;
    add_fractional_impulse(out, r * samples_per_meter + kFractionalDelayHalf, amplitude);
  }
}

}  // namespace detail

/// Image-source RIR. Every arrival is shifted by the kernel half-length
/// (40 samples) so the full windowed-sinc kernel of the direct path fits.
inline Rir simulate_rir(const RoomSpec& room, const SourcePlacement& src, const Vec3& mic) {
  room.validate();
  src.validate(room);
  if (!room.contains(mic)) throw InvalidArgument("simulate_rir: microphone outside the room");
  if (distance(src.position, mic) < kMinSourceMicDistance)
    throw InvalidArgument("simulate_rir: source and microphone closer than 1 cm");
  const int order = room.image_order();
  const auto images = image_sources(room, src, order);
  const auto gains = detail::reflection_gains(room, order);
  Rir rir{std::vector<double>(room.rir_length, 0.0), src, mic};
  detail::accumulate_images(rir.samples, room, images, gains, mic);
  return rir;
}

namespace detail {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

/// In-place iterative radix-2 FFT.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * kPi / static_cast<double>(len);
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> w(std::cos(ang * static_cast<double>(k)),
                                     std::sin(ang * static_cast<double>(k)));
        const auto u = a[i + k];
        const auto v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

}  // namespace detail

/// dB magnitudes of DFT bins 1..n_bins (DC excluded), floored at -100 dB.
inline std::vector<double> rir_to_atf_mag(const std::vector<double>& samples, std::size_t n_bins) {
  const std::size_t n = samples.size();
  if (!detail::is_power_of_two(n))
    throw InvalidArgument("rir_to_atf_mag: RIR length must be a power of two");
  if (n_bins == 0 || n_bins > n / 2)
    throw InvalidArgument("rir_to_atf_mag: bin count must be in [1, length/2]");
  std::vector<std::complex<double>> spec(samples.begin(), samples.end());
  detail::fft(spec);
  std::vector<double> out(n_bins);
  for (std::size_t k = 1; k <= n_bins; ++k) {
    const double mag = std::abs(spec[k]);
    out[k - 1] = mag > 0.0 ? std::max(kDbFloor, 20.0 * std::log10(mag)) : kDbFloor;
  }
  return out;
}

inline std::vector<double> rir_to_atf_mag(const Rir& rir, std::size_t n_bins) {
  return rir_to_atf_mag(rir.samples, n_bins);
}

/// ATF magnitude cube for one source over the whole microphone grid.
///
/// Images are enumerated once per source and pruned against the grid's
/// bounding box; per-point work is then independent, so `threads` > 1 splits
/// grid points across workers without affecting the result.
inline ATFCube simulate_cube(const RoomSpec& room, const SourcePlacement& src, const MicGrid& grid,
                             std::size_t n_bins, unsigned threads = 1) {
  room.validate();
  src.validate(room);
  grid.validate(room);
  if (n_bins == 0 || n_bins > room.rir_length / 2)
    throw InvalidArgument("simulate_cube: bin count must be in [1, rir_length/2]");

  const int order = room.image_order();
  const auto gains = detail::reflection_gains(room, order);
  const auto [lo, hi] = grid.bounds();
  const double horizon = detail::max_audible_distance(room);
  std::vector<ImageSource> images;
  for (const auto& img : image_sources(room, src, order)) {
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double gap = std::max({lo[a] - img.position[a], 0.0, img.position[a] - hi[a]});
      d2 += gap * gap;
    }
    if (d2 <= horizon * horizon) images.push_back(img);
  }

  ATFCube cube(n_bins, grid, src.position);
  const std::size_t n_points = grid.size();
  auto work = [&](std::size_t begin, std::size_t end) {
    std::vector<double> rir(room.rir_length);
    for (std::size_t j = begin; j < end; ++j) {
      const Vec3 mic = grid.position(j);
      if (distance(mic, src.position) < kMinSourceMicDistance) {
        const auto [d, h, w] = grid.unflatten(j);
        throw InvalidArgument("simulate_cube: source coincides with grid point (" +
                              std::to_string(d) + ", " + std::to_string(h) + ", " +
                              std::to_string(w) + ")");
      }
      std::fill(rir.begin(), rir.end(), 0.0);
      detail::accumulate_images(rir, room, images, gains, mic);
      const auto mag = rir_to_atf_mag(rir, n_bins);
      for (std::size_t f = 0; f < n_bins; ++f) cube.at(f, j) = mag[f];
    }
  };

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_points)));
  if (threads == 1) {
    work(0, n_points);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (n_points + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t * chunk, std::min(n_points, (t + 1) * chunk));
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return cube;
}

}  // namespace sfflow
