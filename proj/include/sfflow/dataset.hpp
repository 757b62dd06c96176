#pragma once

// Dataset generation and persistence, observation sets, and the
// observation-count curriculum.
//
// Split file layout (little-endian):
//   magic "SFFLOWDS" | u32 version | u32 F | u32 D | u32 H | u32 W | u64 records
//   records: f64 source[3] | f64 values[F*D*H*W]   (values in [f][d][h][w] order)

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "sfflow/common.hpp"
#include "sfflow/cube.hpp"
#include "sfflow/geometry.hpp"
#include "sfflow/room_sim.hpp"

namespace sfflow {

inline constexpr char kDatasetMagic[8] = {'S', 'F', 'F', 'L', 'O', 'W', 'D', 'S'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 8 + 5 * 4 + 8;
inline constexpr std::size_t kDescriptorDim = 9;

// --- little-endian primitives ----------------------------------------------

namespace io {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!is) throw RuntimeError("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_le<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const auto n = read_le<std::uint64_t>(is);
  if (n > (1ULL << 32)) throw RuntimeError("string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw RuntimeError("unexpected end of file");
  return s;
}

}  // namespace io

// --- normalisation -----------------------------------------------------------

/// Single global affine scaling of dB values (training split only).
struct NormStats {
  double mean = 0.0;
  double std = 1.0;

  double normalize(double db) const { return (db - mean) / std; }
  double denormalize(double z) const { return z * std + mean; }

  bool operator==(const NormStats&) const = default;
};

inline NormStats compute_norm_stats(const std::vector<ATFCube>& train) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : train) {
    for (double v : c.values) sum += v;
    n += c.values.size();
  }
  if (n == 0) throw InvalidArgument("compute_norm_stats: empty training split");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (const auto& c : train)
    for (double v : c.values) ss += (v - mean) * (v - mean);
  const double var = ss / static_cast<double>(n);
  if (!(var > 0.0)) throw InvalidArgument("compute_norm_stats: zero variance");
  return {mean, std::sqrt(var)};
}

inline std::vector<double> normalize(const std::vector<double>& db, const NormStats& s) {
  if (!(s.std > 0.0)) throw InvalidArgument("normalize: zero variance");
  std::vector<double> out(db.size());
  std::transform(db.begin(), db.end(), out.begin(), [&](double v) { return s.normalize(v); });
  return out;
}

inline std::vector<double> denormalize(const std::vector<double>& z, const NormStats& s) {
  std::vector<double> out(z.size());
  std::transform(z.begin(), z.end(), out.begin(), [&](double v) { return s.denormalize(v); });
  return out;
}

// --- manifest ------------------------------------------------------------------

struct SplitInfo {
  std::string file;
  std::vector<Vec3> sources;
  std::vector<std::uint64_t> offsets;  // byte offset of each record in `file`

  bool operator==(const SplitInfo&) const = default;
};

struct DatasetManifest {
  std::uint32_t format_version = kDatasetVersion;
  RoomSpec room;
  MicGrid grid;
  std::size_t n_bins = 0;
  std::uint64_t seed = 0;
  NormStats norm;
  std::map<std::string, SplitInfo> splits;  // "train", "val", "test"

  std::size_t record_bytes() const { return (3 + n_bins * grid.size()) * sizeof(double); }

  const SplitInfo& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw InvalidArgument("manifest has no split '" + name + "'");
    return it->second;
  }

  std::size_t total_sources() const {
    std::size_t n = 0;
    for (const auto& [_, s] : splits) n += s.sources.size();
    return n;
  }

  bool operator==(const DatasetManifest&) const = default;
};

inline nlohmann::json room_to_json(const RoomSpec& r) {
  return {{"dimensions", r.dimensions},         {"t60", r.t60},
          {"speed_of_sound", r.speed_of_sound}, {"sample_rate", r.sample_rate},
          {"rir_length", r.rir_length},         {"max_image_order", r.max_image_order}};
}

inline RoomSpec room_from_json(const nlohmann::json& j) {
  RoomSpec r;
  r.dimensions = j.at("dimensions").get<Vec3>();
  r.t60 = j.at("t60").get<double>();
  r.speed_of_sound = j.at("speed_of_sound").get<double>();
  r.sample_rate = j.at("sample_rate").get<double>();
  r.rir_length = j.at("rir_length").get<std::size_t>();
  r.max_image_order = j.at("max_image_order").get<int>();
  return r;
}

inline nlohmann::json grid_to_json(const MicGrid& g) {
  return {{"origin", g.origin}, {"spacing", g.spacing}, {"counts", g.counts}};
}

inline MicGrid grid_from_json(const nlohmann::json& j) {
  MicGrid g;
  g.origin = j.at("origin").get<Vec3>();
  g.spacing = j.at("spacing").get<double>();
  g.counts = j.at("counts").get<std::array<std::size_t, 3>>();
  return g;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [name, s] : m.splits)
    splits[name] = {{"file", s.file}, {"count", s.sources.size()}, {"sources", s.sources},
                    {"offsets", s.offsets}};
  return {{"format_version", m.format_version},
          {"room", room_to_json(m.room)},
          {"grid", grid_to_json(m.grid)},
          {"n_bins", m.n_bins},
          {"seed", m.seed},
          {"norm", {{"mean", m.norm.mean}, {"std", m.norm.std}}},
          {"splits", splits}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.format_version = j.at("format_version").get<std::uint32_t>();
  if (m.format_version != kDatasetVersion)
    throw RuntimeError("unsupported dataset format version " + std::to_string(m.format_version));
  m.room = room_from_json(j.at("room"));
  m.grid = grid_from_json(j.at("grid"));
  m.n_bins = j.at("n_bins").get<std::size_t>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.norm = {j.at("norm").at("mean").get<double>(), j.at("norm").at("std").get<double>()};
  for (const auto& [name, s] : j.at("splits").items()) {
    SplitInfo info;
    info.file = s.at("file").get<std::string>();
    info.sources = s.at("sources").get<std::vector<Vec3>>();
    info.offsets = s.at("offsets").get<std::vector<std::uint64_t>>();
    if (info.sources.size() != info.offsets.size() ||
        info.sources.size() != s.at("count").get<std::size_t>())
      throw RuntimeError("manifest split '" + name + "' has inconsistent counts");
    m.splits[name] = std::move(info);
  }
  return m;
}

inline constexpr const char* kManifestFile = "manifest.json";

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& dir) {
  const auto path = dir / kManifestFile;
  std::ofstream os(path);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << manifest_to_json(m).dump(2) << '\n';
  if (!os) throw RuntimeError("failed writing " + path.string());
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestFile;
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open dataset manifest " + path.string());
  try {
    return manifest_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw RuntimeError("malformed manifest " + path.string() + ": " + e.what());
  }
}

// --- split files ------------------------------------------------------------------

inline void write_split_header(std::ostream& os, std::size_t n_bins, const MicGrid& grid,
                               std::uint64_t records) {
  os.write(kDatasetMagic, sizeof(kDatasetMagic));
  io::write_le<std::uint32_t>(os, kDatasetVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(n_bins));
  for (auto c : grid.counts) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c));
  io::write_le<std::uint64_t>(os, records);
}

inline void write_cube_record(std::ostream& os, const ATFCube& cube) {
  for (double v : cube.source) io::write_le<double>(os, v);
  for (double v : cube.values) io::write_le<double>(os, v);
}

/// Reads every record of a split file; shape is checked against the manifest.
inline std::vector<ATFCube> read_split_file(const std::filesystem::path& path, std::size_t n_bins,
                                            const MicGrid& grid) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kDatasetMagic, 8) != 0)
    throw RuntimeError(path.string() + ": not a dataset split file");
  if (io::read_le<std::uint32_t>(is) != kDatasetVersion)
    throw RuntimeError(path.string() + ": unsupported version");
  const auto f = io::read_le<std::uint32_t>(is);
  std::array<std::size_t, 3> counts{};
  for (auto& c : counts) c = io::read_le<std::uint32_t>(is);
  if (f != n_bins || counts != grid.counts)
    throw RuntimeError(path.string() + ": shape does not match manifest");
  const auto records = io::read_le<std::uint64_t>(is);
  std::vector<ATFCube> cubes;
  cubes.reserve(records);
  for (std::uint64_t r = 0; r < records; ++r) {
    Vec3 src;
    for (auto& v : src) v = io::read_le<double>(is);
    ATFCube cube(n_bins, grid, src);
    for (auto& v : cube.values) v = io::read_le<double>(is);
    cubes.push_back(std::move(cube));
  }
  return cubes;
}

inline std::vector<ATFCube> load_split(const DatasetManifest& m, const std::filesystem::path& dir,
                                       const std::string& name) {
  const SplitInfo& info = m.split(name);
  auto cubes = read_split_file(dir / info.file, m.n_bins, m.grid);
  if (cubes.size() != info.sources.size())
    throw RuntimeError("split '" + name + "' record count does not match manifest");
  for (std::size_t i = 0; i < cubes.size(); ++i)
    if (cubes[i].source != info.sources[i])
      throw RuntimeError("split '" + name + "' source list does not match manifest");
  return cubes;
}

// --- generation ----------------------------------------------------------------------

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
  std::size_t total() const { return train + val + test; }

  bool operator==(const SplitSizes&) const = default;
};

/// Uniform source position inside the room, rejected while within one grid
/// spacing of the measurement region's bounding box.
inline Vec3 draw_source_position(const RoomSpec& room, const MicGrid& grid, Rng& rng) {
  const auto [lo, hi] = grid.bounds(grid.spacing);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    Vec3 p;
    for (int a = 0; a < 3; ++a)
      p[a] = rng.uniform(kSourceWallMargin, room.dimensions[a] - kSourceWallMargin);
    bool inside_region = true;
    for (int a = 0; a < 3; ++a) inside_region = inside_region && p[a] >= lo[a] && p[a] <= hi[a];
    if (!inside_region && room.contains(p, kSourceWallMargin)) return p;
  }
  throw InvalidArgument("could not place a source outside the measurement region");
}

/// Simulates `sizes.total()` sources and writes train/val/test split files and
/// the manifest into `dir`. Output bytes depend only on the arguments.
inline DatasetManifest generate_dataset(const RoomSpec& room, const MicGrid& grid,
                                        std::size_t n_bins, SplitSizes sizes, std::uint64_t seed,
                                        const std::filesystem::path& dir, unsigned threads = 1) {
  room.validate();
  grid.validate(room);
  if (sizes.total() == 0) throw InvalidArgument("generate_dataset: no sources requested");
  if (sizes.train == 0) throw InvalidArgument("generate_dataset: training split is empty");
  std::filesystem::create_directories(dir);

  Rng rng(seed);
  std::vector<Vec3> sources(sizes.total());
  for (auto& s : sources) s = draw_source_position(room, grid, rng);

  std::vector<ATFCube> cubes(sources.size());
  threads = std::max(1u, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < sources.size(); ++i)
      cubes[i] = simulate_cube(room, SourcePlacement{sources[i]}, grid, n_bins);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < sources.size(); i += threads)
            cubes[i] = simulate_cube(room, SourcePlacement{sources[i]}, grid, n_bins);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  DatasetManifest m;
  m.room = room;
  m.grid = grid;
  m.n_bins = n_bins;
  m.seed = seed;
  const std::pair<const char*, std::size_t> layout[] = {
      {"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test}};
  std::size_t next = 0;
  for (const auto& [name, count] : layout) {
    SplitInfo info;
    info.file = std::string(name) + ".bin";
    const auto path = dir / info.file;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot write " + path.string());
    write_split_header(os, n_bins, grid, count);
    for (std::size_t i = 0; i < count; ++i) {
      info.offsets.push_back(kDatasetHeaderBytes + i * m.record_bytes());
      info.sources.push_back(cubes[next].source);
      write_cube_record(os, cubes[next]);
      ++next;
    }
    if (!os) throw RuntimeError("failed writing " + path.string());
    m.splits[name] = std::move(info);
  }
  m.norm = compute_norm_stats(std::vector<ATFCube>(cubes.begin(), cubes.begin() + sizes.train));
  write_manifest(m, dir);
  return m;
}

// --- observations ----------------------------------------------------------------------

/// Fixed-capacity set of (descriptor, magnitude) pairs with a validity mask.
/// Masked slots hold zeros in both descriptor and magnitude.
struct ObservationSet {
  std::size_t capacity = 0;
  std::size_t n_bins = 0;
  std::vector<double> descriptors;  // capacity x 9
  std::vector<double> magnitudes;   // capacity x F
  std::vector<bool> mask;
  std::vector<std::size_t> grid_indices;  // flat grid index per valid slot
  std::vector<Vec3> positions;            // absolute mic position per valid slot

  ObservationSet() = default;
  ObservationSet(std::size_t cap, std::size_t f)
      : capacity(cap),
        n_bins(f),
        descriptors(cap * kDescriptorDim, 0.0),
        magnitudes(cap * f, 0.0),
        mask(cap, false) {}

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  }

  const double* descriptor(std::size_t slot) const { return &descriptors[slot * kDescriptorDim]; }
  const double* magnitude(std::size_t slot) const { return &magnitudes[slot * n_bins]; }
};

/// Builds an observation set from explicit grid indices (filled in order).
/// `norm`, when given, scales magnitudes into the network's input space.
inline ObservationSet observations_from_indices(const ATFCube& cube, const RoomSpec& room,
                                                const std::vector<std::size_t>& indices,
                                                std::size_t capacity,
                                                const NormStats* norm = nullptr) {
  if (indices.empty()) throw InvalidArgument("observation set needs at least one entry");
  if (indices.size() > capacity)
    throw InvalidArgument("observation count " + std::to_string(indices.size()) +
                          " exceeds capacity " + std::to_string(capacity));
  ObservationSet obs(capacity, cube.n_bins);
  for (std::size_t s = 0; s < indices.size(); ++s) {
    const std::size_t j = indices[s];
    if (j >= cube.positions()) throw InvalidArgument("observation grid index out of range");
    const Vec3 mic = cube.grid.position(j);
    const auto g = geometric_descriptor(room, cube.source, mic);
    std::copy(g.begin(), g.end(), obs.descriptors.begin() + s * kDescriptorDim);
    for (std::size_t f = 0; f < cube.n_bins; ++f)
      obs.magnitudes[s * cube.n_bins + f] = norm ? norm->normalize(cube.at(f, j)) : cube.at(f, j);
    obs.mask[s] = true;
    obs.grid_indices.push_back(j);
    obs.positions.push_back(mic);
  }
  return obs;
}

/// `m` distinct grid indices drawn uniformly (partial Fisher-Yates).
inline std::vector<std::size_t> draw_grid_indices(std::size_t grid_size, std::size_t m, Rng& rng) {
  if (m == 0 || m > grid_size)
    throw InvalidArgument("observation count " + std::to_string(m) + " outside [1, " +
                          std::to_string(grid_size) + "]");
  std::vector<std::size_t> perm(grid_size);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t k = i + static_cast<std::size_t>(rng.uniform_int(grid_size - i));
    std::swap(perm[i], perm[k]);
  }
  perm.resize(m);
  return perm;
}

inline ObservationSet sample_observations(const ATFCube& cube, const RoomSpec& room, std::size_t m,
                                          std::size_t capacity, Rng& rng,
                                          const NormStats* norm = nullptr) {
  return observations_from_indices(cube, room, draw_grid_indices(cube.positions(), m, rng),
                                   capacity, norm);
}

inline const std::vector<std::size_t>& default_training_counts() {
  static const std::vector<std::size_t> counts{5, 10, 20, 50};
  return counts;
}

/// Observation count for one training batch, uniform over `choices`.
inline std::size_t draw_training_m(Rng& rng,
                                   const std::vector<std::size_t>& choices = default_training_counts()) {
  if (choices.empty()) throw InvalidArgument("draw_training_m: empty choice set");
  return choices[rng.uniform_int(choices.size())];
}

/// One fixed list of grid indices per source of a split.
struct ValidationPermutation {
  std::uint64_t seed = 0;
  std::size_t m = 0;
  std::vector<std::vector<std::size_t>> indices;

  bool operator==(const ValidationPermutation&) const = default;
};

inline ValidationPermutation fixed_observation_sets(std::size_t n_sources, std::size_t grid_size,
                                                    std::size_t m, std::uint64_t seed) {
  if (m == 0 || m > grid_size) throw InvalidArgument("fixed observation count outside grid size");
  ValidationPermutation p{seed, m, {}};
  for (std::size_t s = 0; s < n_sources; ++s) {
    Rng rng(mix_seed(seed, s, m));
    p.indices.push_back(draw_grid_indices(grid_size, m, rng));
  }
  return p;
}

inline ValidationPermutation fixed_validation_sets(const DatasetManifest& manifest,
                                                   std::size_t m_val, std::uint64_t seed) {
  return fixed_observation_sets(manifest.split("val").sources.size(), manifest.grid.size(), m_val,
                                seed);
}

}  // namespace sfflow
