#pragma once

// Declarative run configuration (JSON). Every key is optional and falls back
// to the documented default; unknown keys are rejected so typos fail loudly.

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "sfflow/baseline.hpp"
#include "sfflow/evaluation.hpp"
#include "sfflow/trainer.hpp"

namespace sfflow {

struct SliceRequest {
  double z_offset = 0.0;  // metres from the grid centre plane
  double freq_hz = 0.0;

  bool operator==(const SliceRequest&) const = default;
};

struct DatasetSettings {
  std::filesystem::path dir = "data";
  RoomSpec room;
  MicGrid grid;
  std::size_t n_bins = 64;
  SplitSizes splits{820, 102, 102};
  std::uint64_t seed = 0;

  bool operator==(const DatasetSettings&) const = default;
};

struct EvalSettings {
  std::vector<std::string> methods{"sfflow", "krr"};
  std::vector<std::size_t> m_values{5};
  std::vector<BinRange> bin_ranges{{1, 20}, {1, 30}, {1, 40}, {1, 64}};
  std::uint64_t seed = 2;        // fixed test observation sets
  std::uint64_t noise_seed = 3;  // sampler initial noise
  std::size_t euler_steps = kDefaultEulerSteps;
  std::size_t source_index = 0;  // test source for infer / baseline / dump-slices
  std::vector<SliceRequest> slices{{-0.1, 78.0}, {-0.2, 312.0}, {-0.3, 921.0}};

  bool operator==(const EvalSettings&) const = default;
};

struct RunConfig {
  std::filesystem::path output_dir = "runs/default";
  std::size_t threads = 1;
  DatasetSettings dataset;
  ModelConfig model;
  TrainConfig train;
  KrrConfig krr;
  EvalSettings eval;

  RunConfig() { dataset.grid = MicGrid::centered(dataset.room, {11, 11, 11}, 0.1); }

  void validate() const {
    if (threads == 0) throw InvalidArgument("config: threads must be >= 1");
    dataset.room.validate();
    dataset.grid.validate(dataset.room);
    if (dataset.n_bins == 0 || dataset.n_bins > dataset.room.rir_length / 2)
      throw InvalidArgument("config: dataset.n_bins must be in 1..rir_length/2");
    if (dataset.splits.train == 0 || dataset.splits.val == 0 || dataset.splits.test == 0)
      throw InvalidArgument("config: every split needs at least one source");
    model.validate();
    if (model.n_bins != dataset.n_bins) throw InvalidArgument("config: model.n_bins must equal dataset.n_bins");
    const std::size_t max_extent =
        std::max({dataset.grid.counts[0], dataset.grid.counts[1], dataset.grid.counts[2]});
    if (model.padded_extent < max_extent) throw InvalidArgument("config: model.padded_extent smaller than the grid");
    train.validate();
    for (auto m : train.m_choices)
      if (m > model.capacity) throw InvalidArgument("config: train.m_choices exceeds model.capacity");
    if (train.m_val > model.capacity) throw InvalidArgument("config: train.m_val exceeds model.capacity");
    krr.validate();
    if (eval.methods.empty()) throw InvalidArgument("config: eval.methods is empty");
    for (const auto& m : eval.methods)
      if (m != "sfflow" && m != "krr") throw InvalidArgument("config: unknown eval method '" + m + "'");
    if (eval.m_values.empty() || eval.bin_ranges.empty())
      throw InvalidArgument("config: eval needs m_values and bin_ranges");
    for (auto m : eval.m_values)
      if (m == 0 || m > dataset.grid.size() || m > model.capacity)
        throw InvalidArgument("config: eval M=" + std::to_string(m) + " exceeds grid size or model capacity");
    for (const auto& r : eval.bin_ranges) r.validate(dataset.n_bins);
    if (eval.euler_steps == 0) throw InvalidArgument("config: eval.euler_steps must be >= 1");
    if (eval.source_index >= dataset.splits.test) throw InvalidArgument("config: eval.source_index outside test split");
  }

  bool operator==(const RunConfig&) const = default;
};

namespace detail {

/// Reads optional keys of one JSON object and rejects any it did not consume.
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string ctx) : j_(j), ctx_(std::move(ctx)) {
    if (!j.is_object()) throw InvalidArgument("config: '" + ctx_ + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument("config: bad value for '" + path(key) + "': " + e.what());
    }
  }

  const nlohmann::json* child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string path(const std::string& key) const { return ctx_.empty() ? key : ctx_ + "." + key; }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw InvalidArgument("config: unknown key '" + path(k) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json ranges = nlohmann::json::array();
  for (const auto& r : c.eval.bin_ranges) ranges.push_back(std::to_string(r.lo) + ".." + std::to_string(r.hi));
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : c.eval.slices) slices.push_back({{"z_offset", s.z_offset}, {"freq_hz", s.freq_hz}});
  return {
      {"output_dir", c.output_dir.string()},
      {"threads", c.threads},
      {"dataset",
       {{"dir", c.dataset.dir.string()},
        {"room", room_to_json(c.dataset.room)},
        {"grid", grid_to_json(c.dataset.grid)},
        {"n_bins", c.dataset.n_bins},
        {"splits", {{"train", c.dataset.splits.train}, {"val", c.dataset.splits.val}, {"test", c.dataset.splits.test}}},
        {"seed", c.dataset.seed}}},
      {"model", model_config_to_json(c.model)},
      {"train", train_config_to_json(c.train)},
      {"krr", {{"gamma", c.krr.gamma}, {"lambda", c.krr.lambda}}},
      {"eval",
       {{"methods", c.eval.methods},
        {"m_values", c.eval.m_values},
        {"bin_ranges", ranges},
        {"seed", c.eval.seed},
        {"noise_seed", c.eval.noise_seed},
        {"euler_steps", c.eval.euler_steps},
        {"source_index", c.eval.source_index},
        {"slices", slices}}},
  };
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::StrictObject top(j, "");
  std::string out = c.output_dir.string();
  top.get("output_dir", out);
  c.output_dir = out;
  top.get("threads", c.threads);

  if (const auto* d = top.child("dataset")) {
    detail::StrictObject o(*d, "dataset");
    std::string dir = c.dataset.dir.string();
    o.get("dir", dir);
    c.dataset.dir = dir;
    if (const auto* r = o.child("room")) {
      detail::StrictObject ro(*r, "dataset.room");
      auto& room = c.dataset.room;
      ro.get("dimensions", room.dimensions);
      ro.get("t60", room.t60);
      ro.get("speed_of_sound", room.speed_of_sound);
      ro.get("sample_rate", room.sample_rate);
      ro.get("rir_length", room.rir_length);
      ro.get("max_image_order", room.max_image_order);
      ro.finish();
    }
    std::array<std::size_t, 3> counts = c.dataset.grid.counts;
    double spacing = c.dataset.grid.spacing;
    std::optional<Vec3> origin;
    if (const auto* g = o.child("grid")) {
      detail::StrictObject go(*g, "dataset.grid");
      go.get("counts", counts);
      go.get("spacing", spacing);
      if (g->contains("origin")) {
        Vec3 v{};
        go.get("origin", v);
        origin = v;
      }
      go.finish();
    }
    c.dataset.grid = MicGrid::centered(c.dataset.room, counts, spacing);
    if (origin) c.dataset.grid.origin = *origin;
    o.get("n_bins", c.dataset.n_bins);
    if (const auto* s = o.child("splits")) {
      detail::StrictObject so(*s, "dataset.splits");
      so.get("train", c.dataset.splits.train);
      so.get("val", c.dataset.splits.val);
      so.get("test", c.dataset.splits.test);
      so.finish();
    }
    o.get("seed", c.dataset.seed);
    o.finish();
  }

  if (const auto* m = top.child("model")) {
    detail::StrictObject o(*m, "model");
    auto& mc = c.model;
    o.get("n_bins", mc.n_bins);
    o.get("capacity", mc.capacity);
    o.get("d_model", mc.d_model);
    o.get("n_layers", mc.n_layers);
    o.get("n_heads", mc.n_heads);
    o.get("mlp_hidden", mc.mlp_hidden);
    o.get("ffn_hidden", mc.ffn_hidden);
    o.get("stage_channels", mc.stage_channels);
    o.get("bottleneck_channels", mc.bottleneck_channels);
    o.get("padded_extent", mc.padded_extent);
    o.get("max_groups", mc.max_groups);
    o.finish();
  }

  if (const auto* t = top.child("train")) {
    detail::StrictObject o(*t, "train");
    auto& tc = c.train;
    o.get("iterations", tc.iterations);
    o.get("batch_size", tc.batch_size);
    o.get("lr_start", tc.lr_start);
    o.get("lr_peak", tc.lr_peak);
    o.get("lr_final", tc.lr_final);
    o.get("warmup", tc.warmup);
    o.get("cosine_horizon", tc.cosine_horizon);
    o.get("val_every", tc.val_every);
    o.get("m_val", tc.m_val);
    o.get("m_choices", tc.m_choices);
    o.get("euler_steps", tc.euler_steps);
    o.get("seed", tc.seed);
    o.get("init_seed", tc.init_seed);
    o.get("val_seed", tc.val_seed);
    o.get("beta1", tc.beta1);
    o.get("beta2", tc.beta2);
    o.get("adam_eps", tc.adam_eps);
    o.get("divergence_loss", tc.divergence_loss);
    o.finish();
  }

  if (const auto* k = top.child("krr")) {
    detail::StrictObject o(*k, "krr");
    o.get("gamma", c.krr.gamma);
    o.get("lambda", c.krr.lambda);
    o.finish();
  }

  if (const auto* e = top.child("eval")) {
    detail::StrictObject o(*e, "eval");
    o.get("methods", c.eval.methods);
    o.get("m_values", c.eval.m_values);
    std::vector<std::string> ranges;
    if (e->contains("bin_ranges")) {
      o.get("bin_ranges", ranges);
      c.eval.bin_ranges.clear();
      for (const auto& r : ranges) c.eval.bin_ranges.push_back(parse_bin_range(r));
    }
    o.get("seed", c.eval.seed);
    o.get("noise_seed", c.eval.noise_seed);
    o.get("euler_steps", c.eval.euler_steps);
    o.get("source_index", c.eval.source_index);
    if (const auto* s = o.child("slices")) {
      if (!s->is_array()) throw InvalidArgument("config: 'eval.slices' must be an array");
      c.eval.slices.clear();
      for (const auto& item : *s) {
        detail::StrictObject so(item, "eval.slices[]");
        SliceRequest r;
        so.get("z_offset", r.z_offset);
        so.get("freq_hz", r.freq_hz);
        so.finish();
        c.eval.slices.push_back(r);
      }
    }
    o.finish();
  }
  top.finish();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

}  // namespace sfflow
