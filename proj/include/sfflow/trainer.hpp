#pragma once

// Training loop: Adam, warmup + cosine learning-rate schedule, periodic
// validation with LSD-based checkpoint selection, and resumable state.
//
// Files written to the output directory:
//   train_log.csv  iteration,lr,train_loss,val_loss,val_lsd (one row per validation)
//   best.ckpt      parameters at the lowest validation LSD so far
//   state.bin      full TrainState, rewritten at every validation and at exit

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "sfflow/flow.hpp"
#include "sfflow/metrics.hpp"
#include "sfflow/model.hpp"

namespace sfflow {

struct TrainConfig {
  std::size_t iterations = 100000;
  std::size_t batch_size = 4;
  double lr_start = 1e-6;
  double lr_peak = 1e-4;
  double lr_final = 1e-5;
  std::size_t warmup = 5000;
  std::size_t cosine_horizon = 0;  // 0 -> iterations
  std::size_t val_every = 200;
  std::size_t m_val = 5;
  std::vector<std::size_t> m_choices = default_training_counts();
  std::size_t euler_steps = kDefaultEulerSteps;
  std::uint64_t seed = 0;       // batch sampling, t and eps
  std::uint64_t init_seed = 0;  // parameter initialisation
  std::uint64_t val_seed = 1;   // validation observation sets and noise
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double divergence_loss = 1e6;

  std::size_t horizon() const { return cosine_horizon ? cosine_horizon : iterations; }

  void validate() const {
    if (iterations == 0 || batch_size == 0) throw InvalidArgument("train: iterations and batch_size must be positive");
    if (val_every == 0 || m_val == 0 || euler_steps == 0)
      throw InvalidArgument("train: val_every, m_val and euler_steps must be positive");
    if (!(lr_start > 0 && lr_peak > 0 && lr_final > 0)) throw InvalidArgument("train: learning rates must be positive");
    if (horizon() < warmup) throw InvalidArgument("train: cosine horizon shorter than warmup");
    if (m_choices.empty()) throw InvalidArgument("train: m_choices is empty");
    for (auto m : m_choices)
      if (m == 0) throw InvalidArgument("train: m_choices must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
      throw InvalidArgument("train: bad Adam constants");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations}, {"batch_size", c.batch_size},   {"lr_start", c.lr_start},
          {"lr_peak", c.lr_peak},       {"lr_final", c.lr_final},       {"warmup", c.warmup},
          {"cosine_horizon", c.cosine_horizon}, {"val_every", c.val_every}, {"m_val", c.m_val},
          {"m_choices", c.m_choices},   {"euler_steps", c.euler_steps}, {"seed", c.seed},
          {"init_seed", c.init_seed},   {"val_seed", c.val_seed},       {"beta1", c.beta1},
          {"beta2", c.beta2},           {"adam_eps", c.adam_eps},       {"divergence_loss", c.divergence_loss}};
}

/// Linear warmup lr_start -> lr_peak over `warmup` iterations, then cosine
/// decay to lr_final at the horizon, constant afterwards.
inline double learning_rate(const TrainConfig& c, std::size_t it) {
  if (it < c.warmup)
    return c.lr_start + (c.lr_peak - c.lr_start) * static_cast<double>(it) / static_cast<double>(c.warmup);
  if (it >= c.horizon()) return c.lr_final;
  const double progress =
      static_cast<double>(it - c.warmup) / static_cast<double>(c.horizon() - c.warmup);
  return c.lr_final + 0.5 * (c.lr_peak - c.lr_final) * (1.0 + std::cos(kPi * progress));
}

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const nn::ParamStore<T>& store, double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : store.params()) {
      m_.emplace_back(p.size(), T(0));
      v_.emplace_back(p.size(), T(0));
    }
  }

  std::uint64_t steps() const { return t_; }

  void step(nn::ParamStore<T>& store, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T step = static_cast<T>(lr / c1), corr2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(eps_);
    std::size_t k = 0;
    for (auto& p : store.params()) {
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const T g = p.grad[i];
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        p.value[i] -= step * m[i] / (std::sqrt(v[i] * corr2) + eps);
      }
      ++k;
    }
  }

  void write(std::ostream& os) const {
    io::write_le<std::uint64_t>(os, t_);
    io::write_le<std::uint64_t>(os, m_.size());
    for (std::size_t k = 0; k < m_.size(); ++k) {
      io::write_le<std::uint64_t>(os, m_[k].size());
      for (T x : m_[k]) io::write_le<T>(os, x);
      for (T x : v_[k]) io::write_le<T>(os, x);
    }
  }

  void read(std::istream& is) {
    t_ = io::read_le<std::uint64_t>(is);
    if (io::read_le<std::uint64_t>(is) != m_.size()) throw RuntimeError("optimizer state does not match model");
    for (std::size_t k = 0; k < m_.size(); ++k) {
      if (io::read_le<std::uint64_t>(is) != m_[k].size()) throw RuntimeError("optimizer state does not match model");
      for (T& x : m_[k]) x = io::read_le<T>(is);
      for (T& x : v_[k]) x = io::read_le<T>(is);
    }
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::uint64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

struct BestRecord {
  bool valid = false;
  std::size_t iteration = 0;
  double val_lsd = 0.0;
  double val_loss = 0.0;
};

/// Everything needed to continue a run bit-exactly.
template <typename T>
struct TrainState {
  std::unique_ptr<FlowModel<T>> model;
  Adam<T> optimizer;
  std::size_t iteration = 0;
  Rng rng;
  BestRecord best;
  double loss_sum = 0.0;  // training loss accumulated since the last log row
  std::size_t loss_count = 0;

  TrainState(const ModelConfig& mc, const TrainConfig& tc)
      : model(std::make_unique<FlowModel<T>>(mc, tc.init_seed)),
        optimizer(model->params(), tc.beta1, tc.beta2, tc.adam_eps),
        rng(tc.seed) {}
};

inline constexpr char kStateMagic[8] = {'S', 'F', 'F', 'L', 'O', 'W', 'S', 'T'};

template <typename T>
void save_train_state(const std::filesystem::path& path, const TrainState<T>& s) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot write " + tmp);
    os.write(kStateMagic, sizeof(kStateMagic));
    io::write_string(os, model_config_to_json(s.model->config()).dump());
    write_param_arrays(os, s.model->params());
    s.optimizer.write(os);
    io::write_le<std::uint64_t>(os, s.iteration);
    io::write_string(os, s.rng.state());
    io::write_le<std::uint8_t>(os, s.best.valid ? 1 : 0);
    io::write_le<std::uint64_t>(os, s.best.iteration);
    io::write_le<double>(os, s.best.val_lsd);
    io::write_le<double>(os, s.best.val_loss);
    io::write_le<double>(os, s.loss_sum);
    io::write_le<std::uint64_t>(os, s.loss_count);
    if (!os) throw RuntimeError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
void load_train_state(const std::filesystem::path& path, TrainState<T>& s) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("missing training state " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kStateMagic, 8) != 0) throw RuntimeError(path.string() + ": not a training state");
  if (model_config_from_json(nlohmann::json::parse(io::read_string(is))) != s.model->config())
    throw InvalidArgument(path.string() + ": model config differs from the current run");
  read_param_arrays(is, s.model->params());
  s.optimizer.read(is);
  s.iteration = io::read_le<std::uint64_t>(is);
  s.rng.set_state(io::read_string(is));
  s.best.valid = io::read_le<std::uint8_t>(is) != 0;
  s.best.iteration = io::read_le<std::uint64_t>(is);
  s.best.val_lsd = io::read_le<double>(is);
  s.best.val_loss = io::read_le<double>(is);
  s.loss_sum = io::read_le<double>(is);
  s.loss_count = io::read_le<std::uint64_t>(is);
  if (!is) throw RuntimeError(path.string() + ": truncated training state");
}

/// Training and validation cubes with their normalised matrices.
template <typename T>
struct TrainingData {
  RoomSpec room;
  MicGrid grid;
  NormStats norm;
  std::vector<ATFCube> train, val;
  std::vector<nn::Mat<T>> train_z, val_z;

  static TrainingData load(const DatasetManifest& m, const std::filesystem::path& dir) {
    TrainingData d;
    d.room = m.room;
    d.grid = m.grid;
    d.norm = m.norm;
    d.train = load_split(m, dir, "train");
    d.val = load_split(m, dir, "val");
    if (d.train.empty() || d.val.empty()) throw InvalidArgument("training needs non-empty train and val splits");
    for (const auto& c : d.train) d.train_z.push_back(cube_to_matrix<T>(c, d.norm));
    for (const auto& c : d.val) d.val_z.push_back(cube_to_matrix<T>(c, d.norm));
    return d;
  }
};

struct ValidationResult {
  double lsd = 0.0;
  double loss = 0.0;
};

inline constexpr std::uint64_t kNoiseStream = 0x6e6f697365ULL;
inline constexpr std::uint64_t kLossStream = 0x6c6f7373ULL;

/// Mean LSD (all bins) of Euler samples from the fixed observation sets, and
/// mean CFM loss with fixed per-source t and eps.
template <typename T>
ValidationResult run_validation(FlowModel<T>& model, const TrainingData<T>& data,
                                const ValidationPermutation& sets, const TrainConfig& cfg) {
  ValidationResult r;
  const nn::Dims3 extent = grid_dims(data.grid);
  const std::size_t cap = model.config().capacity;
  for (std::size_t s = 0; s < data.val.size(); ++s) {
    const ObservationSet obs = observations_from_indices(data.val[s], data.room, sets.indices[s], cap, &data.norm);
    const ATFCube est = sample<T>(model, obs, data.grid, data.val[s].source, data.norm, cfg.euler_steps,
                                  mix_seed(cfg.val_seed, s, kNoiseStream));
    r.lsd += lsd(est, data.val[s]);
    Rng rng(mix_seed(cfg.val_seed, s, kLossStream));
    r.loss += cfm_loss<T>(model, {{data.val_z[s], extent, obs}}, rng, false);
  }
  r.lsd /= static_cast<double>(data.val.size());
  r.loss /= static_cast<double>(data.val.size());
  return r;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline constexpr const char* kTrainLogHeader = "iteration,lr,train_loss,val_loss,val_lsd";

struct TrainLogRow {
  std::size_t iteration = 0;
  double lr = 0.0, train_loss = 0.0, val_loss = 0.0, val_lsd = 0.0;
};

inline std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InvalidArgument("missing training log " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != kTrainLogHeader) throw RuntimeError(path.string() + ": unexpected header");
  std::vector<TrainLogRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw RuntimeError(path.string() + ": malformed row '" + line + "'");
    rows.push_back({std::stoul(cells[0]), std::stod(cells[1]), std::stod(cells[2]), std::stod(cells[3]),
                    std::stod(cells[4])});
  }
  return rows;
}

struct TrainOptions {
  bool resume = false;        // continue from state.bin when present
  std::size_t stop_after = 0;  // pause once this iteration count is reached (0: run to the end)
  nlohmann::json checkpoint_meta = nlohmann::json::object();
  std::function<void(const TrainLogRow&)> on_validation;
};

struct TrainSummary {
  std::size_t iterations_run = 0;
  std::size_t final_iteration = 0;
  BestRecord best;
};

inline constexpr const char* kTrainLogFile = "train_log.csv";
inline constexpr const char* kBestCheckpointFile = "best.ckpt";
inline constexpr const char* kTrainStateFile = "state.bin";

template <typename T>
TrainSummary train(const ModelConfig& mcfg, const TrainConfig& cfg, const TrainingData<T>& data,
                   const std::filesystem::path& out_dir, const TrainOptions& opt = {}) {
  mcfg.validate();
  cfg.validate();
  if (mcfg.n_bins != data.train.front().n_bins) throw InvalidArgument("model n_bins does not match dataset");
  for (auto m : cfg.m_choices)
    if (m > mcfg.capacity || m > data.grid.size())
      throw InvalidArgument("training observation count " + std::to_string(m) + " exceeds capacity or grid");
  if (cfg.m_val > mcfg.capacity) throw InvalidArgument("m_val exceeds capacity");
  std::filesystem::create_directories(out_dir);
  const auto log_path = out_dir / kTrainLogFile;
  const auto state_path = out_dir / kTrainStateFile;

  TrainState<T> st(mcfg, cfg);
  std::vector<TrainLogRow> kept;
  if (opt.resume && std::filesystem::exists(state_path)) {
    load_train_state(state_path, st);
    for (const auto& row : read_train_log(log_path))
      if (row.iteration <= st.iteration) kept.push_back(row);
  }
  {
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw RuntimeError("cannot write " + log_path.string());
    log << kTrainLogHeader << '\n';
    for (const auto& r : kept)
      log << r.iteration << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ','
          << format_double(r.val_loss) << ',' << format_double(r.val_lsd) << '\n';
  }

  const ValidationPermutation val_sets =
      fixed_observation_sets(data.val.size(), data.grid.size(), cfg.m_val, cfg.val_seed);
  const nn::Dims3 extent = grid_dims(data.grid);
  const std::size_t end = opt.stop_after ? std::min(opt.stop_after, cfg.iterations) : cfg.iterations;
  TrainSummary summary;

  while (st.iteration < end) {
    const double lr = learning_rate(cfg, st.iteration);
    auto& params = st.model->params();
    params.zero_grad();
    const std::size_t m = draw_training_m(st.rng, cfg.m_choices);
    std::vector<FlowExample<T>> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t s = st.rng.uniform_int(data.train.size());
      batch.push_back({data.train_z[s], extent,
                       sample_observations(data.train[s], data.room, m, mcfg.capacity, st.rng, &data.norm)});
    }
    double loss = 0.0;
    try {
      loss = cfm_loss<T>(*st.model, batch, st.rng, true);
    } catch (const RuntimeError&) {
      loss = std::numeric_limits<double>::quiet_NaN();
    }
    if (!std::isfinite(loss) || loss > cfg.divergence_loss) {
      const auto dump = out_dir / "diverged_state.bin";
      save_train_state(dump, st);
      throw RuntimeError("training diverged at iteration " + std::to_string(st.iteration) +
                         " (loss " + format_double(loss) + ", lr " + format_double(lr) + "); state dumped to " +
                         dump.string());
    }
    st.optimizer.step(params, lr);
    ++st.iteration;
    ++summary.iterations_run;
    st.loss_sum += loss;
    ++st.loss_count;

    if (st.iteration % cfg.val_every == 0 || st.iteration == cfg.iterations) {
      const ValidationResult v = run_validation(*st.model, data, val_sets, cfg);
      const TrainLogRow row{st.iteration, lr, st.loss_sum / static_cast<double>(st.loss_count), v.loss, v.lsd};
      st.loss_sum = 0.0;
      st.loss_count = 0;
      {
        std::ofstream log(log_path, std::ios::app);
        log << row.iteration << ',' << format_double(row.lr) << ',' << format_double(row.train_loss) << ','
            << format_double(row.val_loss) << ',' << format_double(row.val_lsd) << '\n';
        if (!log) throw RuntimeError("failed appending to " + log_path.string());
      }
      if (!st.best.valid || v.lsd < st.best.val_lsd) {
        st.best = {true, st.iteration, v.lsd, v.loss};
        nlohmann::json meta = opt.checkpoint_meta;
        meta["iteration"] = st.iteration;
        meta["val_lsd"] = v.lsd;
        meta["val_loss"] = v.loss;
        meta["train"] = train_config_to_json(cfg);
        save_checkpoint(out_dir / kBestCheckpointFile, *st.model, meta);
      }
      save_train_state(state_path, st);
      if (opt.on_validation) opt.on_validation(row);
    }
  }
  save_train_state(state_path, st);
  summary.final_iteration = st.iteration;
  summary.best = st.best;
  return summary;
}

}  // namespace sfflow
