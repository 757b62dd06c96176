#pragma once

// Test-split evaluation: every method sees the same fixed observation set per
// (source, M), and LSD is aggregated per bin range as mean and population std.

#include <algorithm>
#include <chrono>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>

#include "sfflow/baseline.hpp"
#include "sfflow/flow.hpp"
#include "sfflow/metrics.hpp"
#include "sfflow/model.hpp"

namespace sfflow {

/// Estimates a cube given the test cube (read only at `indices`).
using Estimator = std::function<ATFCube(const ATFCube& truth, const std::vector<std::size_t>& indices,
                                        std::size_t source, std::size_t m)>;

/// Methods hand out one estimator per worker so stateful models are never shared.
struct Method {
  std::string name;
  std::function<Estimator()> make;
};

inline Method krr_method(const RoomSpec& room, const KrrConfig& cfg) {
  return {"krr", [room, cfg] {
            return Estimator([room, cfg](const ATFCube& truth, const std::vector<std::size_t>& idx,
                                         std::size_t, std::size_t) {
              const ObservationSet obs = observations_from_indices(truth, room, idx, idx.size());
              return krr_predict(obs, truth.grid, truth.source, cfg);
            });
          }};
}

inline constexpr std::uint64_t kEvalNoiseStream = 0x6576616cULL;

/// Flow-model estimator; each worker loads its own copy of the checkpoint.
inline Method sfflow_method(const std::filesystem::path& checkpoint, const RoomSpec& room,
                            const NormStats& norm, std::size_t n_steps, std::uint64_t noise_seed) {
  if (!std::filesystem::exists(checkpoint)) throw InvalidArgument("missing checkpoint " + checkpoint.string());
  return {"sfflow", [=] {
            std::shared_ptr<FlowModel<float>> model = load_checkpoint<float>(checkpoint);
            return Estimator([=](const ATFCube& truth, const std::vector<std::size_t>& idx, std::size_t source,
                                 std::size_t m) {
              const ObservationSet obs =
                  observations_from_indices(truth, room, idx, model->config().capacity, &norm);
              return sample<float>(*model, obs, truth.grid, truth.source, norm, n_steps,
                                   mix_seed(noise_seed, source, m ^ kEvalNoiseStream));
            });
          }};
}

struct EvalConfig {
  std::vector<std::size_t> m_values{5};
  std::vector<BinRange> ranges;
  std::uint64_t seed = 2;  // test observation sets
  std::size_t threads = 1;

  bool operator==(const EvalConfig&) const = default;
};

struct EvalCell {
  std::string method;
  BinRange range;
  std::size_t m = 0;
  double mean = 0.0;
  double std = 0.0;
  std::size_t n_sources = 0;
};

struct EvalReport {
  std::vector<EvalCell> cells;
  std::map<std::string, double> seconds;  // wall clock per method (not part of the CSV)

  const EvalCell& find(const std::string& method, BinRange r, std::size_t m) const {
    for (const auto& c : cells)
      if (c.method == method && c.range == r && c.m == m) return c;
    throw InvalidArgument("report has no cell " + method + "/" + r.label() + "/M=" + std::to_string(m));
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "method,bins,m,mean_lsd,std_lsd,n_sources\n" << std::setprecision(17);
    for (const auto& c : cells)
      os << c.method << ',' << c.range.label() << ',' << c.m << ',' << c.mean << ',' << c.std << ','
         << c.n_sources << '\n';
    return os.str();
  }

  /// Methods as rows, bin ranges as columns, "mean ± std", one block per M.
  std::string to_table() const {
    std::vector<std::string> methods;
    std::vector<BinRange> ranges;
    std::vector<std::size_t> ms;
    for (const auto& c : cells) {
      if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
      if (std::find(ranges.begin(), ranges.end(), c.range) == ranges.end()) ranges.push_back(c.range);
      if (std::find(ms.begin(), ms.end(), c.m) == ms.end()) ms.push_back(c.m);
    }
    std::ostringstream os;
    for (std::size_t m : ms) {
      os << "LSD [dB], M = " << m << "\n" << std::left << std::setw(10) << "Method";
      for (const auto& r : ranges) os << std::setw(16) << r.label();
      os << '\n';
      for (const auto& name : methods) {
        os << std::setw(10) << name;
        for (const auto& r : ranges) {
          const EvalCell& c = find(name, r, m);
          std::ostringstream cell;
          cell << std::fixed << std::setprecision(2) << c.mean << " ± " << c.std;
          // "±" is two bytes in UTF-8 but one column wide.
          os << std::setw(17) << cell.str();
        }
        os << '\n';
      }
      os << '\n';
    }
    return os.str();
  }
};

inline void validate_eval(const EvalConfig& cfg, std::size_t n_bins, std::size_t grid_size) {
  if (cfg.m_values.empty() || cfg.ranges.empty()) throw InvalidArgument("eval: need M values and bin ranges");
  for (auto m : cfg.m_values)
    if (m == 0 || m > grid_size) throw InvalidArgument("eval: M=" + std::to_string(m) + " outside grid size");
  for (const auto& r : cfg.ranges) r.validate(n_bins);
  if (cfg.threads == 0) throw InvalidArgument("eval: threads must be >= 1");
}

/// Runs every method on every test source for every M; workers split the
/// sources, and results are gathered by index so the report does not depend
/// on the thread count.
inline EvalReport evaluate(const std::vector<ATFCube>& test, const std::vector<Method>& methods,
                           const EvalConfig& cfg) {
  if (test.empty()) throw InvalidArgument("eval: empty test split");
  validate_eval(cfg, test.front().n_bins, test.front().positions());
  EvalReport report;
  for (const auto& method : methods) {
    const auto t0 = std::chrono::steady_clock::now();
    // lsd[m][range][source]
    std::vector<std::vector<std::vector<double>>> values(
        cfg.m_values.size(), std::vector<std::vector<double>>(cfg.ranges.size(), std::vector<double>(test.size())));
    std::vector<ValidationPermutation> sets;
    for (auto m : cfg.m_values)
      sets.push_back(fixed_observation_sets(test.size(), test.front().positions(), m, cfg.seed));

    const std::size_t n_workers = std::min(cfg.threads, test.size());
    std::vector<std::exception_ptr> errors(n_workers);
    auto work = [&](std::size_t w) {
      try {
        Estimator est = method.make();
        for (std::size_t s = w; s < test.size(); s += n_workers)
          for (std::size_t mi = 0; mi < cfg.m_values.size(); ++mi) {
            const ATFCube cube = est(test[s], sets[mi].indices[s], s, cfg.m_values[mi]);
            for (std::size_t ri = 0; ri < cfg.ranges.size(); ++ri)
              values[mi][ri][s] = lsd(cube, test[s], cfg.ranges[ri]);
          }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    };
    if (n_workers == 1) {
      work(0);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(work, w);
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);

    for (std::size_t ri = 0; ri < cfg.ranges.size(); ++ri)
      for (std::size_t mi = 0; mi < cfg.m_values.size(); ++mi) {
        const auto& v = values[mi][ri];
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= static_cast<double>(v.size());
        report.cells.push_back({method.name, cfg.ranges[ri], cfg.m_values[mi], mean, std::sqrt(var), v.size()});
      }
    report.seconds[method.name] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return report;
}

}  // namespace sfflow
