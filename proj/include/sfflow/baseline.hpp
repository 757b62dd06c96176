#pragma once

// Gaussian kernel ridge regression on absolute microphone positions, solved
// independently per frequency bin directly on dB values.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <sstream>

#include "sfflow/dataset.hpp"

namespace sfflow {

struct KrrConfig {
  double gamma = 1e-2;  // kernel precision, 1/m^2
  double lambda = 1e-3;

  void validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw InvalidArgument("krr: gamma must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidArgument("krr: lambda must be >= 0");
  }

  bool operator==(const KrrConfig&) const = default;
};

inline double gaussian_kernel(const Vec3& a, const Vec3& b, double gamma) {
  return std::exp(-gamma * squared_distance(a, b));
}

/// `obs` must carry dB magnitudes (built without normalisation).
inline ATFCube krr_predict(const ObservationSet& obs, const MicGrid& grid, const Vec3& source,
                           const KrrConfig& cfg) {
  cfg.validate();
  const std::size_t m = obs.valid_count();
  if (m == 0) throw InvalidArgument("krr: need at least one observation");
  if (obs.positions.size() != m) throw InvalidArgument("krr: observation positions missing");
  const std::size_t nf = obs.n_bins;

  std::vector<std::size_t> slots;
  for (std::size_t s = 0; s < obs.capacity; ++s)
    if (obs.mask[s]) slots.push_back(s);

  if (cfg.lambda == 0.0) {
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a + 1; b < m; ++b)
        if (obs.positions[a] == obs.positions[b]) {
          std::ostringstream msg;
          msg << "krr: singular system, observations " << a << " and " << b
              << " share position (" << obs.positions[a][0] << ", " << obs.positions[a][1] << ", "
              << obs.positions[a][2] << ")";
          throw InvalidArgument(msg.str());
        }
  }

  Eigen::MatrixXd k(m, m);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) k(a, b) = gaussian_kernel(obs.positions[a], obs.positions[b], cfg.gamma);
  k.diagonal().array() += cfg.lambda;

  Eigen::MatrixXd y(m, nf);
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t f = 0; f < nf; ++f) y(a, f) = obs.magnitude(slots[a])[f];

  const Eigen::LLT<Eigen::MatrixXd> llt(k);
  if (llt.info() != Eigen::Success) throw RuntimeError("krr: kernel matrix is not positive definite");
  const Eigen::MatrixXd w = llt.solve(y);

  ATFCube out(nf, grid, source);
  const std::size_t n = grid.size();
  Eigen::MatrixXd kq(n, m);
  for (std::size_t j = 0; j < n; ++j) {
    const Vec3 q = grid.position(j);
    for (std::size_t a = 0; a < m; ++a) kq(j, a) = gaussian_kernel(q, obs.positions[a], cfg.gamma);
  }
  const Eigen::MatrixXd pred = kq * w;  // n x F
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t j = 0; j < n; ++j) out.values[f * n + j] = pred(j, f);
  return out;
}

}  // namespace sfflow
