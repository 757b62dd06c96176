#pragma once

// Flow matching along the linear (optimal-transport) Gaussian path:
// x_t = t z + (1 - t) eps, target field z - eps, Euler sampling.

#include <cmath>
#include <string>
#include <vector>

#include "sfflow/dataset.hpp"
#include "sfflow/nn/core.hpp"
#include "sfflow/nn/layers.hpp"

namespace sfflow {

inline constexpr std::size_t kDefaultEulerSteps = 10;

template <typename T>
nn::Mat<T> ot_path_sample(const nn::Mat<T>& z, const nn::Mat<T>& eps, T t) {
  if (z.rows() != eps.rows() || z.cols() != eps.cols())
    throw InvalidArgument("ot_path_sample: shape mismatch");
  if (t < T(0) || t > T(1)) throw InvalidArgument("ot_path_sample: t outside [0, 1]");
  if (t == T(0)) return eps;
  if (t == T(1)) return z;
  return t * z + (T(1) - t) * eps;
}

/// Conditional target field of the linear path; independent of t.
template <typename T>
nn::Mat<T> conditional_target(const nn::Mat<T>& z, const nn::Mat<T>& eps) {
  if (z.rows() != eps.rows() || z.cols() != eps.cols())
    throw InvalidArgument("conditional_target: shape mismatch");
  return z - eps;
}

template <typename T>
nn::Mat<T> standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  nn::Mat<T> x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<T>(rng.normal());
  return x;
}

/// One training example: a normalised ground-truth cube ([F x positions])
/// and the observation set drawn from it.
template <typename T>
struct FlowExample {
  nn::Mat<T> z;
  nn::Dims3 extent;
  ObservationSet obs;
};

/// Mean squared CFM error over all elements, averaged over the batch.
/// Draws t ~ U(0,1) then eps ~ N(0, I) per example, and accumulates the
/// gradient of the returned loss into the model parameters.
///
/// Model requirements: forward(x, extent, t, obs) -> Mat, backward(dpred).
template <typename T, typename Model>
double cfm_loss(Model& model, const std::vector<FlowExample<T>>& batch, Rng& rng,
                bool accumulate_gradients = true) {
  if (batch.empty()) throw InvalidArgument("cfm_loss: empty batch");
  double total = 0.0;
  for (const auto& ex : batch) {
    const double t = rng.uniform();
    const nn::Mat<T> eps = standard_normal<T>(ex.z.rows(), ex.z.cols(), rng);
    const nn::Mat<T> xt = ot_path_sample(ex.z, eps, static_cast<T>(t));
    const nn::Mat<T> pred = model.forward(xt, ex.extent, t, ex.obs);
    const nn::Mat<T> err = pred - conditional_target(ex.z, eps);
    const double n = static_cast<double>(err.size());
    const double loss = static_cast<double>(err.squaredNorm()) / n;
    if (!std::isfinite(loss)) throw RuntimeError("cfm_loss: non-finite loss");
    total += loss;
    if (accumulate_gradients)
      model.backward(err * static_cast<T>(2.0 / (n * static_cast<double>(batch.size()))));
  }
  return total / static_cast<double>(batch.size());
}

/// Forward Euler from t = 0 to t = 1 in `n_steps` equal steps.
/// `field(x, t)` returns the velocity at (x, t).
template <typename T, typename Field>
nn::Mat<T> euler_integrate(nn::Mat<T> x, std::size_t n_steps, Field&& field) {
  if (n_steps == 0) throw InvalidArgument("euler_integrate: need at least one step");
  const T h = T(1) / static_cast<T>(n_steps);
  for (std::size_t k = 0; k < n_steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(n_steps);
    x += h * field(x, t);
    if (!x.allFinite())
      throw RuntimeError("euler_integrate: non-finite state at step " + std::to_string(k));
  }
  return x;
}

/// Draws x_0 from `noise_seed` and integrates the model's field; returns the
/// estimate in normalised units.
template <typename T, typename Model>
nn::Mat<T> sample_normalized(Model& model, const ObservationSet& obs, std::size_t n_bins,
                             nn::Dims3 extent, std::size_t n_steps, std::uint64_t noise_seed) {
  Rng rng(noise_seed);
  nn::Mat<T> x0 = standard_normal<T>(static_cast<Eigen::Index>(n_bins),
                                     static_cast<Eigen::Index>(extent.size()), rng);
  return euler_integrate<T>(std::move(x0), n_steps, [&](const nn::Mat<T>& x, double t) {
    return model.forward(x, extent, t, obs);
  });
}

inline nn::Dims3 grid_dims(const MicGrid& g) { return {g.counts[0], g.counts[1], g.counts[2]}; }

/// Cube estimate in dB for one observation set.
template <typename T, typename Model>
ATFCube sample(Model& model, const ObservationSet& obs, const MicGrid& grid, const Vec3& source,
               const NormStats& norm, std::size_t n_steps, std::uint64_t noise_seed) {
  const nn::Mat<T> z =
      sample_normalized<T>(model, obs, obs.n_bins, grid_dims(grid), n_steps, noise_seed);
  ATFCube cube(obs.n_bins, grid, source);
  for (std::size_t i = 0; i < cube.values.size(); ++i)
    cube.values[i] = norm.denormalize(static_cast<double>(z.data()[i]));
  return cube;
}

/// Normalised cube values as an [F x positions] matrix.
template <typename T>
nn::Mat<T> cube_to_matrix(const ATFCube& cube, const NormStats& norm) {
  nn::Mat<T> z(static_cast<Eigen::Index>(cube.n_bins), static_cast<Eigen::Index>(cube.positions()));
  for (std::size_t i = 0; i < cube.values.size(); ++i)
    z.data()[i] = static_cast<T>(norm.normalize(cube.values[i]));
  return z;
}

}  // namespace sfflow
