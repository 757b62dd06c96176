#pragma once

// Parameter storage and matrix aliases shared by every layer.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "sfflow/common.hpp"

namespace sfflow::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// Storage aligned to Eigen's maximum alignment. Eigen picks its vectorised
/// code path from the runtime address of mapped data, so unaligned heap
/// buffers would make floating-point results vary from run to run.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Named trainable array with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::vector<std::size_t> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;

  std::size_t size() const { return value.size(); }

  /// Row-major view as rows x (size/rows).
  MatMap<T> mat(std::size_t rows) {
    return MatMap<T>(value.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(value.size() / rows));
  }
  MatMap<T> grad_mat(std::size_t rows) {
    return MatMap<T>(grad.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(grad.size() / rows));
  }
};

/// Owns all parameters of a model. Addresses are stable (deque storage), so
/// layers keep plain pointers into it.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  Param<T>* add(const std::string& name, std::vector<std::size_t> shape) {
    for (const auto& p : params_)
      if (p.name == name) throw InvalidArgument("duplicate parameter name " + name);
    const std::size_t n =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    params_.push_back(Param<T>{name, std::move(shape), AlignedVector<T>(n, T(0)), AlignedVector<T>(n, T(0))});
    return &params_.back();
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  std::deque<Param<T>>& params() { return params_; }
  const std::deque<Param<T>>& params() const { return params_; }

 private:
  std::deque<Param<T>> params_;
};

/// Zero-mean normal initialisation with standard deviation 1/sqrt(fan_in).
template <typename T>
void init_fan_in(Param<T>& p, std::size_t fan_in, Rng& rng, double gain = 1.0) {
  const double std = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : p.value) v = static_cast<T>(std * rng.normal());
}

template <typename T>
void init_constant(Param<T>& p, T value) {
  std::fill(p.value.begin(), p.value.end(), value);
}

template <typename T>
inline T silu(T x) {
  return x / (T(1) + std::exp(-x));
}

template <typename T>
inline T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

/// Elementwise SiLU with its input cached for the backward pass.
template <typename T>
class SiLU {
 public:
  Mat<T> forward(const Mat<T>& x) {
    input_ = x;
    return x.unaryExpr([](T v) { return silu(v); });
  }

  Mat<T> backward(const Mat<T>& dy) const {
    return dy.cwiseProduct(input_.unaryExpr([](T v) { return silu_grad(v); }));
  }

 private:
  Mat<T> input_;
};

}  // namespace sfflow::nn
