#pragma once

// Layers with explicit forward/backward passes. Each layer caches what its
// backward pass needs from the most recent forward call, so a layer instance
// serves one example at a time: forward, then backward, then the next example.
//
// Spatial activations are [channels x positions] row-major matrices with
// positions flattened in (d, h, w) order.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "sfflow/nn/core.hpp"

namespace sfflow::nn {

struct Dims3 {
  std::size_t d = 1, h = 1, w = 1;
  std::size_t size() const { return d * h * w; }
  bool operator==(const Dims3&) const = default;
};

// --- Linear -----------------------------------------------------------------

/// y = x W^T + b over rows of x.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool zero_init = false)
      : in_(in), out_(out) {
    weight_ = store.add(name + ".weight", {out, in});
    bias_ = store.add(name + ".bias", {out});
    if (!zero_init) init_fan_in(*weight_, in, rng);
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Param<T>& weight() { return *weight_; }
  Param<T>& bias() { return *bias_; }

  Mat<T> forward(const Mat<T>& x) {
    input_ = x;
    return apply(x);
  }

  /// Forward without caching (inference or shared use).
  Mat<T> apply(const Mat<T>& x) const {
    Mat<T> y = x * weight_->mat(out_).transpose();
    y.rowwise() += bias_row();
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    weight_->grad_mat(out_).noalias() += dy.transpose() * input_;
    bias_grad_row() += dy.colwise().sum();
    return dy * weight_->mat(out_);
  }

 private:
  Eigen::Map<const RowVec<T>> bias_row() const {
    return Eigen::Map<const RowVec<T>>(bias_->value.data(), static_cast<Eigen::Index>(out_));
  }
  Eigen::Map<RowVec<T>> bias_grad_row() {
    return Eigen::Map<RowVec<T>>(bias_->grad.data(), static_cast<Eigen::Index>(out_));
  }

  std::size_t in_ = 0, out_ = 0;
  Param<T>* weight_ = nullptr;
  Param<T>* bias_ = nullptr;
  Mat<T> input_;
};

/// Two affine layers with SiLU between.
template <typename T>
class Mlp2 {
 public:
  Mlp2() = default;
  Mlp2(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
       std::size_t out, Rng& rng, bool zero_last = false)
      : first_(store, name + ".0", in, hidden, rng), second_(store, name + ".1", hidden, out, rng, zero_last) {}

  Mat<T> forward(const Mat<T>& x) { return second_.forward(act_.forward(first_.forward(x))); }
  Mat<T> backward(const Mat<T>& dy) { return first_.backward(act_.backward(second_.backward(dy))); }

  Linear<T>& last() { return second_; }

 private:
  Linear<T> first_;
  SiLU<T> act_;
  Linear<T> second_;
};

// --- normalisation -------------------------------------------------------------

/// Normalises each row of x over its columns, then scales and shifts per column.
template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& store, const std::string& name, std::size_t dim) : dim_(dim) {
    gamma_ = store.add(name + ".gamma", {dim});
    beta_ = store.add(name + ".beta", {dim});
    init_constant(*gamma_, T(1));
  }

  Mat<T> forward(const Mat<T>& x) {
    const auto rows = x.rows();
    const T n = static_cast<T>(dim_);
    xhat_.resize(rows, x.cols());
    inv_std_.resize(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const T mean = x.row(r).sum() / n;
      const T var = (x.row(r).array() - mean).square().sum() / n;
      inv_std_[r] = T(1) / std::sqrt(var + kEps);
      xhat_.row(r) = (x.row(r).array() - mean) * inv_std_[r];
    }
    Mat<T> y = xhat_;
    for (Eigen::Index r = 0; r < rows; ++r)
      y.row(r) = xhat_.row(r).cwiseProduct(gamma_row()) + beta_row();
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    const T n = static_cast<T>(dim_);
    Mat<T> dx(dy.rows(), dy.cols());
    auto dgamma = Eigen::Map<RowVec<T>>(gamma_->grad.data(), static_cast<Eigen::Index>(dim_));
    auto dbeta = Eigen::Map<RowVec<T>>(beta_->grad.data(), static_cast<Eigen::Index>(dim_));
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      dgamma += dy.row(r).cwiseProduct(xhat_.row(r));
      dbeta += dy.row(r);
      const RowVec<T> dxhat = dy.row(r).cwiseProduct(gamma_row());
      const T s1 = dxhat.sum();
      const T s2 = dxhat.dot(xhat_.row(r));
      dx.row(r) = (inv_std_[r] / n) * (n * dxhat.array() - s1 - xhat_.row(r).array() * s2);
    }
    return dx;
  }

 private:
  static constexpr T kEps = T(1e-5);
  Eigen::Map<const RowVec<T>> gamma_row() const {
    return Eigen::Map<const RowVec<T>>(gamma_->value.data(), static_cast<Eigen::Index>(dim_));
  }
  Eigen::Map<const RowVec<T>> beta_row() const {
    return Eigen::Map<const RowVec<T>>(beta_->value.data(), static_cast<Eigen::Index>(dim_));
  }

  std::size_t dim_ = 0;
  Param<T>* gamma_ = nullptr;
  Param<T>* beta_ = nullptr;
  Mat<T> xhat_;
  std::vector<T> inv_std_;
};

/// Largest divisor of `channels` that does not exceed `max_groups`.
inline std::size_t group_count(std::size_t channels, std::size_t max_groups = 8) {
  for (std::size_t g = std::min(channels, max_groups); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

/// Group normalisation over [C x P] activations with per-channel affine.
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParamStore<T>& store, const std::string& name, std::size_t channels,
            std::size_t max_groups = 8)
      : channels_(channels), groups_(group_count(channels, max_groups)) {
    gamma_ = store.add(name + ".gamma", {channels});
    beta_ = store.add(name + ".beta", {channels});
    init_constant(*gamma_, T(1));
  }

  std::size_t groups() const { return groups_; }

  Mat<T> forward(const Mat<T>& x) {
    const std::size_t per = channels_ / groups_;
    const auto p = x.cols();
    const T n = static_cast<T>(per * static_cast<std::size_t>(p));
    xhat_.resize(x.rows(), p);
    inv_std_.assign(groups_, T(0));
    for (std::size_t g = 0; g < groups_; ++g) {
      const auto block = x.middleRows(static_cast<Eigen::Index>(g * per), static_cast<Eigen::Index>(per));
      const T mean = block.sum() / n;
      const T var = (block.array() - mean).square().sum() / n;
      inv_std_[g] = T(1) / std::sqrt(var + kEps);
      xhat_.middleRows(static_cast<Eigen::Index>(g * per), static_cast<Eigen::Index>(per)) =
          (block.array() - mean) * inv_std_[g];
    }
    Mat<T> y(x.rows(), p);
    for (std::size_t c = 0; c < channels_; ++c)
      y.row(c) = (xhat_.row(c).array() * gamma_->value[c] + beta_->value[c]).matrix();
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    const std::size_t per = channels_ / groups_;
    const T n = static_cast<T>(per * static_cast<std::size_t>(dy.cols()));
    Mat<T> dxhat(dy.rows(), dy.cols());
    for (std::size_t c = 0; c < channels_; ++c) {
      gamma_->grad[c] += dy.row(c).dot(xhat_.row(c));
      beta_->grad[c] += dy.row(c).sum();
      dxhat.row(c) = dy.row(c) * gamma_->value[c];
    }
    Mat<T> dx(dy.rows(), dy.cols());
    for (std::size_t g = 0; g < groups_; ++g) {
      const auto rows = static_cast<Eigen::Index>(g * per);
      const auto cnt = static_cast<Eigen::Index>(per);
      const auto dh = dxhat.middleRows(rows, cnt);
      const auto xh = xhat_.middleRows(rows, cnt);
      const T s1 = dh.sum();
      const T s2 = dh.cwiseProduct(xh).sum();
      dx.middleRows(rows, cnt) = (inv_std_[g] / n) * (n * dh.array() - s1 - xh.array() * s2);
    }
    return dx;
  }

 private:
  static constexpr T kEps = T(1e-5);
  std::size_t channels_ = 0, groups_ = 1;
  Param<T>* gamma_ = nullptr;
  Param<T>* beta_ = nullptr;
  Mat<T> xhat_;
  std::vector<T> inv_std_;
};

// --- attention ---------------------------------------------------------------------

/// Multi-head attention from query rows onto key/value rows. Masked key rows
/// are dropped before the softmax, so they receive exactly zero weight and
/// their contents never reach the output.
template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& store, const std::string& name, std::size_t query_dim,
                     std::size_t kv_dim, std::size_t n_heads, Rng& rng)
      : dim_(query_dim), heads_(n_heads) {
    if (n_heads == 0 || query_dim % n_heads != 0)
      throw InvalidArgument(name + ": width " + std::to_string(query_dim) +
                            " not divisible by head count " + std::to_string(n_heads));
    q_ = Linear<T>(store, name + ".q", query_dim, query_dim, rng);
    k_ = Linear<T>(store, name + ".k", kv_dim, query_dim, rng);
    v_ = Linear<T>(store, name + ".v", kv_dim, query_dim, rng);
    o_ = Linear<T>(store, name + ".o", query_dim, query_dim, rng);
  }

  Linear<T>& value_projection() { return v_; }
  Linear<T>& output_projection() { return o_; }

  Mat<T> forward(const Mat<T>& queries, const Mat<T>& keys, const std::vector<bool>& mask) {
    valid_.clear();
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) valid_.push_back(static_cast<Eigen::Index>(i));
    if (valid_.empty()) throw InvalidArgument("attention over an all-masked key set");
    n_keys_ = keys.rows();
    Mat<T> kv_in(static_cast<Eigen::Index>(valid_.size()), keys.cols());
    for (std::size_t i = 0; i < valid_.size(); ++i) kv_in.row(i) = keys.row(valid_[i]);

    Q_ = q_.forward(queries);
    K_ = k_.forward(kv_in);
    V_ = v_.forward(kv_in);
    const std::size_t dh = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    probs_.resize(heads_);
    Mat<T> context(Q_.rows(), static_cast<Eigen::Index>(dim_));
    for (std::size_t h = 0; h < heads_; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh), cn = static_cast<Eigen::Index>(dh);
      Mat<T> s = (Q_.middleCols(c0, cn) * K_.middleCols(c0, cn).transpose()) * scale;
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const T mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      context.middleCols(c0, cn).noalias() = s * V_.middleCols(c0, cn);
      probs_[h] = std::move(s);
    }
    return o_.forward(context);
  }

  /// Returns (d queries, d keys) where d keys has zero rows for masked slots.
  std::pair<Mat<T>, Mat<T>> backward(const Mat<T>& dy) {
    const Mat<T> dcontext = o_.backward(dy);
    const std::size_t dh = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> dQ(Q_.rows(), Q_.cols()), dK(K_.rows(), K_.cols()), dV(V_.rows(), V_.cols());
    for (std::size_t h = 0; h < heads_; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh), cn = static_cast<Eigen::Index>(dh);
      const Mat<T>& p = probs_[h];
      const auto dctx = dcontext.middleCols(c0, cn);
      dV.middleCols(c0, cn).noalias() = p.transpose() * dctx;
      Mat<T> dp = dctx * V_.middleCols(c0, cn).transpose();
      for (Eigen::Index r = 0; r < dp.rows(); ++r) {
        const T dot = dp.row(r).dot(p.row(r));
        dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
      }
      dp *= scale;
      dQ.middleCols(c0, cn).noalias() = dp * K_.middleCols(c0, cn);
      dK.middleCols(c0, cn).noalias() = dp.transpose() * Q_.middleCols(c0, cn);
    }
    Mat<T> dqueries = q_.backward(dQ);
    const Mat<T> dkv = k_.backward(dK) + v_.backward(dV);
    Mat<T> dkeys = Mat<T>::Zero(n_keys_, dkv.cols());
    for (std::size_t i = 0; i < valid_.size(); ++i) dkeys.row(valid_[i]) = dkv.row(i);
    return {std::move(dqueries), std::move(dkeys)};
  }

 private:
  std::size_t dim_ = 0, heads_ = 1;
  Linear<T> q_, k_, v_, o_;
  std::vector<Eigen::Index> valid_;
  Eigen::Index n_keys_ = 0;
  Mat<T> Q_, K_, V_;
  std::vector<Mat<T>> probs_;
};

// --- 3D convolutions ----------------------------------------------------------------

inline Dims3 conv_output_dims(Dims3 in, std::size_t k, std::size_t stride, std::size_t pad) {
  auto o = [&](std::size_t n) { return (n + 2 * pad - k) / stride + 1; };
  return {o(in.d), o(in.h), o(in.w)};
}

/// Cubic-kernel 3D convolution with zero padding, lowered to a GEMM via im2col.
template <typename T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng, bool zero_init = false)
      : cin_(cin), cout_(cout), k_(kernel), stride_(stride), pad_(pad) {
    weight_ = store.add(name + ".weight", {cout, cin, kernel, kernel, kernel});
    bias_ = store.add(name + ".bias", {cout});
    if (!zero_init) init_fan_in(*weight_, cin * kernel * kernel * kernel, rng);
  }

  Param<T>& weight() { return *weight_; }
  Param<T>& bias() { return *bias_; }
  Dims3 output_dims(Dims3 in) const { return conv_output_dims(in, k_, stride_, pad_); }

  Mat<T> forward(const Mat<T>& x, Dims3 in) {
    in_ = in;
    out_ = output_dims(in);
    if (pointwise()) {
      col_ = x;
    } else {
      im2col(x);
    }
    Mat<T> y = weight_->mat(cout_) * col_;
    for (std::size_t c = 0; c < cout_; ++c) y.row(c).array() += bias_->value[c];
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    weight_->grad_mat(cout_).noalias() += dy * col_.transpose();
    for (std::size_t c = 0; c < cout_; ++c) bias_->grad[c] += dy.row(c).sum();
    Mat<T> dcol = weight_->mat(cout_).transpose() * dy;
    if (pointwise()) return dcol;
    return col2im(dcol);
  }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  // Calls fn(row, out_pos, in_pos) for every in-bounds tap.
  template <typename Fn>
  void for_each_tap(Fn&& fn) const {
    const long pd = static_cast<long>(pad_);
    const long s = static_cast<long>(stride_);
    for (std::size_t ci = 0; ci < cin_; ++ci)
      for (std::size_t kd = 0; kd < k_; ++kd)
        for (std::size_t kh = 0; kh < k_; ++kh)
          for (std::size_t kw = 0; kw < k_; ++kw) {
            const std::size_t row = ((ci * k_ + kd) * k_ + kh) * k_ + kw;
            for (std::size_t od = 0; od < out_.d; ++od) {
              const long id = static_cast<long>(od) * s - pd + static_cast<long>(kd);
              if (id < 0 || id >= static_cast<long>(in_.d)) continue;
              for (std::size_t oh = 0; oh < out_.h; ++oh) {
                const long ih = static_cast<long>(oh) * s - pd + static_cast<long>(kh);
                if (ih < 0 || ih >= static_cast<long>(in_.h)) continue;
                const std::size_t out_base = (od * out_.h + oh) * out_.w;
                const std::size_t in_base = (static_cast<std::size_t>(id) * in_.h + static_cast<std::size_t>(ih)) * in_.w;
                for (std::size_t ow = 0; ow < out_.w; ++ow) {
                  const long iw = static_cast<long>(ow) * s - pd + static_cast<long>(kw);
                  if (iw < 0 || iw >= static_cast<long>(in_.w)) continue;
                  fn(ci, row, out_base + ow, in_base + static_cast<std::size_t>(iw));
                }
              }
            }
          }
  }

  void im2col(const Mat<T>& x) {
    col_.setZero(static_cast<Eigen::Index>(cin_ * k_ * k_ * k_), static_cast<Eigen::Index>(out_.size()));
    T* col = col_.data();
    const T* src = x.data();
    const std::size_t ncol = out_.size(), nin = in_.size();
    for_each_tap([&](std::size_t ci, std::size_t row, std::size_t o, std::size_t i) {
      col[row * ncol + o] = src[ci * nin + i];
    });
  }

  Mat<T> col2im(const Mat<T>& dcol) const {
    Mat<T> dx = Mat<T>::Zero(static_cast<Eigen::Index>(cin_), static_cast<Eigen::Index>(in_.size()));
    T* dst = dx.data();
    const T* col = dcol.data();
    const std::size_t ncol = out_.size(), nin = in_.size();
    for_each_tap([&](std::size_t ci, std::size_t row, std::size_t o, std::size_t i) {
      dst[ci * nin + i] += col[row * ncol + o];
    });
    return dx;
  }

  std::size_t cin_ = 0, cout_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param<T>* weight_ = nullptr;
  Param<T>* bias_ = nullptr;
  Dims3 in_, out_;
  Mat<T> col_;
};

/// Kernel-2, stride-2 transposed convolution (exact 2x upsampling).
template <typename T>
class ConvTranspose3d {
 public:
  ConvTranspose3d() = default;
  ConvTranspose3d(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                  Rng& rng)
      : cin_(cin), cout_(cout) {
    weight_ = store.add(name + ".weight", {cout, 2, 2, 2, cin});
    bias_ = store.add(name + ".bias", {cout});
    init_fan_in(*weight_, cin, rng);
  }

  static Dims3 output_dims(Dims3 in) { return {2 * in.d, 2 * in.h, 2 * in.w}; }

  Mat<T> forward(const Mat<T>& x, Dims3 in) {
    in_ = in;
    input_ = x;
    const Mat<T> blocks = weight_->mat(cout_ * 8) * x;  // [cout*8 x P]
    const Dims3 out = output_dims(in);
    Mat<T> y(static_cast<Eigen::Index>(cout_), static_cast<Eigen::Index>(out.size()));
    scatter_blocks(blocks, y, out);
    for (std::size_t c = 0; c < cout_; ++c) y.row(c).array() += bias_->value[c];
    return y;
  }

  Mat<T> backward(const Mat<T>& dy) {
    const Dims3 out = output_dims(in_);
    Mat<T> dblocks(static_cast<Eigen::Index>(cout_ * 8), static_cast<Eigen::Index>(in_.size()));
    gather_blocks(dy, dblocks, out);
    weight_->grad_mat(cout_ * 8).noalias() += dblocks * input_.transpose();
    for (std::size_t c = 0; c < cout_; ++c) bias_->grad[c] += dy.row(c).sum();
    return weight_->mat(cout_ * 8).transpose() * dblocks;
  }

 private:
  template <typename Fn>
  void for_each_block(Dims3 out, Fn&& fn) const {
    for (std::size_t c = 0; c < cout_; ++c)
      for (std::size_t k = 0; k < 8; ++k) {
        const std::size_t kd = k >> 2, kh = (k >> 1) & 1, kw = k & 1;
        for (std::size_t d = 0; d < in_.d; ++d)
          for (std::size_t h = 0; h < in_.h; ++h)
            for (std::size_t w = 0; w < in_.w; ++w) {
              const std::size_t p = (d * in_.h + h) * in_.w + w;
              const std::size_t q = ((2 * d + kd) * out.h + 2 * h + kh) * out.w + 2 * w + kw;
              fn(c * 8 + k, p, c, q);
            }
      }
  }

  void scatter_blocks(const Mat<T>& blocks, Mat<T>& y, Dims3 out) const {
    for_each_block(out, [&](std::size_t row, std::size_t p, std::size_t c, std::size_t q) {
      y(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(q)) =
          blocks(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(p));
    });
  }

  void gather_blocks(const Mat<T>& dy, Mat<T>& dblocks, Dims3 out) const {
    for_each_block(out, [&](std::size_t row, std::size_t p, std::size_t c, std::size_t q) {
      dblocks(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(p)) =
          dy(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(q));
    });
  }

  std::size_t cin_ = 0, cout_ = 0;
  Param<T>* weight_ = nullptr;
  Param<T>* bias_ = nullptr;
  Dims3 in_;
  Mat<T> input_;
};

// --- reflective padding ------------------------------------------------------------

/// Split of a padding deficit; the extra sample of an odd deficit goes high.
struct PadSplit {
  std::size_t low = 0, high = 0;
};

inline PadSplit pad_split(std::size_t extent, std::size_t target) {
  if (target < extent) throw InvalidArgument("pad target smaller than extent");
  const std::size_t deficit = target - extent;
  const PadSplit s{deficit / 2, deficit - deficit / 2};
  if (s.high > 0 && s.high > extent - 1)
    throw InvalidArgument("reflection of " + std::to_string(s.high) +
                          " samples exceeds extent - 1 = " + std::to_string(extent - 1));
  return s;
}

/// Source index for padded position i (reflection without edge repeat).
inline std::size_t reflect_index(long i, std::size_t extent) {
  const long n = static_cast<long>(extent);
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= n) return static_cast<std::size_t>(2 * (n - 1) - i);
  return static_cast<std::size_t>(i);
}

namespace detail {

// Calls fn(dst_pos, src_pos) for every padded position.
template <typename Fn>
void for_each_reflect(Dims3 in, Dims3 out, Fn&& fn) {
  const PadSplit sd = pad_split(in.d, out.d), sh = pad_split(in.h, out.h), sw = pad_split(in.w, out.w);
  for (std::size_t d = 0; d < out.d; ++d) {
    const std::size_t id = reflect_index(static_cast<long>(d) - static_cast<long>(sd.low), in.d);
    for (std::size_t h = 0; h < out.h; ++h) {
      const std::size_t ih = reflect_index(static_cast<long>(h) - static_cast<long>(sh.low), in.h);
      for (std::size_t w = 0; w < out.w; ++w) {
        const std::size_t iw = reflect_index(static_cast<long>(w) - static_cast<long>(sw.low), in.w);
        fn((d * out.h + h) * out.w + w, (id * in.h + ih) * in.w + iw);
      }
    }
  }
}

}  // namespace detail

/// Reflect-pads every channel of x from `in` to `out` extents.
template <typename T>
Mat<T> reflect_pad(const Mat<T>& x, Dims3 in, Dims3 out) {
  Mat<T> y(x.rows(), static_cast<Eigen::Index>(out.size()));
  detail::for_each_reflect(in, out, [&](std::size_t dst, std::size_t src) {
    y.col(static_cast<Eigen::Index>(dst)) = x.col(static_cast<Eigen::Index>(src));
  });
  return y;
}

/// Adjoint of reflect_pad: folds padded gradients back onto the source region.
template <typename T>
Mat<T> reflect_pad_backward(const Mat<T>& dy, Dims3 in, Dims3 out) {
  Mat<T> dx = Mat<T>::Zero(dy.rows(), static_cast<Eigen::Index>(in.size()));
  detail::for_each_reflect(in, out, [&](std::size_t dst, std::size_t src) {
    dx.col(static_cast<Eigen::Index>(src)) += dy.col(static_cast<Eigen::Index>(dst));
  });
  return dx;
}

/// Extracts the original `out` region from a tensor padded with reflect_pad.
template <typename T>
Mat<T> crop(const Mat<T>& x, Dims3 padded, Dims3 out) {
  const PadSplit sd = pad_split(out.d, padded.d), sh = pad_split(out.h, padded.h),
                 sw = pad_split(out.w, padded.w);
  Mat<T> y(x.rows(), static_cast<Eigen::Index>(out.size()));
  for (std::size_t d = 0; d < out.d; ++d)
    for (std::size_t h = 0; h < out.h; ++h)
      for (std::size_t w = 0; w < out.w; ++w)
        y.col(static_cast<Eigen::Index>((d * out.h + h) * out.w + w)) = x.col(static_cast<Eigen::Index>(
            ((d + sd.low) * padded.h + h + sh.low) * padded.w + w + sw.low));
  return y;
}

template <typename T>
Mat<T> crop_backward(const Mat<T>& dy, Dims3 padded, Dims3 out) {
  const PadSplit sd = pad_split(out.d, padded.d), sh = pad_split(out.h, padded.h),
                 sw = pad_split(out.w, padded.w);
  Mat<T> dx = Mat<T>::Zero(dy.rows(), static_cast<Eigen::Index>(padded.size()));
  for (std::size_t d = 0; d < out.d; ++d)
    for (std::size_t h = 0; h < out.h; ++h)
      for (std::size_t w = 0; w < out.w; ++w)
        dx.col(static_cast<Eigen::Index>(((d + sd.low) * padded.h + h + sh.low) * padded.w + w + sw.low)) =
            dy.col(static_cast<Eigen::Index>((d * out.h + h) * out.w + w));
  return dx;
}

}  // namespace sfflow::nn
