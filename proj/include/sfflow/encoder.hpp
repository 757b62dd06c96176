#pragma once

// Permutation-invariant set encoder: observation tokens, masked
// self-attention, pooled context, and per-frequency FiLM parameters.

#include <string>
#include <vector>

#include "sfflow/dataset.hpp"
#include "sfflow/nn/layers.hpp"

namespace sfflow {

struct EncoderConfig {
  std::size_t d_model = 512;
  std::size_t n_layers = 3;
  std::size_t n_heads = 8;
  std::size_t mlp_hidden = 512;  // input MLP width; 0 means d_model
  std::size_t ffn_hidden = 0;    // Transformer feed-forward width; 0 means 4 * d_model
  std::size_t n_bins = 64;
  std::size_t capacity = 50;

  std::size_t input_hidden() const { return mlp_hidden ? mlp_hidden : d_model; }
  std::size_t feedforward() const { return ffn_hidden ? ffn_hidden : 4 * d_model; }

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || n_bins == 0 || capacity == 0)
      throw InvalidArgument("encoder config: all sizes must be positive");
    if (d_model % n_heads != 0)
      throw InvalidArgument("encoder config: d_model must be divisible by n_heads");
  }

  bool operator==(const EncoderConfig&) const = default;
};

template <typename T>
struct EncoderOutput {
  nn::Mat<T> tokens;  // capacity x d_model
  nn::RowVec<T> pooled;
  std::vector<T> film_scale;  // one per frequency bin
  std::vector<T> film_shift;
  std::vector<bool> mask;
};

/// Gradients of a scalar loss with respect to an EncoderOutput.
template <typename T>
struct EncoderOutputGrad {
  nn::Mat<T> tokens;
  nn::RowVec<T> pooled;
  std::vector<T> film_scale;
  std::vector<T> film_shift;

  static EncoderOutputGrad zeros(const EncoderConfig& c) {
    return {nn::Mat<T>::Zero(static_cast<Eigen::Index>(c.capacity), static_cast<Eigen::Index>(c.d_model)),
            nn::RowVec<T>::Zero(static_cast<Eigen::Index>(c.d_model)), std::vector<T>(c.n_bins, T(0)),
            std::vector<T>(c.n_bins, T(0))};
  }
};

namespace detail {

template <typename T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(nn::ParamStore<T>& store, const std::string& name, const EncoderConfig& c, Rng& rng)
      : norm1_(store, name + ".norm1", c.d_model),
        attn_(store, name + ".attn", c.d_model, c.d_model, c.n_heads, rng),
        norm2_(store, name + ".norm2", c.d_model),
        ffn_(store, name + ".ffn", c.d_model, c.feedforward(), c.d_model, rng) {}

  nn::Mat<T> forward(const nn::Mat<T>& x, const std::vector<bool>& mask) {
    const nn::Mat<T> h = norm1_.forward(x);
    const nn::Mat<T> x1 = x + attn_.forward(h, h, mask);
    return x1 + ffn_.forward(norm2_.forward(x1));
  }

  nn::Mat<T> backward(const nn::Mat<T>& dy) {
    const nn::Mat<T> dx1 = dy + norm2_.backward(ffn_.backward(dy));
    auto [dq, dk] = attn_.backward(dx1);
    return dx1 + norm1_.backward(dq + dk);
  }

 private:
  nn::LayerNorm<T> norm1_;
  nn::MultiHeadAttention<T> attn_;
  nn::LayerNorm<T> norm2_;
  nn::Mlp2<T> ffn_;
};

}  // namespace detail

/// Set encoder. Padded slots are replaced by a learned null token before
/// attention and excluded from every softmax and from the pooled mean.
template <typename T>
class SetEncoder {
 public:
  SetEncoder(nn::ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng,
             const std::string& prefix = "encoder")
      : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg.d_model;
    embed_g_ = nn::Mlp2<T>(store, prefix + ".embed_g", kDescriptorDim, cfg.input_hidden(), d, rng);
    embed_m_ = nn::Mlp2<T>(store, prefix + ".embed_m", cfg.n_bins, cfg.input_hidden(), d, rng);
    null_token_ = store.add(prefix + ".null_token", {d});
    nn::init_fan_in(*null_token_, d, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      layers_.emplace_back(store, prefix + ".layer" + std::to_string(l), cfg, rng);
    final_norm_ = nn::LayerNorm<T>(store, prefix + ".final_norm", d);
    film_ = nn::Mlp2<T>(store, prefix + ".film", cfg.n_bins + d, d, 2 * cfg.n_bins, rng, true);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Token embedding MLP_g(g) + MLP_m(m) for a batch of rows.
  nn::Mat<T> embed(const nn::Mat<T>& g, const nn::Mat<T>& m) {
    return embed_g_.forward(g) + embed_m_.forward(m);
  }

  EncoderOutput<T> forward(const ObservationSet& obs) {
    if (obs.capacity != cfg_.capacity || obs.n_bins != cfg_.n_bins)
      throw InvalidArgument("observation set shape does not match encoder config");
    valid_.clear();
    for (std::size_t s = 0; s < obs.capacity; ++s)
      if (obs.mask[s]) valid_.push_back(s);
    if (valid_.empty()) throw InvalidArgument("encode_set: all observation slots are masked");
    const auto nv = static_cast<Eigen::Index>(valid_.size());
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto nf = static_cast<Eigen::Index>(cfg_.n_bins);

    nn::Mat<T> g(nv, static_cast<Eigen::Index>(kDescriptorDim)), m(nv, nf);
    for (Eigen::Index i = 0; i < nv; ++i) {
      for (std::size_t k = 0; k < kDescriptorDim; ++k) g(i, k) = static_cast<T>(obs.descriptor(valid_[i])[k]);
      for (Eigen::Index f = 0; f < nf; ++f) m(i, f) = static_cast<T>(obs.magnitude(valid_[i])[f]);
    }
    const nn::Mat<T> emb = embed(g, m);

    nn::Mat<T> x(static_cast<Eigen::Index>(cfg_.capacity), d);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      x.row(r) = Eigen::Map<const nn::RowVec<T>>(null_token_->value.data(), d);
    for (Eigen::Index i = 0; i < nv; ++i) x.row(valid_[i]) = emb.row(i);

    for (auto& layer : layers_) x = layer.forward(x, obs.mask);

    EncoderOutput<T> out;
    out.tokens = final_norm_.forward(x);
    out.mask = obs.mask;
    out.pooled = nn::RowVec<T>::Zero(d);
    for (Eigen::Index i = 0; i < nv; ++i) out.pooled += out.tokens.row(valid_[i]);
    out.pooled /= static_cast<T>(nv);

    nn::Mat<T> film_in(1, nf + d);
    film_in.leftCols(nf) = m.colwise().mean();
    film_in.rightCols(d) = out.pooled;
    const nn::Mat<T> raw = film_.forward(film_in);
    out.film_scale.resize(cfg_.n_bins);
    out.film_shift.resize(cfg_.n_bins);
    for (Eigen::Index f = 0; f < nf; ++f) {
      out.film_scale[f] = T(1) + raw(0, f);
      out.film_shift[f] = raw(0, nf + f);
    }
    return out;
  }

  /// Accumulates parameter gradients for the last forward call.
  void backward(const EncoderOutputGrad<T>& grad) {
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    const auto nf = static_cast<Eigen::Index>(cfg_.n_bins);
    const auto nv = static_cast<Eigen::Index>(valid_.size());

    nn::Mat<T> draw(1, 2 * nf);
    for (Eigen::Index f = 0; f < nf; ++f) {
      draw(0, f) = grad.film_scale[f];
      draw(0, nf + f) = grad.film_shift[f];
    }
    const nn::Mat<T> dfilm_in = film_.backward(draw);
    const nn::RowVec<T> dpooled = grad.pooled + dfilm_in.rightCols(d);

    nn::Mat<T> dtokens = grad.tokens;
    for (Eigen::Index i = 0; i < nv; ++i) dtokens.row(valid_[i]) += dpooled / static_cast<T>(nv);

    nn::Mat<T> dx = final_norm_.backward(dtokens);
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) dx = it->backward(dx);

    nn::Mat<T> demb(nv, d);
    std::vector<bool> is_valid(cfg_.capacity, false);
    for (Eigen::Index i = 0; i < nv; ++i) {
      demb.row(i) = dx.row(valid_[i]);
      is_valid[valid_[i]] = true;
    }
    auto dnull = Eigen::Map<nn::RowVec<T>>(null_token_->grad.data(), d);
    for (std::size_t s = 0; s < cfg_.capacity; ++s)
      if (!is_valid[s]) dnull += dx.row(static_cast<Eigen::Index>(s));
    embed_g_.backward(demb);
    embed_m_.backward(demb);
  }

 private:
  EncoderConfig cfg_;
  nn::Mlp2<T> embed_g_, embed_m_;
  nn::Param<T>* null_token_ = nullptr;
  std::vector<detail::TransformerLayer<T>> layers_;
  nn::LayerNorm<T> final_norm_;
  nn::Mlp2<T> film_;
  std::vector<std::size_t> valid_;
};

}  // namespace sfflow
