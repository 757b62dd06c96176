#pragma once

// 3D U-Net vector-field network conditioned on time, the pooled set context,
// and the encoder tokens.

#include <cmath>
#include <string>
#include <vector>

#include "sfflow/encoder.hpp"
#include "sfflow/nn/layers.hpp"

namespace sfflow {

struct UNetConfig {
  std::size_t in_channels = 64;  // frequency bins
  std::vector<std::size_t> stage_channels{256, 512};
  std::size_t bottleneck_channels = 1024;
  std::size_t padded_extent = 16;
  std::size_t d_model = 512;  // conditioning and time-embedding width
  std::size_t n_heads = 8;
  std::size_t max_groups = 8;

  std::size_t downsample_factor() const { return std::size_t{1} << stage_channels.size(); }

  void validate() const {
    if (stage_channels.empty()) throw InvalidArgument("unet config: need at least one stage");
    if (in_channels == 0 || bottleneck_channels == 0 || d_model == 0 || n_heads == 0)
      throw InvalidArgument("unet config: sizes must be positive");
    if (padded_extent == 0 || padded_extent % downsample_factor() != 0)
      throw InvalidArgument("unet config: padded_extent must be divisible by 2^stages");
    if (d_model % 2 != 0) throw InvalidArgument("unet config: d_model must be even");
    for (std::size_t c : stage_channels)
      if (c == 0 || c % n_heads != 0)
        throw InvalidArgument("unet config: stage channels must be positive multiples of n_heads");
    if (bottleneck_channels % n_heads != 0)
      throw InvalidArgument("unet config: bottleneck channels must be a multiple of n_heads");
  }

  bool operator==(const UNetConfig&) const = default;
};

inline constexpr double kTimeEmbeddingScale = 1000.0;

/// Sinusoidal features of t: dim/2 sines then dim/2 cosines at geometrically
/// spaced frequencies (periods from 2*pi to 2*pi*10^4 in units of 1000 t).
inline std::vector<double> sinusoidal_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw InvalidArgument("time embedding width must be even");
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    const double arg = kTimeEmbeddingScale * t * freq;
    e[k] = std::sin(arg);
    e[half + k] = std::cos(arg);
  }
  return e;
}

namespace detail {

/// GN -> (+ time and context biases) -> SiLU -> conv3 -> GN -> SiLU -> conv3, plus skip.
template <typename T>
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(nn::ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
           const UNetConfig& c, Rng& rng)
      : cin_(cin),
        cout_(cout),
        norm1_(store, name + ".norm1", cin, c.max_groups),
        time_proj_(store, name + ".time_proj", c.d_model, cin, rng),
        ctx_proj_(store, name + ".ctx_proj", c.d_model, cin, rng),
        conv1_(store, name + ".conv1", cin, cout, 3, 1, 1, rng),
        norm2_(store, name + ".norm2", cout, c.max_groups),
        conv2_(store, name + ".conv2", cout, cout, 3, 1, 1, rng) {
    if (cin != cout) skip_ = nn::Conv3d<T>(store, name + ".skip", cin, cout, 1, 1, 0, rng);
  }

  nn::Mat<T> forward(const nn::Mat<T>& x, nn::Dims3 dims, const nn::Mat<T>& temb, const nn::Mat<T>& ctx) {
    nn::Mat<T> h = norm1_.forward(x);
    const nn::Mat<T> bias = time_proj_.forward(temb) + ctx_proj_.forward(ctx);  // 1 x cin
    for (std::size_t c = 0; c < cin_; ++c) h.row(c).array() += bias(0, c);
    h = conv1_.forward(act1_.forward(h), dims);
    h = conv2_.forward(act2_.forward(norm2_.forward(h)), dims);
    if (cin_ != cout_) return skip_.forward(x, dims) + h;
    return x + h;
  }

  /// Returns dx; adds conditioning gradients into dtemb / dctx.
  nn::Mat<T> backward(const nn::Mat<T>& dy, nn::Mat<T>& dtemb, nn::Mat<T>& dctx) {
    nn::Mat<T> dh = norm2_.backward(act2_.backward(conv2_.backward(dy)));
    dh = act1_.backward(conv1_.backward(dh));
    nn::Mat<T> dbias(1, static_cast<Eigen::Index>(cin_));
    for (std::size_t c = 0; c < cin_; ++c) dbias(0, c) = dh.row(c).sum();
    dtemb += time_proj_.backward(dbias);
    dctx += ctx_proj_.backward(dbias);
    nn::Mat<T> dx = norm1_.backward(dh);
    if (cin_ != cout_) return dx + skip_.backward(dy);
    return dx + dy;
  }

 private:
  std::size_t cin_ = 0, cout_ = 0;
  nn::GroupNorm<T> norm1_;
  nn::Linear<T> time_proj_, ctx_proj_;
  nn::SiLU<T> act1_;
  nn::Conv3d<T> conv1_;
  nn::GroupNorm<T> norm2_;
  nn::SiLU<T> act2_;
  nn::Conv3d<T> conv2_;
  nn::Conv3d<T> skip_;
};

/// Spatial positions attend to the encoder tokens; residual.
template <typename T>
class CrossAttentionBlock {
 public:
  CrossAttentionBlock() = default;
  CrossAttentionBlock(nn::ParamStore<T>& store, const std::string& name, std::size_t channels,
                      const UNetConfig& c, Rng& rng)
      : norm_(store, name + ".norm", channels, c.max_groups),
        attn_(store, name + ".attn", channels, c.d_model, c.n_heads, rng) {}

  nn::MultiHeadAttention<T>& attention() { return attn_; }

  nn::Mat<T> forward(const nn::Mat<T>& x, const nn::Mat<T>& tokens, const std::vector<bool>& mask) {
    const nn::Mat<T> q = norm_.forward(x).transpose();
    return x + attn_.forward(q, tokens, mask).transpose();
  }

  nn::Mat<T> backward(const nn::Mat<T>& dy, nn::Mat<T>& dtokens) {
    auto [dq, dk] = attn_.backward(dy.transpose());
    dtokens += dk;
    return dy + norm_.backward(dq.transpose());
  }

 private:
  nn::GroupNorm<T> norm_;
  nn::MultiHeadAttention<T> attn_;
};

}  // namespace detail

/// The vector-field network u(x_t, t | C). Input and output are
/// [F x (D*H*W)] matrices over the unpadded grid.
template <typename T>
class UNet3d {
 public:
  UNet3d(nn::ParamStore<T>& store, const UNetConfig& cfg, Rng& rng, const std::string& prefix = "unet")
      : cfg_(cfg) {
    cfg_.validate();
    const auto& ch = cfg.stage_channels;
    const std::size_t n_stages = ch.size();
    time_mlp_ = nn::Mlp2<T>(store, prefix + ".time_mlp", cfg.d_model, cfg.d_model, cfg.d_model, rng);
    lift_ = nn::Conv3d<T>(store, prefix + ".lift", cfg.in_channels, ch[0], 3, 1, 1, rng);
    for (std::size_t i = 0; i < n_stages; ++i) {
      const std::string s = prefix + ".down" + std::to_string(i);
      enc_res_.emplace_back(store, s + ".res", i == 0 ? ch[0] : ch[i - 1], ch[i], cfg, rng);
      enc_attn_.emplace_back(store, s + ".xattn", ch[i], cfg, rng);
      down_.emplace_back(store, s + ".downsample", ch[i], ch[i], 2, 2, 0, rng);
    }
    mid_res_ = detail::ResBlock<T>(store, prefix + ".mid.res", ch.back(), cfg.bottleneck_channels, cfg, rng);
    mid_attn_ = detail::CrossAttentionBlock<T>(store, prefix + ".mid.xattn", cfg.bottleneck_channels, cfg, rng);
    for (std::size_t i = n_stages; i-- > 0;) {
      const std::string s = prefix + ".up" + std::to_string(i);
      const std::size_t from = (i + 1 == n_stages) ? cfg.bottleneck_channels : ch[i + 1];
      up_.emplace_back(store, s + ".upsample", from, ch[i], rng);
      dec_res_.emplace_back(store, s + ".res", 2 * ch[i], ch[i], cfg, rng);
      dec_attn_.emplace_back(store, s + ".xattn", ch[i], cfg, rng);
    }
    out_norm_ = nn::GroupNorm<T>(store, prefix + ".out_norm", ch[0], cfg.max_groups);
    out_conv_ = nn::Conv3d<T>(store, prefix + ".out", ch[0], cfg.in_channels, 1, 1, 0, rng, true);
  }

  const UNetConfig& config() const { return cfg_; }

  /// Every cross-attention block in forward order; exposed for ablations.
  std::vector<detail::CrossAttentionBlock<T>*> cross_attention_blocks() {
    std::vector<detail::CrossAttentionBlock<T>*> out;
    for (auto& b : enc_attn_) out.push_back(&b);
    out.push_back(&mid_attn_);
    for (auto& b : dec_attn_) out.push_back(&b);
    return out;
  }

  nn::Mat<T> forward(const nn::Mat<T>& x, nn::Dims3 extent, double t, const EncoderOutput<T>& enc) {
    if (static_cast<std::size_t>(x.rows()) != cfg_.in_channels ||
        static_cast<std::size_t>(x.cols()) != extent.size())
      throw InvalidArgument("unet_forward: input shape does not match config/extent");
    const std::size_t p = cfg_.padded_extent;
    if (extent.d > p || extent.h > p || extent.w > p)
      throw InvalidArgument("unet_forward: spatial extent exceeds padded_extent " + std::to_string(p));
    extent_ = extent;
    padded_ = {p, p, p};
    input_ = x;
    tokens_mask_ = enc.mask;

    nn::Mat<T> h = x;
    for (std::size_t f = 0; f < cfg_.in_channels; ++f)
      h.row(f) = (h.row(f).array() * enc.film_scale[f] + enc.film_shift[f]).matrix();
    h = nn::reflect_pad(h, extent, padded_);

    const auto sin_emb = sinusoidal_embedding(t, cfg_.d_model);
    nn::Mat<T> temb_in(1, static_cast<Eigen::Index>(cfg_.d_model));
    for (std::size_t k = 0; k < cfg_.d_model; ++k) temb_in(0, k) = static_cast<T>(sin_emb[k]);
    const nn::Mat<T> temb = time_mlp_.forward(temb_in);
    const nn::Mat<T> ctx = enc.pooled;

    nn::Dims3 dims = padded_;
    dims_.clear();
    h = lift_.forward(h, dims);
    std::vector<nn::Mat<T>> skips;
    for (std::size_t i = 0; i < enc_res_.size(); ++i) {
      dims_.push_back(dims);
      h = enc_res_[i].forward(h, dims, temb, ctx);
      h = enc_attn_[i].forward(h, enc.tokens, enc.mask);
      skips.push_back(h);
      h = down_[i].forward(h, dims);
      dims = down_[i].output_dims(dims);
    }
    h = mid_res_.forward(h, dims, temb, ctx);
    h = mid_attn_.forward(h, enc.tokens, enc.mask);
    for (std::size_t j = 0; j < up_.size(); ++j) {
      const std::size_t i = enc_res_.size() - 1 - j;
      h = up_[j].forward(h, dims);
      dims = dims_[i];
      nn::Mat<T> cat(h.rows() + skips[i].rows(), h.cols());
      cat << h, skips[i];
      h = dec_res_[j].forward(cat, dims, temb, ctx);
      h = dec_attn_[j].forward(h, enc.tokens, enc.mask);
    }
    h = out_conv_.forward(out_act_.forward(out_norm_.forward(h)), dims);
    return nn::crop(h, padded_, extent);
  }

  /// Accumulates parameter gradients and returns the gradient with respect to
  /// the encoder outputs consumed in the last forward call.
  EncoderOutputGrad<T> backward(const nn::Mat<T>& dy) {
    const auto d = static_cast<Eigen::Index>(cfg_.d_model);
    nn::Mat<T> dtemb = nn::Mat<T>::Zero(1, d);
    nn::Mat<T> dctx = nn::Mat<T>::Zero(1, d);
    nn::Mat<T> dtokens = nn::Mat<T>::Zero(static_cast<Eigen::Index>(tokens_mask_.size()), d);

    nn::Mat<T> dh = nn::crop_backward(dy, padded_, extent_);
    dh = out_norm_.backward(out_act_.backward(out_conv_.backward(dh)));
    std::vector<nn::Mat<T>> dskips(enc_res_.size());
    for (std::size_t j = up_.size(); j-- > 0;) {
      const std::size_t i = enc_res_.size() - 1 - j;
      dh = dec_attn_[j].backward(dh, dtokens);
      const nn::Mat<T> dcat = dec_res_[j].backward(dh, dtemb, dctx);
      const auto half = static_cast<Eigen::Index>(cfg_.stage_channels[i]);
      dskips[i] = dcat.bottomRows(dcat.rows() - half);
      dh = up_[j].backward(dcat.topRows(half));
    }
    dh = mid_attn_.backward(dh, dtokens);
    dh = mid_res_.backward(dh, dtemb, dctx);
    for (std::size_t i = enc_res_.size(); i-- > 0;) {
      dh = down_[i].backward(dh) + dskips[i];
      dh = enc_attn_[i].backward(dh, dtokens);
      dh = enc_res_[i].backward(dh, dtemb, dctx);
    }
    dh = lift_.backward(dh);
    time_mlp_.backward(dtemb);
    const nn::Mat<T> dfilm_out = nn::reflect_pad_backward(dh, extent_, padded_);

    EncoderOutputGrad<T> g;
    g.tokens = std::move(dtokens);
    g.pooled = dctx;
    g.film_scale.resize(cfg_.in_channels);
    g.film_shift.resize(cfg_.in_channels);
    for (std::size_t f = 0; f < cfg_.in_channels; ++f) {
      g.film_scale[f] = dfilm_out.row(f).dot(input_.row(f));
      g.film_shift[f] = dfilm_out.row(f).sum();
    }
    return g;
  }

 private:
  UNetConfig cfg_;
  nn::Mlp2<T> time_mlp_;
  nn::Conv3d<T> lift_;
  std::vector<detail::ResBlock<T>> enc_res_;
  std::vector<detail::CrossAttentionBlock<T>> enc_attn_;
  std::vector<nn::Conv3d<T>> down_;
  detail::ResBlock<T> mid_res_;
  detail::CrossAttentionBlock<T> mid_attn_;
  std::vector<nn::ConvTranspose3d<T>> up_;
  std::vector<detail::ResBlock<T>> dec_res_;
  std::vector<detail::CrossAttentionBlock<T>> dec_attn_;
  nn::GroupNorm<T> out_norm_;
  nn::SiLU<T> out_act_;
  nn::Conv3d<T> out_conv_;

  nn::Dims3 extent_, padded_;
  std::vector<nn::Dims3> dims_;
  nn::Mat<T> input_;
  std::vector<bool> tokens_mask_;
};

}  // namespace sfflow
