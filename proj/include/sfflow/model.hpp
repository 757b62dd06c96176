#pragma once

// Encoder + U-Net bundle, its configuration, and the checkpoint file format.
//
// Checkpoint layout (little-endian):
//   magic "SFFLOWCK" | u32 version | string meta_json | u64 n_params
//   per param: string name | u32 ndim | u64 dims[ndim] | f64 values[prod(dims)]
// Strings are u64 length + bytes. meta_json echoes the ModelConfig under
// "model" plus free-form run metadata.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "sfflow/dataset.hpp"
#include "sfflow/encoder.hpp"
#include "sfflow/unet.hpp"

namespace sfflow {

inline constexpr char kCheckpointMagic[8] = {'S', 'F', 'F', 'L', 'O', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ModelConfig {
  std::size_t n_bins = 64;
  std::size_t capacity = 50;
  std::size_t d_model = 512;
  std::size_t n_layers = 3;
  std::size_t n_heads = 8;
  std::size_t mlp_hidden = 0;  // 0 -> d_model
  std::size_t ffn_hidden = 0;  // 0 -> 4 * d_model
  std::vector<std::size_t> stage_channels{256, 512};
  std::size_t bottleneck_channels = 1024;
  std::size_t padded_extent = 16;
  std::size_t max_groups = 8;

  EncoderConfig encoder() const {
    return {d_model, n_layers, n_heads, mlp_hidden, ffn_hidden, n_bins, capacity};
  }

  UNetConfig unet() const {
    return {n_bins, stage_channels, bottleneck_channels, padded_extent, d_model, n_heads, max_groups};
  }

  void validate() const {
    encoder().validate();
    unet().validate();
  }

  bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_bins", c.n_bins},
          {"capacity", c.capacity},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"mlp_hidden", c.mlp_hidden},
          {"ffn_hidden", c.ffn_hidden},
          {"stage_channels", c.stage_channels},
          {"bottleneck_channels", c.bottleneck_channels},
          {"padded_extent", c.padded_extent},
          {"max_groups", c.max_groups}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_bins = j.at("n_bins").get<std::size_t>();
  c.capacity = j.at("capacity").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<std::size_t>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
  c.bottleneck_channels = j.at("bottleneck_channels").get<std::size_t>();
  c.padded_extent = j.at("padded_extent").get<std::size_t>();
  c.max_groups = j.at("max_groups").get<std::size_t>();
  return c;
}

/// Conditional vector-field model u(x_t, t | C): set encoder feeding a 3D U-Net.
template <typename T>
class FlowModel {
 public:
  explicit FlowModel(const ModelConfig& cfg, std::uint64_t init_seed = 0)
      : cfg_(cfg), store_(std::make_unique<nn::ParamStore<T>>()) {
    cfg_.validate();
    Rng rng(init_seed);
    encoder_ = std::make_unique<SetEncoder<T>>(*store_, cfg_.encoder(), rng);
    unet_ = std::make_unique<UNet3d<T>>(*store_, cfg_.unet(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return *store_; }
  const nn::ParamStore<T>& params() const { return *store_; }
  SetEncoder<T>& encoder() { return *encoder_; }
  UNet3d<T>& unet() { return *unet_; }

  /// Predicted vector field for x ([F x D*H*W]) at time t.
  nn::Mat<T> forward(const nn::Mat<T>& x, nn::Dims3 extent, double t, const ObservationSet& obs) {
    const EncoderOutput<T> enc = encoder_->forward(obs);
    return unet_->forward(x, extent, t, enc);
  }

  /// Accumulates parameter gradients for the last forward call.
  void backward(const nn::Mat<T>& dpred) { encoder_->backward(unet_->backward(dpred)); }

 private:
  ModelConfig cfg_;
  std::unique_ptr<nn::ParamStore<T>> store_;
  std::unique_ptr<SetEncoder<T>> encoder_;
  std::unique_ptr<UNet3d<T>> unet_;
};

// --- checkpoints ------------------------------------------------------------------

template <typename T>
void write_param_arrays(std::ostream& os, const nn::ParamStore<T>& store, bool gradients = false) {
  io::write_le<std::uint64_t>(os, store.params().size());
  for (const auto& p : store.params()) {
    io::write_string(os, p.name);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) io::write_le<std::uint64_t>(os, d);
    for (T v : gradients ? p.grad : p.value) io::write_le<double>(os, static_cast<double>(v));
  }
}

/// Reads arrays written by write_param_arrays into matching named parameters.
template <typename T>
void read_param_arrays(std::istream& is, nn::ParamStore<T>& store, bool gradients = false) {
  const auto n = io::read_le<std::uint64_t>(is);
  if (n != store.params().size())
    throw RuntimeError("checkpoint has " + std::to_string(n) + " arrays, model expects " +
                       std::to_string(store.params().size()));
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::string name = io::read_string(is);
    nn::Param<T>* p = store.find(name);
    if (!p) throw RuntimeError("checkpoint array '" + name + "' not present in model");
    const auto ndim = io::read_le<std::uint32_t>(is);
    std::vector<std::size_t> shape(ndim);
    for (auto& d : shape) d = io::read_le<std::uint64_t>(is);
    if (shape != p->shape) throw RuntimeError("checkpoint array '" + name + "' has wrong shape");
    auto& dst = gradients ? p->grad : p->value;
    for (auto& v : dst) v = static_cast<T>(io::read_le<double>(is));
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const FlowModel<T>& model,
                     nlohmann::json meta = nlohmann::json::object()) {
  meta["model"] = model_config_to_json(model.config());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeError("cannot write checkpoint " + tmp);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    io::write_le<std::uint32_t>(os, kCheckpointVersion);
    io::write_string(os, meta.dump());
    write_param_arrays(os, model.params());
    if (!os) throw RuntimeError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointHeader {
  ModelConfig model;
  nlohmann::json meta;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is, const std::string& label) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw RuntimeError(label + ": not a checkpoint file");
  if (io::read_le<std::uint32_t>(is) != kCheckpointVersion)
    throw RuntimeError(label + ": unsupported checkpoint version");
  CheckpointHeader h;
  h.meta = nlohmann::json::parse(io::read_string(is));
  h.model = model_config_from_json(h.meta.at("model"));
  return h;
}

/// Loads a checkpoint into a freshly constructed model of the recorded config.
template <typename T>
std::unique_ptr<FlowModel<T>> load_checkpoint(const std::filesystem::path& path,
                                              nlohmann::json* meta_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("missing checkpoint " + path.string());
  const CheckpointHeader h = read_checkpoint_header(is, path.string());
  auto model = std::make_unique<FlowModel<T>>(h.model);
  read_param_arrays(is, model->params());
  if (meta_out) *meta_out = h.meta;
  return model;
}

}  // namespace sfflow
