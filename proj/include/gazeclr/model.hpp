#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gazeclr/embedding.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/geometry.hpp"
#include "gazeclr/image.hpp"
#include "gazeclr/json_util.hpp"
#include "gazeclr/nn/layers.hpp"
#include "gazeclr/nn/mlp.hpp"

namespace gazeclr {

struct EncoderConfig {
  std::string architecture = "tinycnn";  // "tinycnn" | "resnet18"
  int feature_dim = 64;
  int input_size = 64;
  /// tinycnn only: channels of the first two stride-2 convolutions (the third emits feature_dim).
  std::vector<int> widths{16, 32};
  /// tinycnn only: append normalized x/y coordinate planes to the input.
  bool coord_channels = true;
  /// tinycnn only: batch normalization after each convolution (the convolutions then have no bias).
  bool batch_norm = true;
  /// Encoders are always trained from scratch.
  bool from_scratch = true;

  void validate() const {
    if (architecture != "tinycnn" && architecture != "resnet18") {
      throw ConfigError("model.encoder.architecture", "unknown architecture '" + architecture + "'");
    }
    if (feature_dim <= 0) throw ConfigError("model.encoder.feature_dim", "must be positive");
    if (architecture == "resnet18" && feature_dim != 512) {
      throw ConfigError("model.encoder.feature_dim", "resnet18 produces 512 features");
    }
    if (input_size != 64 && input_size != 128) throw ConfigError("model.encoder.input_size", "must be 64 or 128");
    if (architecture == "tinycnn" &&
        (widths.size() != 2 || std::any_of(widths.begin(), widths.end(), [](int w) { return w <= 0; }))) {
      throw ConfigError("model.encoder.widths", "tinycnn needs two positive widths");
    }
    if (!from_scratch) throw ConfigError("model.encoder.from_scratch", "only from-scratch training is supported");
  }

  bool operator==(const EncoderConfig&) const = default;
};

struct ProjectionHeadConfig {
  int hidden_dim = 512;
  int out_dim = 180;
  /// Batch normalization on the hidden layer (Linear-BN-ReLU-Linear).
  bool batch_norm = true;

  void validate() const {
    if (hidden_dim <= 0) throw ConfigError("model.heads.hidden_dim", "must be positive");
    equivariant_width(out_dim);
  }
  bool operator==(const ProjectionHeadConfig&) const = default;
};

struct RegressorConfig {
  int hidden_dim = 128;

  void validate() const {
    if (hidden_dim <= 0) throw ConfigError("model.regressor.hidden_dim", "must be positive");
  }
  bool operator==(const RegressorConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  ProjectionHeadConfig heads;
  RegressorConfig regressor;

  void validate() const {
    encoder.validate();
    heads.validate();
    regressor.validate();
  }
  bool operator==(const ModelConfig&) const = default;
};

inline Json to_json(const ModelConfig& c) {
  Json enc = {{"architecture", c.encoder.architecture},
              {"feature_dim", c.encoder.feature_dim},
              {"input_size", c.encoder.input_size},
              {"widths", c.encoder.widths},
              {"coord_channels", c.encoder.coord_channels},
              {"batch_norm", c.encoder.batch_norm},
              {"from_scratch", c.encoder.from_scratch}};
  return {{"encoder", enc},
          {"heads",
           {{"hidden_dim", c.heads.hidden_dim}, {"out_dim", c.heads.out_dim}, {"batch_norm", c.heads.batch_norm}}},
          {"regressor", {{"hidden_dim", c.regressor.hidden_dim}}}};
}

inline void read_model_config(ObjectReader r, ModelConfig& c) {
  ObjectReader enc = r.child("encoder");
  enc.read("architecture", c.encoder.architecture);
  enc.read("feature_dim", c.encoder.feature_dim);
  enc.read("input_size", c.encoder.input_size);
  enc.read("widths", c.encoder.widths);
  enc.read("coord_channels", c.encoder.coord_channels);
  enc.read("batch_norm", c.encoder.batch_norm);
  enc.read("from_scratch", c.encoder.from_scratch);
  enc.finish();
  ObjectReader heads = r.child("heads");
  heads.read("hidden_dim", c.heads.hidden_dim);
  heads.read("out_dim", c.heads.out_dim);
  heads.read("batch_norm", c.heads.batch_norm);
  heads.finish();
  ObjectReader reg = r.child("regressor");
  reg.read("hidden_dim", c.regressor.hidden_dim);
  reg.finish();
  r.finish();
}

/// Images (H x W x 3 in [0, 1]) to a C x N x H x W tensor scaled to [-1, 1].
template <typename T>
nn::Tensor<T> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) return nn::Tensor<T>(3, 0, 0, 0);
  const int h = images[0].height, w = images[0].width;
  nn::Tensor<T> t(3, static_cast<int>(images.size()), h, w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = images[n];
    if (img.height != h || img.width != w) throw ShapeError("images in a batch must share one size");
    for (int c = 0; c < 3; ++c) {
      T* dst = t.data.data() + c * t.channel_stride() + n * t.plane();
      for (std::size_t p = 0; p < img.pixels(); ++p) dst[p] = T(2) * static_cast<T>(img.data[3 * p + c]) - T(1);
    }
  }
  return t;
}

/// Convolutional encoder followed by global average pooling.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg.validate();
    using namespace nn;
    if (cfg.architecture == "tinycnn") {
      int in = 3;
      if (cfg.coord_channels) {
        body_.add(std::make_unique<AddCoords<T>>());
        in += 2;
      }
      const std::vector<int> outs{cfg.widths[0], cfg.widths[1], cfg.feature_dim};
      for (std::size_t i = 0; i < outs.size(); ++i) {
        const std::string id = std::to_string(i + 1);
        auto& conv = body_.add(
            std::make_unique<Conv2d<T>>("encoder.conv" + id, in, outs[i], 3, 2, 1, !cfg.batch_norm, rng));
        if (i == 0) conv.set_input_grad(false);
        if (cfg.batch_norm) body_.add(std::make_unique<BatchNorm2d<T>>("encoder.bn" + id, outs[i]));
        if (!cfg.batch_norm || i + 1 < outs.size()) body_.add(std::make_unique<ReLU<T>>());
        in = outs[i];
      }
    } else {
      auto& conv = body_.add(std::make_unique<Conv2d<T>>("encoder.conv1", 3, 64, 7, 2, 3, false, rng));
      conv.set_input_grad(false);
      body_.add(std::make_unique<BatchNorm2d<T>>("encoder.bn1", 64));
      body_.add(std::make_unique<ReLU<T>>());
      body_.add(std::make_unique<MaxPool2d<T>>(3, 2, 1));
      int in = 64;
      const int widths[4] = {64, 128, 256, 512};
      for (int stage = 0; stage < 4; ++stage) {
        for (int b = 0; b < 2; ++b) {
          const std::string name = "encoder.layer" + std::to_string(stage + 1) + "." + std::to_string(b);
          const int stride = (stage > 0 && b == 0) ? 2 : 1;
          body_.add(std::make_unique<BasicBlock<T>>(name, in, widths[stage], stride, rng));
          in = widths[stage];
        }
      }
    }
  }

  const EncoderConfig& config() const noexcept { return cfg_; }
  int feature_dim() const noexcept { return cfg_.feature_dim; }

  RowMatrix<T> forward(const nn::Tensor<T>& x, bool train) {
    if (x.batch == 0) return RowMatrix<T>(0, cfg_.feature_dim);
    if (x.height != cfg_.input_size || x.width != cfg_.input_size || x.channels != 3) {
      throw ShapeError("encoder expects 3x" + std::to_string(cfg_.input_size) + "x" + std::to_string(cfg_.input_size) +
                       " images, got " + std::to_string(x.channels) + "x" + std::to_string(x.height) + "x" +
                       std::to_string(x.width));
    }
    nn::Tensor<T> h = body_.forward(x, train);
    out_h_ = h.height;
    out_w_ = h.width;
    return nn::global_average_pool(h);
  }

  /// Accumulates parameter gradients for the last training-mode forward pass.
  void backward(const RowMatrix<T>& grad_features) {
    body_.backward(nn::global_average_pool_backward(grad_features, out_h_, out_w_));
  }

  void release() { body_.release(); }
  void collect(nn::ParameterList<T>& out) { body_.collect(out); }

 private:
  EncoderConfig cfg_;
  nn::Sequential<T> body_;
  int out_h_ = 0, out_w_ = 0;
};

enum class Stage { pretrain, finetune };

inline std::string to_string(Stage s) { return s == Stage::pretrain ? "pretrain" : "finetune"; }

inline Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "finetune") return Stage::finetune;
  throw IncompatibleCheckpointError("unknown model stage '" + s + "'");
}

/// Encoder with either the two projection heads (Stage I) or the gaze
/// regressor (Stage II) attached.
template <typename T>
class GazeModel {
 public:
  GazeModel(const ModelConfig& cfg, std::uint64_t seed, Stage stage = Stage::pretrain) : cfg_(cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    encoder_ = Encoder<T>(cfg.encoder, rng);
    if (stage == Stage::pretrain) {
      const std::vector<int> dims{cfg.encoder.feature_dim, cfg.heads.hidden_dim, cfg.heads.out_dim};
      p1_.emplace("p1", dims, rng, cfg.heads.batch_norm);
      p2_.emplace("p2", dims, rng, cfg.heads.batch_norm);
    } else {
      attach_regressor(rng());
    }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  Stage stage() const noexcept { return regressor_ ? Stage::finetune : Stage::pretrain; }

  /// Drops both projection heads and attaches a freshly initialized regressor.
  void attach_regressor(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    p1_.reset();
    p2_.reset();
    regressor_.emplace("regressor", std::vector<int>{cfg_.encoder.feature_dim, cfg_.regressor.hidden_dim, 2}, rng);
  }

  /// Top-level modules present in the graph.
  std::vector<std::string> module_names() const {
    std::vector<std::string> out{"encoder"};
    if (p1_) out.push_back("p1");
    if (p2_) out.push_back("p2");
    if (regressor_) out.push_back("regressor");
    return out;
  }

  Encoder<T>& encoder() { return encoder_; }
  nn::Mlp<T>& p1() { return require(p1_, "p1"); }
  nn::Mlp<T>& p2() { return require(p2_, "p2"); }
  nn::Mlp<T>& regressor() { return require(regressor_, "regressor"); }

  /// Evaluation-mode features, computed in chunks.
  RowMatrix<T> encode(std::span<const Image> images, std::size_t chunk = 256) {
    RowMatrix<T> out(static_cast<Eigen::Index>(images.size()), cfg_.encoder.feature_dim);
    for (std::size_t i = 0; i < images.size(); i += chunk) {
      const std::size_t n = std::min(chunk, images.size() - i);
      out.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) =
          encoder_.forward(images_to_tensor<T>(images.subspan(i, n)), false);
    }
    return out;
  }

  RowMatrix<T> project_invariant(const RowMatrix<T>& features) { return p1().forward(features, false); }

  /// N x 3d' (row-major flattened 3 x d' blocks; view with as_block).
  RowMatrix<T> project_equivariant(const RowMatrix<T>& features) { return p2().forward(features, false); }

  /// N x 2 (pitch, yaw) in radians.
  RowMatrix<T> regress_pitch_yaw(const RowMatrix<T>& features) { return regressor().forward(features, false); }

  std::vector<GazeDirection> regress_gaze(const RowMatrix<T>& features) {
    const RowMatrix<T> py = regress_pitch_yaw(features);
    std::vector<GazeDirection> out;
    for (Eigen::Index i = 0; i < py.rows(); ++i) {
      out.push_back(pitch_yaw_to_vector(static_cast<double>(py(i, 0)), static_cast<double>(py(i, 1))));
    }
    return out;
  }

  nn::ParameterList<T> encoder_parameters() {
    nn::ParameterList<T> out;
    encoder_.collect(out);
    return out;
  }

  nn::ParameterList<T> head_parameters() {
    nn::ParameterList<T> out;
    if (p1_) p1_->collect(out);
    if (p2_) p2_->collect(out);
    if (regressor_) regressor_->collect(out);
    return out;
  }

  /// Encoder parameters first, then heads; buffers included.
  nn::ParameterList<T> parameters() {
    nn::ParameterList<T> out = encoder_parameters();
    for (auto* p : head_parameters()) out.push_back(p);
    return out;
  }

 private:
  template <typename M>
  static M& require(std::optional<M>& m, const char* name) {
    if (!m) throw InvalidArgument(std::string("module '") + name + "' is not attached");
    return *m;
  }

  ModelConfig cfg_;
  Encoder<T> encoder_;
  std::optional<nn::Mlp<T>> p1_, p2_, regressor_;
};

// ---------------------------------------------------------------- checkpoints

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointInfo {
  long step = 0;
  Json config = Json::object();  // run configuration snapshot
};

namespace detail {

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::filesystem::path checkpoint_base(std::filesystem::path p) {
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  return p;
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

/// Writes `<path>.bin` (raw float32 parameters and buffers) and `<path>.json`.
inline void save_checkpoint(GazeModel<float>& model, const std::filesystem::path& path, const CheckpointInfo& info) {
  const auto base = detail::checkpoint_base(path);
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  std::vector<float> blob;
  Json params = Json::array();
  for (auto* p : model.parameters()) {
    blob.insert(blob.end(), p->value.data(), p->value.data() + p->value.size());
    params.push_back({{"name", p->name}, {"shape", p->shape}});
  }
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  const std::size_t nbytes = blob.size() * sizeof(float);
  const auto bin = std::filesystem::path(base.string() + ".bin");
  {
    std::ofstream out(bin, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
    if (!out) throw CheckpointError("cannot write '" + bin.string() + "'");
  }
  Json side = {{"format_version", kCheckpointFormatVersion},
               {"stage", to_string(model.stage())},
               {"model", to_json(model.config())},
               {"step", info.step},
               {"config", info.config},
               {"blob", {{"file", bin.filename().string()}, {"bytes", nbytes}, {"fnv1a64", detail::hex64(detail::fnv1a64(bytes, nbytes))}}},
               {"parameters", params}};
  std::ofstream out(base.string() + ".json");
  out << side.dump(2) << "\n";
  if (!out) throw CheckpointError("cannot write '" + base.string() + ".json'");
}

struct LoadedCheckpoint {
  GazeModel<float> model;
  CheckpointInfo info;
};

/// Loads a checkpoint; with `expected`, the stored model config must equal it.
inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  const auto base = detail::checkpoint_base(path);
  std::ifstream side_in(base.string() + ".json");
  if (!side_in) throw CheckpointError("cannot open checkpoint sidecar '" + base.string() + ".json'");
  Json side;
  try {
    side = Json::parse(side_in);
  } catch (const Json::exception& e) {
    throw IntegrityError("checkpoint sidecar is not valid JSON: " + std::string(e.what()));
  }
  if (!side.contains("format_version") || side["format_version"] != kCheckpointFormatVersion) {
    throw IncompatibleCheckpointError("checkpoint format version " +
                                      (side.contains("format_version") ? side["format_version"].dump() : "<missing>") +
                                      " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }
  ModelConfig cfg;
  try {
    read_model_config(ObjectReader(side.at("model"), "model"), cfg);
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IncompatibleCheckpointError(std::string("checkpoint model config: ") + e.what());
  }
  if (expected && !(cfg == *expected)) {
    throw IncompatibleCheckpointError("checkpoint model config " + to_json(cfg).dump() + " does not match expected " +
                                      to_json(*expected).dump());
  }
  LoadedCheckpoint out{GazeModel<float>(cfg, 0, stage_from_string(side.value("stage", std::string("pretrain")))), {}};
  out.info.step = side.value("step", 0L);
  out.info.config = side.value("config", Json::object());

  auto params = out.model.parameters();
  const Json& listed = side.at("parameters");
  if (listed.size() != params.size()) throw IncompatibleCheckpointError("checkpoint parameter count differs from model");
  std::size_t count = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (listed[i].at("name") != params[i]->name || listed[i].at("shape").get<std::vector<int>>() != params[i]->shape) {
      throw IncompatibleCheckpointError("checkpoint parameter '" + listed[i].at("name").get<std::string>() +
                                        "' does not match model parameter '" + params[i]->name + "'");
    }
    count += static_cast<std::size_t>(params[i]->size());
  }

  const auto bin = base.parent_path() / side.at("blob").at("file").get<std::string>();
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw IntegrityError("checkpoint blob '" + bin.string() + "' is missing");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t expected_bytes = count * sizeof(float);
  if (raw.size() != expected_bytes || side["blob"].value("bytes", std::size_t{0}) != expected_bytes) {
    throw IntegrityError("checkpoint blob has " + std::to_string(raw.size()) + " bytes, expected " +
                         std::to_string(expected_bytes));
  }
  const auto checksum = detail::hex64(detail::fnv1a64(reinterpret_cast<const unsigned char*>(raw.data()), raw.size()));
  if (checksum != side["blob"].value("fnv1a64", std::string())) throw IntegrityError("checkpoint blob checksum mismatch");
  std::size_t offset = 0;
  for (auto* p : params) {
    const std::size_t n = static_cast<std::size_t>(p->size()) * sizeof(float);
    std::memcpy(p->value.data(), raw.data() + offset, n);
    offset += n;
  }
  return out;
}

}  // namespace gazeclr
