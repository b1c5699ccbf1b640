#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gazeclr/augment.hpp"
#include "gazeclr/data.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/losses.hpp"
#include "gazeclr/model.hpp"
#include "gazeclr/nn/optim.hpp"

namespace gazeclr {

using nn::cosine_lr;

enum class Variant { equiv, inv_equiv };

inline std::string to_string(Variant v) { return v == Variant::equiv ? "equiv" : "inv+equiv"; }

inline Variant variant_from_string(const std::string& s) {
  if (s == "equiv") return Variant::equiv;
  if (s == "inv+equiv") return Variant::inv_equiv;
  throw ConfigError("train.variant", "unknown variant '" + s + "' (expected equiv or inv+equiv)");
}

struct TrainConfig {
  Variant variant = Variant::equiv;
  long iterations = 50000;
  int batch_size = 128;
  /// Micro-batches per optimizer step; the loss is always taken over the full batch.
  int accumulation_steps = 1;
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double tau = 0.1;
  std::uint64_t seed = 0;
  bool multi_participant_batches = false;
  double divergence_threshold = 1e4;
  AugmentationConfig augmentation;

  LossConfig loss() const {
    LossConfig c;
    c.tau = tau;
    c.include_invariance = variant == Variant::inv_equiv;
    c.include_equivariance = true;
    return c;
  }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr", "learning rate must be positive");
    if (iterations < 0) throw ConfigError("train.iterations", "must be non-negative");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be at least 1");
    if (accumulation_steps < 1) throw ConfigError("train.accumulation_steps", "must be at least 1");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train.momentum", "must lie in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay", "must be non-negative");
    if (!(divergence_threshold > 0.0)) throw ConfigError("train.divergence_threshold", "must be positive");
    loss().validate();
    augmentation.validate();
  }
};

struct TraceRecord {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct PretrainHooks {
  /// Called after every optimizer step.
  std::function<void(const TraceRecord&)> on_step;
  /// Called every `checkpoint_every` steps (> 0) with the number of completed steps.
  std::function<void(long)> on_checkpoint;
  long checkpoint_every = 0;
};

struct PretrainResult {
  std::vector<TraceRecord> trace;
  /// Pipeline instrumentation.
  std::size_t single_view_pairs = 0;
  std::size_t multi_view_pairs = 0;
  BatchStreamSummary stream;
};

namespace detail {

/// Images of one contrastive batch in encoder order plus what the loss needs.
struct ContrastiveBatch {
  std::vector<Image> images;  // [a-set: view-major B*V][a'-set: B*V, Inv+Equiv only]
  ViewRotations rotations;    // [view][b]
  std::size_t views = 0;
  std::size_t batch = 0;
};

inline ContrastiveBatch build_contrastive_batch(const DatasetManifest& m, ImageStore& store,
                                                const std::vector<std::size_t>& groups, const TrainConfig& cfg,
                                                int input_size, Rng& rng, PretrainResult& counters) {
  ContrastiveBatch cb;
  cb.views = m.views.size();
  cb.batch = groups.size();
  cb.rotations.assign(cb.views, std::vector<RotationMatrix>(cb.batch));
  const bool inv = cfg.variant == Variant::inv_equiv;
  cb.images.resize(cb.views * cb.batch * (inv ? 2 : 1));
  for (std::size_t b = 0; b < groups.size(); ++b) {
    const MultiViewSample s = load_sample(m, m.groups[groups[b]], store, input_size);
    if (inv) {
      auto pairs = make_single_view_pairs(s, cfg.augmentation, rng);
      counters.single_view_pairs += pairs.size();
      for (std::size_t v = 0; v < cb.views; ++v) {
        cb.images[v * cb.batch + b] = std::move(pairs[v].first);
        cb.images[cb.views * cb.batch + v * cb.batch + b] = std::move(pairs[v].second);
      }
    } else {
      for (std::size_t v = 0; v < cb.views; ++v) cb.images[v * cb.batch + b] = augment(s.views[v].image, cfg.augmentation, rng);
    }
    for (std::size_t v = 0; v < cb.views; ++v) cb.rotations[v][b] = s.views[v].effective_rotation;
    // Every ordered view pair of the group enters the equivariance term.
    counters.multi_view_pairs += cb.views * (cb.views - 1);
  }
  return cb;
}

template <typename T>
RowMatrix<double> to_double(const RowMatrix<T>& m) {
  return m.template cast<double>();
}

}  // namespace detail

/// One optimizer step worth of forward/backward on a prepared batch.
/// Gradients are accumulated into the model parameters (zeroed first).
inline double contrastive_forward_backward(GazeModel<float>& model, const detail::ContrastiveBatch& cb,
                                           const TrainConfig& cfg) {
  const bool inv = cfg.variant == Variant::inv_equiv;
  const std::size_t n_images = cb.images.size();
  const std::size_t bv = cb.views * cb.batch;
  auto params = model.parameters();
  nn::zero_grads(params);

  // Encoder features for all images. With micro-batching, the first pass keeps
  // no activations; each chunk is recomputed in the backward pass.
  const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(cfg.accumulation_steps), n_images);
  const std::size_t chunk_size = (n_images + chunks - 1) / chunks;
  const std::span<const Image> all(cb.images);
  RowMatrix<float> features(static_cast<Eigen::Index>(n_images), model.config().encoder.feature_dim);
  auto& enc = model.encoder();
  if (chunks == 1) {
    features = enc.forward(images_to_tensor<float>(all), true);
  } else {
    for (std::size_t c0 = 0; c0 < n_images; c0 += chunk_size) {
      const std::size_t n = std::min(chunk_size, n_images - c0);
      features.middleRows(static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(n)) =
          enc.forward(images_to_tensor<float>(all.subspan(c0, n)), true);
      enc.release();
    }
  }

  const auto B = static_cast<Eigen::Index>(cb.batch);
  const RowMatrix<float> feats_a = features.topRows(static_cast<Eigen::Index>(bv));
  EmbeddingBatch<double> eb;
  RowMatrix<float> zz;  // p1 output over [a-set; a'-set]
  if (inv) zz = model.p1().forward(features, true);
  const RowMatrix<float> zh = model.p2().forward(feats_a, true);
  if (!zh.allFinite() || (inv && !zz.allFinite())) return std::numeric_limits<double>::quiet_NaN();
  for (std::size_t v = 0; v < cb.views; ++v) {
    const auto row = static_cast<Eigen::Index>(v) * B;
    eb.z_hat.push_back(detail::to_double<float>(zh.middleRows(row, B)));
    if (inv) {
      eb.z.push_back(detail::to_double<float>(zz.middleRows(row, B)));
      eb.z_prime.push_back(detail::to_double<float>(zz.middleRows(static_cast<Eigen::Index>(bv) + row, B)));
    }
  }
  const OverallLossResult<double> res = overall_loss_with_gradients(eb, cb.rotations, cfg.loss());
  if (!std::isfinite(res.loss)) return res.loss;

  RowMatrix<float> d_zh(zh.rows(), zh.cols());
  RowMatrix<float> d_zz;
  if (inv) d_zz.resize(zz.rows(), zz.cols());
  for (std::size_t v = 0; v < cb.views; ++v) {
    const auto row = static_cast<Eigen::Index>(v) * B;
    d_zh.middleRows(row, B) = res.grad_z_hat[v].cast<float>();
    if (inv) {
      d_zz.middleRows(row, B) = res.grad_z[v].cast<float>();
      d_zz.middleRows(static_cast<Eigen::Index>(bv) + row, B) = res.grad_z_prime[v].cast<float>();
    }
  }
  RowMatrix<float> d_features = RowMatrix<float>::Zero(features.rows(), features.cols());
  d_features.topRows(static_cast<Eigen::Index>(bv)) = model.p2().backward(d_zh);
  if (inv) d_features += model.p1().backward(d_zz);

  if (chunks == 1) {
    enc.backward(d_features);
  } else {
    for (std::size_t c0 = 0; c0 < n_images; c0 += chunk_size) {
      const std::size_t n = std::min(chunk_size, n_images - c0);
      enc.forward(images_to_tensor<float>(all.subspan(c0, n)), true);
      enc.backward(d_features.middleRows(static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(n)));
    }
  }
  return res.loss;
}

/// Stage I: contrastive pre-training of encoder and projection heads.
inline PretrainResult pretrain(const DatasetManifest& m, ImageStore& store, GazeModel<float>& model,
                               const TrainConfig& cfg, const PretrainHooks& hooks = {}) {
  cfg.validate();
  if (model.stage() != Stage::pretrain) throw InvalidArgument("pretrain needs a model with projection heads");
  if (m.views.size() < 2) {
    throw InsufficientViewsError("equivariance pre-training needs at least 2 views, manifest has " +
                                 std::to_string(m.views.size()));
  }
  PretrainResult result;
  if (cfg.iterations == 0) return result;

  BatchStream stream(m, static_cast<std::size_t>(cfg.batch_size), cfg.seed, cfg.multi_participant_batches);
  result.stream = stream.summary();
  if (stream.empty()) {
    throw EmptyBatchError("no participant has " + std::to_string(cfg.batch_size) + " timestamp groups (" +
                          std::to_string(result.stream.skipped_participants) + " skipped)");
  }
  nn::Sgd<float> opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  Rng aug_rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFULL);
  const int input_size = model.config().encoder.input_size;

  for (long step = 0; step < cfg.iterations; ++step) {
    const auto groups = stream.next();
    const auto cb = detail::build_contrastive_batch(m, store, groups, cfg, input_size, aug_rng, result);
    const double loss = contrastive_forward_backward(model, cb, cfg);
    const double lr = cosine_lr(step, cfg.iterations, cfg.lr);
    if (!std::isfinite(loss) || loss > cfg.divergence_threshold) {
      throw DivergenceError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) +
                                ", lr " + std::to_string(lr) + ")",
                            step, loss);
    }
    opt.step(lr);
    const TraceRecord rec{step, loss, lr};
    result.trace.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);
    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && (step + 1) % hooks.checkpoint_every == 0 &&
        step + 1 < cfg.iterations) {
      hooks.on_checkpoint(step + 1);
    }
  }
  return result;
}

// ------------------------------------------------------------------ Stage II

struct FinetuneConfig {
  std::string mode = "frozen";  // "frozen" | "full"
  int epochs = 30;
  int batch_size = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  bool frozen() const { return mode == "frozen"; }

  void validate() const {
    if (mode != "frozen" && mode != "full") throw ConfigError("finetune.mode", "must be 'frozen' or 'full'");
    if (epochs < 0) throw ConfigError("finetune.epochs", "must be non-negative");
    if (batch_size < 1) throw ConfigError("finetune.batch_size", "must be at least 1");
    if (!(lr > 0.0)) throw ConfigError("finetune.lr", "learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("finetune.momentum", "must lie in [0, 1)");
  }
};

/// One camera frame of a manifest group.
struct FrameRef {
  std::size_t group = 0;
  std::size_t view = 0;
};

/// Every frame (all views) of the given participants (empty = all), in manifest order.
inline std::vector<FrameRef> frames_of(const DatasetManifest& m, const std::vector<std::string>& participants = {}) {
  std::vector<FrameRef> out;
  for (std::size_t g = 0; g < m.groups.size(); ++g) {
    if (!participants.empty() &&
        std::find(participants.begin(), participants.end(), m.groups[g].participant) == participants.end()) {
      continue;
    }
    for (std::size_t v = 0; v < m.views.size(); ++v) out.push_back({g, v});
  }
  return out;
}

inline std::vector<Vec3> frame_labels(const DatasetManifest& m, std::span<const FrameRef> frames) {
  std::vector<Vec3> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    const auto& r = m.record(m.groups[f.group], f.view);
    if (!r.gaze) {
      throw MissingLabelError("frame '" + r.image_path + "' has no gaze label");
    }
    out.push_back(r.gaze->normalized());
  }
  return out;
}

inline std::vector<Image> frame_images(const DatasetManifest& m, ImageStore& store, std::span<const FrameRef> frames) {
  std::vector<Image> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(store.get(m.record(m.groups[f.group], f.view).image_path));
  return out;
}

/// Evaluation-mode features for frames, streamed in chunks.
inline RowMatrix<float> encode_frames(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                                      std::span<const FrameRef> frames, std::size_t chunk = 256) {
  RowMatrix<float> out(static_cast<Eigen::Index>(frames.size()), model.config().encoder.feature_dim);
  for (std::size_t i = 0; i < frames.size(); i += chunk) {
    const std::size_t n = std::min(chunk, frames.size() - i);
    const auto images = frame_images(m, store, frames.subspan(i, n));
    out.middleRows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(n)) = model.encode(images);
  }
  return out;
}

/// Mean angular error (degrees) of pitch/yaw predictions.
inline double mean_angular_error(const RowMatrix<float>& pitch_yaw, std::span<const Vec3> targets) {
  if (targets.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    total += angular_error_deg(targets[i], pitch_yaw_to_vector(pitch_yaw(r, 0), pitch_yaw(r, 1)).vector());
  }
  return total / static_cast<double>(targets.size());
}

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;  // mean training angular error, degrees
  double lr = 0.0;
  std::optional<double> val_mae;
};

/// Optional per-subject additive pitch/yaw offsets learned with the regressor.
struct SubjectBias {
  std::vector<int> subject;  // per training sample, index into the table
  nn::Parameter<float> table;
};

/// Source of regressor inputs for a batch of sample indices.
struct FeatureSource {
  /// Features of the listed samples; `train` requests cached activations.
  std::function<RowMatrix<float>(std::span<const std::size_t>, bool train)> forward;
  /// Backpropagates dL/dfeatures of the last training forward (null when frozen).
  std::function<void(const RowMatrix<float>&)> backward;
  std::size_t size = 0;
};

/// Trains `regressor` (and optionally the source and the bias table) to
/// minimize the mean angular error over `targets`.
inline std::vector<EpochRecord> fit_regressor(nn::Mlp<float>& regressor, const FeatureSource& source,
                                              std::span<const Vec3> targets, nn::ParameterList<float> extra_params,
                                              const FinetuneConfig& cfg, SubjectBias* bias = nullptr,
                                              const std::function<double()>& validate = {}) {
  cfg.validate();
  if (targets.size() != source.size) throw ShapeError("one target per sample required");
  if (targets.empty()) throw MissingLabelError("no labeled samples to fine-tune on");
  nn::ParameterList<float> params;
  regressor.collect(params);
  for (auto* p : extra_params) params.push_back(p);
  if (bias) params.push_back(&bias->table);
  nn::Sgd<float> opt(params, cfg.momentum, cfg.weight_decay);

  const std::size_t n = targets.size();
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  const std::size_t per_epoch = (n + bs - 1) / bs;
  const long total = static_cast<long>(per_epoch) * cfg.epochs;
  Rng rng(cfg.seed ^ 0x5DEECE66DULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochRecord> trace;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    double lr = cfg.lr;
    for (std::size_t b0 = 0; b0 < n; b0 += bs) {
      const std::span<const std::size_t> idx(order.data() + b0, std::min(bs, n - b0));
      nn::zero_grads(params);
      const RowMatrix<float> f = source.forward(idx, true);
      RowMatrix<float> pred = regressor.forward(f, true);
      if (bias) {
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const int s = bias->subject[idx[i]];
          pred(static_cast<Eigen::Index>(i), 0) += bias->table.value[2 * s];
          pred(static_cast<Eigen::Index>(i), 1) += bias->table.value[2 * s + 1];
        }
      }
      RowMatrix<float> d_pred(pred.rows(), 2);
      const double inv_n = 1.0 / static_cast<double>(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const AngularLossGrad g = angular_loss_pitch_yaw(targets[idx[i]], pred(r, 0), pred(r, 1));
        epoch_loss += g.loss_deg;
        // Optimize the error in radians; reported values stay in degrees.
        d_pred(r, 0) = static_cast<float>(g.d_pitch * inv_n / kRadToDeg);
        d_pred(r, 1) = static_cast<float>(g.d_yaw * inv_n / kRadToDeg);
        if (bias) {
          const int s = bias->subject[idx[i]];
          bias->table.grad[2 * s] += d_pred(r, 0);
          bias->table.grad[2 * s + 1] += d_pred(r, 1);
        }
      }
      const RowMatrix<float> d_f = regressor.backward(d_pred);
      if (source.backward) source.backward(d_f);
      lr = cosine_lr(step, total, cfg.lr);
      opt.step(lr);
      ++step;
    }
    EpochRecord rec{epoch, epoch_loss / static_cast<double>(n), lr, std::nullopt};
    if (validate) rec.val_mae = validate();
    trace.push_back(rec);
  }
  return trace;
}

inline FeatureSource precomputed_features(const RowMatrix<float>& features) {
  FeatureSource src;
  src.size = static_cast<std::size_t>(features.rows());
  src.forward = [&features](std::span<const std::size_t> idx, bool) {
    RowMatrix<float> out(static_cast<Eigen::Index>(idx.size()), features.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(idx[i]));
    return out;
  };
  return src;
}

/// Encoder evaluated on the fly (training mode) with backpropagation into it.
inline FeatureSource trainable_encoder(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                                       std::span<const FrameRef> frames) {
  FeatureSource src;
  src.size = frames.size();
  src.forward = [&model, &m, &store, frames](std::span<const std::size_t> idx, bool train) {
    std::vector<FrameRef> sel;
    for (std::size_t i : idx) sel.push_back(frames[i]);
    const auto images = frame_images(m, store, sel);
    return model.encoder().forward(images_to_tensor<float>(images), train);
  };
  src.backward = [&model](const RowMatrix<float>& g) { model.encoder().backward(g); };
  return src;
}

struct FinetuneResult {
  std::vector<EpochRecord> trace;
};

/// Stage II: fits the regressor (frozen mode) or encoder + regressor (full mode)
/// on labeled frames. `validation` frames, if given, are scored after each epoch.
inline FinetuneResult finetune(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                               std::span<const FrameRef> frames, const FinetuneConfig& cfg,
                               std::span<const FrameRef> validation = {}) {
  cfg.validate();
  if (model.stage() != Stage::finetune) throw InvalidArgument("finetune needs a model with a regressor attached");
  const std::vector<Vec3> targets = frame_labels(m, frames);
  const std::vector<Vec3> val_targets = frame_labels(m, validation);
  auto validate = [&]() {
    const RowMatrix<float> f = encode_frames(model, m, store, validation);
    return mean_angular_error(model.regress_pitch_yaw(f), val_targets);
  };
  std::function<double()> val_fn;
  if (!validation.empty()) val_fn = validate;

  FinetuneResult out;
  if (cfg.frozen()) {
    const RowMatrix<float> features = encode_frames(model, m, store, frames);
    out.trace = fit_regressor(model.regressor(), precomputed_features(features), targets, {}, cfg, nullptr, val_fn);
  } else {
    out.trace = fit_regressor(model.regressor(), trainable_encoder(model, m, store, frames), targets,
                              model.encoder_parameters(), cfg, nullptr, val_fn);
  }
  return out;
}

}  // namespace gazeclr
