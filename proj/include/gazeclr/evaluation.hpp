#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "gazeclr/data.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/geometry.hpp"
#include "gazeclr/json_util.hpp"
#include "gazeclr/model.hpp"
#include "gazeclr/training.hpp"
#include "gazeclr/tsne.hpp"

namespace gazeclr {

inline const std::vector<int> kDefaultShotGrid{1, 3, 5, 9, 15, 20, 50, 64};
inline const std::vector<double> kDefaultFractionGrid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};

// ------------------------------------------------------------------ reports

struct SubjectRuns {
  std::string subject;
  std::size_t samples = 0;
  std::vector<double> mae;  // degrees, one per run
};

/// Result of one protocol at one shot count (or label fraction).
struct EvalReport {
  std::string protocol;  // "llt" | "ft" | "within"
  int k = 0;
  std::optional<double> fraction;
  int runs = 10;
  std::uint64_t seed = 0;
  std::vector<SubjectRuns> per_subject;  // sorted by subject
  std::vector<double> run_mae;           // mean over subjects, per run
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation over runs, 0 for a single run
  std::vector<std::string> warnings;

  /// Recomputes run_mae, mean and std from per_subject.
  void finalize() {
    std::sort(per_subject.begin(), per_subject.end(),
              [](const SubjectRuns& a, const SubjectRuns& b) { return a.subject < b.subject; });
    run_mae.assign(static_cast<std::size_t>(runs), 0.0);
    mean = 0.0;
    std = 0.0;
    if (per_subject.empty()) return;
    for (const auto& s : per_subject) {
      if (s.mae.size() != static_cast<std::size_t>(runs)) throw InvariantViolation("subject '" + s.subject + "' has a wrong run count");
      for (int r = 0; r < runs; ++r) run_mae[static_cast<std::size_t>(r)] += s.mae[static_cast<std::size_t>(r)];
    }
    for (double& v : run_mae) v /= static_cast<double>(per_subject.size());
    mean = std::accumulate(run_mae.begin(), run_mae.end(), 0.0) / static_cast<double>(runs);
    if (runs > 1) {
      double ss = 0.0;
      for (double v : run_mae) ss += (v - mean) * (v - mean);
      std = std::sqrt(ss / static_cast<double>(runs - 1));
    }
  }

  Json to_json() const {
    Json subjects = Json::array();
    for (const auto& s : per_subject) subjects.push_back({{"subject", s.subject}, {"samples", s.samples}, {"mae", s.mae}});
    Json j{{"protocol", protocol}, {"k", k},         {"runs", runs},  {"seed", seed},          {"per_subject", subjects},
           {"run_mae", run_mae},   {"mean", mean},   {"std", std},    {"warnings", warnings}};
    j["fraction"] = fraction ? Json(*fraction) : Json(nullptr);
    return j;
  }

  static EvalReport from_json(const Json& j) {
    EvalReport r;
    ObjectReader rd(j, "report");
    rd.read("protocol", r.protocol);
    rd.read("k", r.k);
    rd.read("runs", r.runs);
    rd.read("seed", r.seed);
    rd.read("run_mae", r.run_mae);
    rd.read("mean", r.mean);
    rd.read("std", r.std);
    rd.read("warnings", r.warnings);
    if (const Json* f = rd.raw("fraction"); f && !f->is_null()) r.fraction = f->get<double>();
    if (const Json* ps = rd.raw("per_subject")) {
      for (const auto& s : *ps) {
        SubjectRuns sr;
        ObjectReader srd(s, "report.per_subject");
        srd.read("subject", sr.subject);
        srd.read("samples", sr.samples);
        srd.read("mae", sr.mae);
        srd.finish();
        r.per_subject.push_back(std::move(sr));
      }
    }
    rd.finish();
    return r;
  }
};

inline Json reports_to_json(const std::vector<EvalReport>& reports) {
  Json arr = Json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return Json{{"reports", arr}};
}

inline std::vector<EvalReport> reports_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("reports") || !j.at("reports").is_array()) {
    throw ConfigError("reports", "expected an object with a 'reports' array");
  }
  std::vector<EvalReport> out;
  for (const auto& r : j.at("reports")) out.push_back(EvalReport::from_json(r));
  return out;
}

// ------------------------------------------------------------------ sampling

namespace detail {

/// Deterministic generator for one (seed, subject, run) cell.
inline Rng cell_rng(std::uint64_t seed, const std::string& subject, int run, std::uint64_t salt = 0) {
  const auto h = fnv1a64(reinterpret_cast<const unsigned char*>(subject.data()), subject.size());
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32), static_cast<std::uint32_t>(run),
                    static_cast<std::uint32_t>(salt)};
  return Rng(seq);
}

/// Sample indices grouped by subject, subjects sorted.
inline std::map<std::string, std::vector<std::size_t>> by_subject(std::span<const std::string> subjects) {
  std::map<std::string, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < subjects.size(); ++i) out[subjects[i]].push_back(i);
  return out;
}

inline std::vector<std::string> frame_subjects(const DatasetManifest& m, std::span<const FrameRef> frames) {
  std::vector<std::string> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(m.groups[f.group].participant);
  return out;
}

inline RowMatrix<float> select_rows(const RowMatrix<float>& x, std::span<const std::size_t> idx) {
  RowMatrix<float> out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace detail

struct CalibrationSplit {
  std::vector<std::size_t> calibration;
  std::vector<std::size_t> test;
};

/// Draws k calibration samples out of `pool` without replacement; the rest
/// form the test set. Both keep the pool order.
inline CalibrationSplit calibration_split(std::span<const std::size_t> pool, int k, Rng& rng) {
  if (k < 0 || static_cast<std::size_t>(k) > pool.size()) throw RangeError("calibration size out of range");
  std::vector<std::size_t> pos(pool.size());
  std::iota(pos.begin(), pos.end(), 0);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::vector<char> is_calib(pool.size(), 0);
  for (int i = 0; i < k; ++i) is_calib[pos[static_cast<std::size_t>(i)]] = 1;
  CalibrationSplit s;
  for (std::size_t i = 0; i < pool.size(); ++i) (is_calib[i] ? s.calibration : s.test).push_back(pool[i]);
  return s;
}

// ------------------------------------------------------------------ linear layer training

struct LltConfig {
  std::string solver = "pinv";  // "pinv" | "ridge"
  double lambda = 1e-4;         // pinv: relative singular value cutoff; ridge: penalty

  void validate() const {
    if (solver != "pinv" && solver != "ridge") throw ConfigError("eval.llt.solver", "must be 'pinv' or 'ridge'");
    if (!(lambda >= 0.0)) throw ConfigError("eval.llt.lambda", "must be non-negative");
  }
};

/// Affine map y = x W + b fitted by closed-form least squares on centered data.
struct LinearFit {
  Eigen::MatrixXd weight;
  Eigen::RowVectorXd bias;

  Eigen::MatrixXd predict(const Eigen::MatrixXd& x) const { return (x * weight).rowwise() + bias; }
};

inline LinearFit fit_linear(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, const LltConfig& cfg) {
  cfg.validate();
  if (x.rows() != y.rows() || x.rows() == 0) throw ShapeError("fit_linear: x and y need the same non-zero row count");
  const Eigen::RowVectorXd mx = x.colwise().mean();
  const Eigen::RowVectorXd my = y.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - mx;
  const Eigen::MatrixXd yc = y.rowwise() - my;
  LinearFit fit;
  if (cfg.solver == "ridge") {
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += cfg.lambda;
    fit.weight = gram.ldlt().solve(xc.transpose() * yc);
  } else {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(xc, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd& s = svd.singularValues();
    const double cutoff = s.size() > 0 ? cfg.lambda * s(0) : 0.0;
    Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      if (s(i) > cutoff && s(i) > 0.0) inv(i) = 1.0 / s(i);
    }
    fit.weight = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose() * yc;
  }
  fit.bias = my - mx * fit.weight;
  return fit;
}

inline Eigen::MatrixXd pitch_yaw_targets(std::span<const Vec3> targets) {
  Eigen::MatrixXd y(static_cast<Eigen::Index>(targets.size()), 2);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const PitchYaw py = vector_to_pitch_yaw(targets[i]);
    y(static_cast<Eigen::Index>(i), 0) = py.pitch;
    y(static_cast<Eigen::Index>(i), 1) = py.yaw;
  }
  return y;
}

inline double mean_angular_error(const Eigen::MatrixXd& pitch_yaw, std::span<const Vec3> targets,
                                 std::span<const std::size_t> idx) {
  if (idx.empty()) throw EmptyBatchError("no samples to score");
  double total = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    total += angular_error_deg(targets[idx[i]], pitch_yaw_to_vector(pitch_yaw(r, 0), pitch_yaw(r, 1)).vector());
  }
  return total / static_cast<double>(idx.size());
}

/// LLT on precomputed features: per subject and run, fit a linear map from k
/// calibration samples and score the subject's remaining samples.
inline EvalReport eval_llt_features(const Eigen::MatrixXd& features, std::span<const Vec3> targets,
                                    std::span<const std::string> subjects, int k, int runs, std::uint64_t seed,
                                    const LltConfig& cfg = {}) {
  if (k < 1) throw RangeError("llt needs at least one calibration sample");
  if (runs < 1) throw RangeError("runs must be at least 1");
  if (static_cast<std::size_t>(features.rows()) != targets.size() || targets.size() != subjects.size()) {
    throw ShapeError("eval_llt: features, targets and subjects must align");
  }
  const Eigen::MatrixXd y = pitch_yaw_targets(targets);
  EvalReport rep;
  rep.protocol = "llt";
  rep.k = k;
  rep.runs = runs;
  rep.seed = seed;
  for (const auto& [subject, pool] : detail::by_subject(subjects)) {
    if (pool.size() <= static_cast<std::size_t>(k)) {
      rep.warnings.push_back("subject '" + subject + "' excluded: " + std::to_string(pool.size()) +
                             " samples for k = " + std::to_string(k));
      continue;
    }
    SubjectRuns sr{subject, pool.size(), {}};
    for (int run = 0; run < runs; ++run) {
      Rng rng = detail::cell_rng(seed, subject, run);
      const CalibrationSplit split = calibration_split(pool, k, rng);
      Eigen::MatrixXd xc(k, features.cols()), yc(k, 2), xt(static_cast<Eigen::Index>(split.test.size()), features.cols());
      for (int i = 0; i < k; ++i) {
        xc.row(i) = features.row(static_cast<Eigen::Index>(split.calibration[static_cast<std::size_t>(i)]));
        yc.row(i) = y.row(static_cast<Eigen::Index>(split.calibration[static_cast<std::size_t>(i)]));
      }
      for (std::size_t i = 0; i < split.test.size(); ++i) xt.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(split.test[i]));
      const LinearFit fit = fit_linear(xc, yc, cfg);
      sr.mae.push_back(mean_angular_error(fit.predict(xt), targets, split.test));
    }
    rep.per_subject.push_back(std::move(sr));
  }
  if (rep.per_subject.empty()) throw DataError("llt: no subject has more than k = " + std::to_string(k) + " samples");
  rep.finalize();
  return rep;
}

/// LLT with the frozen encoder of `model` over every frame of `m`, one report per shot count.
inline std::vector<EvalReport> eval_llt(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                                        std::span<const int> shots, int runs, std::uint64_t seed,
                                        const LltConfig& cfg = {}) {
  const std::vector<FrameRef> frames = frames_of(m);
  const std::vector<Vec3> targets = frame_labels(m, frames);
  const std::vector<std::string> subjects = detail::frame_subjects(m, frames);
  const Eigen::MatrixXd features = encode_frames(model, m, store, frames).cast<double>();
  std::vector<EvalReport> out;
  for (int k : shots) out.push_back(eval_llt_features(features, targets, subjects, k, runs, seed, cfg));
  return out;
}

inline EvalReport eval_llt(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store, int k, int runs,
                           std::uint64_t seed, const LltConfig& cfg = {}) {
  const int shots[] = {k};
  return eval_llt(model, m, store, shots, runs, seed, cfg).front();
}

// ------------------------------------------------------------------ fine-tuning with subject bias

/// Subject folds: "leave_one_out", "k_fold" (round robin over sorted subjects)
/// or "explicit" lists of held-out subjects.
struct FoldSpec {
  std::string scheme = "leave_one_out";
  int folds = 0;
  std::vector<std::vector<std::string>> test_subjects;

  void validate() const {
    if (scheme == "k_fold" && folds < 2) throw ConfigError("eval.folds.folds", "k_fold needs at least 2 folds");
    if (scheme == "explicit" && test_subjects.empty()) throw ConfigError("eval.folds.test_subjects", "explicit folds need at least one fold");
    if (scheme != "leave_one_out" && scheme != "k_fold" && scheme != "explicit") {
      throw ConfigError("eval.folds.scheme", "must be 'leave_one_out', 'k_fold' or 'explicit'");
    }
  }

  std::vector<std::vector<std::string>> resolve(std::vector<std::string> subjects) const {
    validate();
    std::sort(subjects.begin(), subjects.end());
    std::vector<std::vector<std::string>> out;
    if (scheme == "leave_one_out") {
      for (const auto& s : subjects) out.push_back({s});
    } else if (scheme == "k_fold") {
      if (static_cast<std::size_t>(folds) > subjects.size()) throw DataError("more folds than subjects");
      out.resize(static_cast<std::size_t>(folds));
      for (std::size_t i = 0; i < subjects.size(); ++i) out[i % static_cast<std::size_t>(folds)].push_back(subjects[i]);
    } else {
      const std::set<std::string> known(subjects.begin(), subjects.end());
      for (const auto& fold : test_subjects) {
        for (const auto& s : fold) {
          if (!known.count(s)) throw DataError("fold subject '" + s + "' is not in the manifest");
        }
      }
      out = test_subjects;
    }
    return out;
  }

  Json to_json() const { return {{"scheme", scheme}, {"folds", folds}, {"test_subjects", test_subjects}}; }

  static FoldSpec from_reader(ObjectReader& rd) {
    FoldSpec f;
    rd.read("scheme", f.scheme);
    rd.read("folds", f.folds);
    rd.read("test_subjects", f.test_subjects);
    rd.finish();
    f.validate();
    return f;
  }
};

/// Mean pitch/yaw residual (target minus prediction) over the calibration samples.
inline PitchYaw estimate_subject_bias(const Eigen::MatrixXd& pitch_yaw, std::span<const Vec3> targets,
                                      std::span<const std::size_t> calibration) {
  PitchYaw b;
  if (calibration.empty()) return b;
  for (std::size_t i : calibration) {
    const PitchYaw t = vector_to_pitch_yaw(targets[i]);
    b.pitch += t.pitch - pitch_yaw(static_cast<Eigen::Index>(i), 0);
    b.yaw += t.yaw - pitch_yaw(static_cast<Eigen::Index>(i), 1);
  }
  b.pitch /= static_cast<double>(calibration.size());
  b.yaw /= static_cast<double>(calibration.size());
  return b;
}

/// Scores predictions per held-out subject and run after adding the bias
/// estimated from k calibration samples (zero when k = 0 or bias disabled).
inline void score_with_bias(EvalReport& rep, const Eigen::MatrixXd& pitch_yaw, std::span<const Vec3> targets,
                            std::span<const std::string> subjects, bool use_bias) {
  for (const auto& [subject, pool] : detail::by_subject(subjects)) {
    if (rep.k > 0 && pool.size() <= static_cast<std::size_t>(rep.k)) {
      rep.warnings.push_back("subject '" + subject + "' excluded: " + std::to_string(pool.size()) +
                             " samples for k = " + std::to_string(rep.k));
      continue;
    }
    SubjectRuns sr{subject, pool.size(), {}};
    for (int run = 0; run < rep.runs; ++run) {
      Rng rng = detail::cell_rng(rep.seed, subject, run, 1);
      const CalibrationSplit split = calibration_split(pool, rep.k, rng);
      const PitchYaw b = use_bias ? estimate_subject_bias(pitch_yaw, targets, split.calibration) : PitchYaw{};
      Eigen::MatrixXd pred(static_cast<Eigen::Index>(split.test.size()), 2);
      for (std::size_t i = 0; i < split.test.size(); ++i) {
        pred(static_cast<Eigen::Index>(i), 0) = pitch_yaw(static_cast<Eigen::Index>(split.test[i]), 0) + b.pitch;
        pred(static_cast<Eigen::Index>(i), 1) = pitch_yaw(static_cast<Eigen::Index>(split.test[i]), 1) + b.yaw;
      }
      sr.mae.push_back(mean_angular_error(pred, targets, split.test));
    }
    rep.per_subject.push_back(std::move(sr));
  }
}

struct BiasEvalConfig {
  FinetuneConfig finetune = [] {
    FinetuneConfig f;
    f.mode = "full";
    return f;
  }();
  bool subject_bias = true;
  FoldSpec folds;
};

using ModelFactory = std::function<GazeModel<float>()>;

/// Per fold: fine-tunes a fresh copy of the model (encoder + regressor, plus a
/// per-training-subject pitch/yaw bias) on the other subjects, then scores the
/// held-out subjects with a bias estimated from k calibration samples.
inline std::vector<EvalReport> eval_finetune_bias(const ModelFactory& make_model, const DatasetManifest& m,
                                                  ImageStore& store, std::span<const int> shots, int runs,
                                                  std::uint64_t seed, const BiasEvalConfig& cfg = {}) {
  if (runs < 1) throw RangeError("runs must be at least 1");
  for (int k : shots) {
    if (k < 0) throw RangeError("shot count must be non-negative");
  }
  const auto folds = cfg.folds.resolve(m.participants());
  std::vector<EvalReport> reports(shots.size());
  for (std::size_t s = 0; s < shots.size(); ++s) {
    reports[s].protocol = "ft";
    reports[s].k = shots[s];
    reports[s].runs = runs;
    reports[s].seed = seed;
  }
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::set<std::string> held(folds[f].begin(), folds[f].end());
    std::vector<std::string> train_subjects;
    for (const auto& p : m.participants()) {
      if (!held.count(p)) train_subjects.push_back(p);
    }
    if (train_subjects.empty()) throw DataError("fold " + std::to_string(f) + " leaves no training subject");
    const std::vector<FrameRef> train = frames_of(m, train_subjects);
    const std::vector<FrameRef> test = frames_of(m, folds[f]);
    if (test.empty()) throw DataError("fold " + std::to_string(f) + " has no test frames");

    GazeModel<float> model = make_model();
    if (model.stage() != Stage::finetune) model.attach_regressor(seed + f);
    const std::vector<Vec3> train_targets = frame_labels(m, train);
    FinetuneConfig ft = cfg.finetune;
    ft.seed = seed + f;

    SubjectBias bias;
    if (cfg.subject_bias) {
      std::map<std::string, int> index;
      for (const auto& p : train_subjects) index.emplace(p, static_cast<int>(index.size()));
      for (const auto& fr : train) bias.subject.push_back(index.at(m.groups[fr.group].participant));
      bias.table = nn::Parameter<float>("subject_bias", {static_cast<int>(index.size()), 2});
    }
    SubjectBias* bias_ptr = cfg.subject_bias ? &bias : nullptr;
    if (ft.frozen()) {
      const RowMatrix<float> features = encode_frames(model, m, store, train);
      fit_regressor(model.regressor(), precomputed_features(features), train_targets, {}, ft, bias_ptr);
    } else {
      fit_regressor(model.regressor(), trainable_encoder(model, m, store, train), train_targets,
                    model.encoder_parameters(), ft, bias_ptr);
    }

    const std::vector<Vec3> test_targets = frame_labels(m, test);
    const std::vector<std::string> test_subjects = detail::frame_subjects(m, test);
    const Eigen::MatrixXd pred = model.regress_pitch_yaw(encode_frames(model, m, store, test)).cast<double>();
    for (auto& rep : reports) score_with_bias(rep, pred, test_targets, test_subjects, cfg.subject_bias);
  }
  for (auto& rep : reports) {
    if (rep.per_subject.empty()) throw DataError("ft: no held-out subject could be scored at k = " + std::to_string(rep.k));
    rep.finalize();
  }
  return reports;
}

// ------------------------------------------------------------------ within-dataset probing

struct WithinConfig {
  std::vector<std::string> train_subjects;       // empty: all but the validation subjects
  std::vector<std::string> validation_subjects;  // empty: the last subject in sorted order
  std::vector<double> fractions{1.0};
  int runs = 1;
  FinetuneConfig finetune;  // mode is forced to frozen
};

/// Frozen-encoder regressor trained on a fraction of the labeled training
/// frames; MAE on the validation subjects. One report per fraction.
inline std::vector<EvalReport> eval_within(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                                           const WithinConfig& cfg, std::uint64_t seed) {
  if (cfg.runs < 1) throw RangeError("runs must be at least 1");
  std::vector<std::string> val = cfg.validation_subjects;
  std::vector<std::string> all = m.participants();
  std::sort(all.begin(), all.end());
  if (val.empty()) {
    if (all.size() < 2) throw DataError("within: need at least two subjects for a default split");
    val.push_back(all.back());
  }
  std::vector<std::string> train = cfg.train_subjects;
  if (train.empty()) {
    for (const auto& p : all) {
      if (std::find(val.begin(), val.end(), p) == val.end()) train.push_back(p);
    }
  }
  const std::vector<FrameRef> train_frames = frames_of(m, train);
  const std::vector<FrameRef> val_frames = frames_of(m, val);
  if (train_frames.empty()) throw DataError("within: empty training split");
  if (val_frames.empty()) throw DataError("within: empty validation split");
  for (double f : cfg.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw RangeError("label fraction must lie in (0, 1]");
  }

  const std::vector<Vec3> train_targets = frame_labels(m, train_frames);
  const std::vector<Vec3> val_targets = frame_labels(m, val_frames);
  const std::vector<std::string> val_subjects = detail::frame_subjects(m, val_frames);
  const RowMatrix<float> train_features = encode_frames(model, m, store, train_frames);
  const RowMatrix<float> val_features = encode_frames(model, m, store, val_frames);
  const auto val_pool = detail::by_subject(val_subjects);

  FinetuneConfig ft = cfg.finetune;
  ft.mode = "frozen";
  const ModelConfig& mc = model.config();
  std::vector<EvalReport> out;
  for (std::size_t fi = 0; fi < cfg.fractions.size(); ++fi) {
    EvalReport rep;
    rep.protocol = "within";
    rep.fraction = cfg.fractions[fi];
    rep.runs = cfg.runs;
    rep.seed = seed;
    std::map<std::string, std::vector<double>> per;
    for (int run = 0; run < cfg.runs; ++run) {
      Rng rng = detail::cell_rng(seed, "within", run, fi);
      std::vector<std::size_t> order(train_frames.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      const auto n = static_cast<std::size_t>(std::ceil(cfg.fractions[fi] * static_cast<double>(order.size()) - 1e-9));
      order.resize(std::max<std::size_t>(n, 1));
      std::sort(order.begin(), order.end());
      rep.k = static_cast<int>(order.size());

      std::vector<Vec3> targets;
      for (std::size_t i : order) targets.push_back(train_targets[i]);
      const RowMatrix<float> feats = detail::select_rows(train_features, order);
      Rng init(rng());
      nn::Mlp<float> reg("regressor", {mc.encoder.feature_dim, mc.regressor.hidden_dim, 2}, init);
      ft.seed = rng();
      fit_regressor(reg, precomputed_features(feats), targets, {}, ft);
      const Eigen::MatrixXd pred = reg.forward(val_features, false).cast<double>();
      for (const auto& [subject, pool] : val_pool) {
        Eigen::MatrixXd p(static_cast<Eigen::Index>(pool.size()), 2);
        for (std::size_t i = 0; i < pool.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = pred.row(static_cast<Eigen::Index>(pool[i]));
        per[subject].push_back(mean_angular_error(p, val_targets, pool));
      }
    }
    for (auto& [subject, mae] : per) rep.per_subject.push_back({subject, val_pool.at(subject).size(), std::move(mae)});
    rep.finalize();
    out.push_back(std::move(rep));
  }
  return out;
}

// ------------------------------------------------------------------ embedding diagnostics

enum class DiagnosticMode { equivariant, encoder };

inline std::string to_string(DiagnosticMode m) { return m == DiagnosticMode::equivariant ? "equivariant" : "encoder"; }

inline DiagnosticMode diagnostic_mode_from_string(const std::string& s) {
  if (s == "equivariant") return DiagnosticMode::equivariant;
  if (s == "encoder") return DiagnosticMode::encoder;
  throw ConfigError("diagnostics.mode", "must be 'equivariant' or 'encoder' (got '" + s + "')");
}

struct DiagnosticsConfig {
  DiagnosticMode mode = DiagnosticMode::equivariant;
  int pairs = 500;
  int max_points = 800;          // frames embedded by t-SNE and used for pair sampling
  int max_groups_per_subject = 400;  // groups used for the timestamp distances
  bool run_tsne = true;
  TsneConfig tsne;
  std::uint64_t seed = 0;

  void validate() const {
    if (pairs < 1) throw ConfigError("diagnostics.pairs", "must be at least 1");
    if (max_points < 2) throw ConfigError("diagnostics.max_points", "must be at least 2");
    if (max_groups_per_subject < 2) throw ConfigError("diagnostics.max_groups_per_subject", "must be at least 2");
    tsne.validate();
  }
};

struct ProjectedPoint {
  std::string participant;
  std::int64_t timestamp = 0;
  std::size_t view = 0;
  double x = 0.0, y = 0.0;
  std::optional<std::array<double, 2>> pog;
};

struct PairSample {
  std::size_t a = 0, b = 0;  // indices into the projection
  double embedding_distance = 0.0;
  double projected_distance = 0.0;
  double pog_distance = 0.0;
};

struct Correlation {
  std::optional<double> r;  // nullopt when degenerate or skipped
  std::string status = "ok";  // "ok" | "degenerate" | "skipped"
};

struct DiagnosticsBundle {
  DiagnosticMode mode = DiagnosticMode::equivariant;
  std::vector<ProjectedPoint> projection;
  std::optional<double> same_timestamp_distance;
  std::optional<double> mismatched_timestamp_distance;
  std::vector<PairSample> pairs;
  Correlation embedding_correlation;
  Correlation projected_correlation;
  std::vector<std::string> notices;

  Json to_json() const {
    auto corr = [](const Correlation& c) {
      return Json{{"r", c.r ? Json(*c.r) : Json(nullptr)}, {"status", c.status}};
    };
    auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
    Json pts = Json::array();
    for (const auto& p : projection) {
      pts.push_back({{"participant", p.participant}, {"timestamp", p.timestamp}, {"view", p.view}, {"x", p.x}, {"y", p.y},
                     {"pog", p.pog ? Json(*p.pog) : Json(nullptr)}});
    }
    Json pr = Json::array();
    for (const auto& p : pairs) {
      pr.push_back({{"a", p.a}, {"b", p.b}, {"embedding_distance", p.embedding_distance},
                    {"projected_distance", p.projected_distance}, {"pog_distance", p.pog_distance}});
    }
    return {{"mode", to_string(mode)},
            {"projection", pts},
            {"same_timestamp_distance", opt(same_timestamp_distance)},
            {"mismatched_timestamp_distance", opt(mismatched_timestamp_distance)},
            {"pairs", pr},
            {"embedding_correlation", corr(embedding_correlation)},
            {"projected_correlation", corr(projected_correlation)},
            {"notices", notices}};
  }

  static DiagnosticsBundle from_json(const Json& j) {
    DiagnosticsBundle d;
    try {
      d.mode = diagnostic_mode_from_string(j.at("mode").get<std::string>());
      for (const auto& p : j.at("projection")) {
        ProjectedPoint q;
        q.participant = p.at("participant").get<std::string>();
        q.timestamp = p.at("timestamp").get<std::int64_t>();
        q.view = p.at("view").get<std::size_t>();
        q.x = p.at("x").get<double>();
        q.y = p.at("y").get<double>();
        if (!p.at("pog").is_null()) q.pog = p.at("pog").get<std::array<double, 2>>();
        d.projection.push_back(std::move(q));
      }
      auto opt = [&](const char* key) -> std::optional<double> {
        const Json& v = j.at(key);
        return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      };
      d.same_timestamp_distance = opt("same_timestamp_distance");
      d.mismatched_timestamp_distance = opt("mismatched_timestamp_distance");
      for (const auto& p : j.at("pairs")) {
        PairSample s;
        s.a = p.at("a").get<std::size_t>();
        s.b = p.at("b").get<std::size_t>();
        s.embedding_distance = p.at("embedding_distance").get<double>();
        s.projected_distance = p.at("projected_distance").get<double>();
        s.pog_distance = p.at("pog_distance").get<double>();
        d.pairs.push_back(s);
      }
      auto corr = [](const Json& c) {
        Correlation out;
        out.status = c.at("status").get<std::string>();
        if (!c.at("r").is_null()) out.r = c.at("r").get<double>();
        return out;
      };
      d.embedding_correlation = corr(j.at("embedding_correlation"));
      d.projected_correlation = corr(j.at("projected_correlation"));
      d.notices = j.at("notices").get<std::vector<std::string>>();
    } catch (const Json::exception& e) {
      throw DataError(std::string("diagnostics document: ") + e.what());
    }
    return d;
  }
};

/// Pearson correlation; degenerate when either side has no variance.
inline Correlation pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("pearson: length mismatch");
  Correlation c;
  if (a.size() < 2) {
    c.status = "degenerate";
    return c;
  }
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  const double scale_a = std::max(1.0, ma * ma) * n, scale_b = std::max(1.0, mb * mb) * n;
  if (saa <= 1e-24 * scale_a || sbb <= 1e-24 * scale_b) {
    c.status = "degenerate";
    return c;
  }
  c.r = sab / std::sqrt(saa * sbb);
  return c;
}

inline Eigen::MatrixXd l2_normalize_rows(const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

/// Screen-frame equivariant embeddings z̄ = R_eff ẑ of the given frames.
inline Eigen::MatrixXd screen_embeddings(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                                         std::span<const FrameRef> frames) {
  const RowMatrix<float> z_hat = model.project_equivariant(encode_frames(model, m, store, frames));
  std::vector<RotationMatrix> rot;
  rot.reserve(frames.size());
  for (const auto& f : frames) rot.push_back(m.groups[f.group].effective[f.view]);
  return rotate_rows(z_hat, rot).cast<double>();
}

/// Mean same-timestamp and mismatched-timestamp distances between unit
/// embeddings of different views, within each participant.
inline std::pair<double, double> timestamp_distances(const Eigen::MatrixXd& unit, std::span<const FrameRef> frames,
                                                     std::span<const std::string> subjects) {
  double same = 0.0, other = 0.0;
  std::size_t n_same = 0, n_other = 0;
  for (const auto& [subject, pool] : detail::by_subject(subjects)) {
    for (std::size_t i = 0; i < pool.size(); ++i) {
      for (std::size_t j = i + 1; j < pool.size(); ++j) {
        const FrameRef& a = frames[pool[i]];
        const FrameRef& b = frames[pool[j]];
        if (a.view == b.view) continue;
        const double d = (unit.row(static_cast<Eigen::Index>(pool[i])) - unit.row(static_cast<Eigen::Index>(pool[j]))).norm();
        if (a.group == b.group) {
          same += d;
          ++n_same;
        } else {
          other += d;
          ++n_other;
        }
      }
    }
  }
  if (n_same == 0 || n_other == 0) throw InsufficientViewsError("timestamp distances need multi-view groups");
  return {same / static_cast<double>(n_same), other / static_cast<double>(n_other)};
}

inline DiagnosticsBundle embed_diagnostics(GazeModel<float>& model, const DatasetManifest& m, ImageStore& store,
                                           const DiagnosticsConfig& cfg) {
  cfg.validate();
  if (model.stage() != Stage::pretrain) throw InvalidArgument("diagnostics need the projection heads of a pre-trained model");
  DiagnosticsBundle out;
  out.mode = cfg.mode;
  Rng rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);

  // (b) timestamp distances on z̄, over a bounded number of groups per subject.
  if (m.views.size() >= 2) {
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t g = 0; g < m.groups.size(); ++g) groups[m.groups[g].participant].push_back(g);
    std::vector<FrameRef> frames;
    for (auto& [subject, gs] : groups) {
      if (gs.size() > static_cast<std::size_t>(cfg.max_groups_per_subject)) {
        std::shuffle(gs.begin(), gs.end(), rng);
        gs.resize(static_cast<std::size_t>(cfg.max_groups_per_subject));
        std::sort(gs.begin(), gs.end());
      }
      for (std::size_t g : gs) {
        for (std::size_t v = 0; v < m.views.size(); ++v) frames.push_back({g, v});
      }
    }
    const Eigen::MatrixXd unit = l2_normalize_rows(screen_embeddings(model, m, store, frames));
    const std::vector<std::string> subjects = detail::frame_subjects(m, frames);
    if (std::any_of(groups.begin(), groups.end(), [](const auto& kv) { return kv.second.size() >= 2; })) {
      const auto [same, other] = timestamp_distances(unit, frames, subjects);
      out.same_timestamp_distance = same;
      out.mismatched_timestamp_distance = other;
    } else {
      out.notices.push_back("timestamp distances skipped: every subject has a single group");
    }
  } else {
    out.notices.push_back("timestamp distances skipped: single-view manifest");
  }

  // (a) 2-D projection of a bounded frame subsample.
  std::vector<FrameRef> frames = frames_of(m);
  if (frames.size() > static_cast<std::size_t>(cfg.max_points)) {
    std::shuffle(frames.begin(), frames.end(), rng);
    frames.resize(static_cast<std::size_t>(cfg.max_points));
    std::sort(frames.begin(), frames.end(), [](const FrameRef& a, const FrameRef& b) {
      return a.group != b.group ? a.group < b.group : a.view < b.view;
    });
  }
  Eigen::MatrixXd emb = cfg.mode == DiagnosticMode::equivariant
                            ? screen_embeddings(model, m, store, frames)
                            : Eigen::MatrixXd(encode_frames(model, m, store, frames).cast<double>());
  emb = l2_normalize_rows(emb);
  Eigen::MatrixXd proj = Eigen::MatrixXd::Zero(emb.rows(), 2);
  if (cfg.run_tsne) {
    TsneConfig tc = cfg.tsne;
    tc.seed = cfg.tsne.seed ^ cfg.seed;
    proj = tsne_2d(emb, tc);
  } else {
    out.notices.push_back("2-D projection skipped by configuration");
  }
  bool all_pog = true;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const FrameGroup& g = m.groups[frames[i].group];
    const ManifestRecord& r = m.record(g, frames[i].view);
    ProjectedPoint p{g.participant, g.timestamp, frames[i].view, proj(static_cast<Eigen::Index>(i), 0),
                     proj(static_cast<Eigen::Index>(i), 1), std::nullopt};
    if (r.pog) p.pog = *r.pog;
    all_pog = all_pog && r.pog.has_value();
    out.projection.push_back(std::move(p));
  }

  // (c) embedding distance versus PoG distance over random pairs.
  if (!all_pog) {
    out.notices.push_back("PoG correlation skipped: some frames have no PoG label");
    out.embedding_correlation.status = "skipped";
    out.projected_correlation.status = "skipped";
    return out;
  }
  if (frames.size() < 2) {
    out.embedding_correlation.status = "degenerate";
    out.projected_correlation.status = "degenerate";
    return out;
  }
  std::uniform_int_distribution<std::size_t> pick(0, frames.size() - 1);
  std::vector<double> de, dp, dg;
  for (int i = 0; i < cfg.pairs; ++i) {
    std::size_t a = pick(rng), b = pick(rng);
    while (b == a) b = pick(rng);
    const auto& pa = *out.projection[a].pog;
    const auto& pb = *out.projection[b].pog;
    PairSample s{a, b, (emb.row(static_cast<Eigen::Index>(a)) - emb.row(static_cast<Eigen::Index>(b))).norm(),
                 (proj.row(static_cast<Eigen::Index>(a)) - proj.row(static_cast<Eigen::Index>(b))).norm(),
                 std::hypot(pa[0] - pb[0], pa[1] - pb[1])};
    de.push_back(s.embedding_distance);
    dp.push_back(s.projected_distance);
    dg.push_back(s.pog_distance);
    out.pairs.push_back(s);
  }
  out.embedding_correlation = pearson(de, dg);
  if (cfg.run_tsne) {
    out.projected_correlation = pearson(dp, dg);
  } else {
    out.projected_correlation.status = "skipped";
  }
  return out;
}

}  // namespace gazeclr
