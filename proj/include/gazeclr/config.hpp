#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gazeclr/augment.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/evaluation.hpp"
#include "gazeclr/json_util.hpp"
#include "gazeclr/model.hpp"
#include "gazeclr/training.hpp"

namespace gazeclr {

struct DataConfig {
  /// Required view set; empty uses every view in the manifest.
  std::vector<std::string> views;
};

struct EvalConfig {
  std::vector<int> shots = kDefaultShotGrid;
  int runs = 10;
  LltConfig llt;
  BiasEvalConfig finetune_bias;
  WithinConfig within;
};

/// Every tunable of a run, read from one JSON document plus overrides.
struct RunConfig {
  std::optional<std::uint64_t> seed;  // unset: GAZECLR_SEED, then 0
  DataConfig data;
  AugmentationConfig augmentation;
  ModelConfig model;
  TrainConfig train;
  FinetuneConfig finetune;
  EvalConfig eval;
  DiagnosticsConfig diagnostics;
  std::int64_t checkpoint_every = 0;

  /// Copies the resolved seed and shared sections into the module configs.
  void resolve(std::optional<std::uint64_t> flag_seed = std::nullopt) {
    if (flag_seed) {
      seed = flag_seed;
    } else if (!seed) {
      seed = 0;
      if (const char* env = std::getenv("GAZECLR_SEED"); env && *env) {
        try {
          std::size_t used = 0;
          seed = std::stoull(env, &used);
          if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
          throw ConfigError("GAZECLR_SEED", "must be an unsigned integer (got '" + std::string(env) + "')");
        }
      }
    }
    train.seed = *seed;
    train.augmentation = augmentation;
    finetune.seed = *seed;
    diagnostics.seed = *seed;
    eval.finetune_bias.finetune.seed = *seed;
    eval.within.finetune.seed = *seed;
  }

  void validate() const {
    model.validate();
    train.validate();
    finetune.validate();
    eval.llt.validate();
    eval.finetune_bias.finetune.validate();
    eval.finetune_bias.folds.validate();
    eval.within.finetune.validate();
    diagnostics.validate();
    if (eval.runs < 1) throw ConfigError("eval.runs", "must be at least 1");
    if (eval.within.runs < 1) throw ConfigError("eval.within.runs", "must be at least 1");
    for (int k : eval.shots) {
      if (k < 0) throw ConfigError("eval.shots", "shot counts must be non-negative");
    }
    for (double f : eval.within.fractions) {
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("eval.within.fractions", "fractions must lie in (0, 1]");
    }
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every", "must be non-negative");
  }
};

namespace detail {

inline Json to_json(const AugmentationConfig& a) {
  return {{"crop_scale_min", a.crop_scale_min},
          {"crop_scale_max", a.crop_scale_max},
          {"blur_probability", a.blur_probability},
          {"blur_kernel_fraction", a.blur_kernel_fraction},
          {"blur_sigma_min", a.blur_sigma_min},
          {"blur_sigma_max", a.blur_sigma_max},
          {"jitter_probability", a.jitter_probability},
          {"brightness", a.brightness},
          {"contrast", a.contrast},
          {"saturation", a.saturation},
          {"hue", a.hue},
          {"grayscale_probability", a.grayscale_probability},
          {"autocontrast_probability", a.autocontrast_probability}};
}

inline void read(ObjectReader r, AugmentationConfig& a) {
  r.read("crop_scale_min", a.crop_scale_min);
  r.read("crop_scale_max", a.crop_scale_max);
  r.read("blur_probability", a.blur_probability);
  r.read("blur_kernel_fraction", a.blur_kernel_fraction);
  r.read("blur_sigma_min", a.blur_sigma_min);
  r.read("blur_sigma_max", a.blur_sigma_max);
  r.read("jitter_probability", a.jitter_probability);
  r.read("brightness", a.brightness);
  r.read("contrast", a.contrast);
  r.read("saturation", a.saturation);
  r.read("hue", a.hue);
  r.read("grayscale_probability", a.grayscale_probability);
  r.read("autocontrast_probability", a.autocontrast_probability);
  r.finish();
}

inline Json to_json(const TrainConfig& t) {
  return {{"variant", to_string(t.variant)},
          {"iterations", t.iterations},
          {"batch_size", t.batch_size},
          {"accumulation_steps", t.accumulation_steps},
          {"lr", t.lr},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"tau", t.tau},
          {"multi_participant_batches", t.multi_participant_batches},
          {"divergence_threshold", t.divergence_threshold}};
}

inline void read(ObjectReader r, TrainConfig& t) {
  if (r.has("variant")) {
    std::string v;
    r.read("variant", v);
    t.variant = variant_from_string(v);
  } else {
    r.raw("variant");
  }
  r.read("iterations", t.iterations);
  r.read("batch_size", t.batch_size);
  r.read("accumulation_steps", t.accumulation_steps);
  r.read("lr", t.lr);
  r.read("momentum", t.momentum);
  r.read("weight_decay", t.weight_decay);
  r.read("tau", t.tau);
  r.read("multi_participant_batches", t.multi_participant_batches);
  r.read("divergence_threshold", t.divergence_threshold);
  r.finish();
}

inline Json to_json(const FinetuneConfig& f) {
  return {{"mode", f.mode},     {"epochs", f.epochs},     {"batch_size", f.batch_size},
          {"lr", f.lr},         {"momentum", f.momentum}, {"weight_decay", f.weight_decay}};
}

inline void read(ObjectReader r, FinetuneConfig& f) {
  r.read("mode", f.mode);
  r.read("epochs", f.epochs);
  r.read("batch_size", f.batch_size);
  r.read("lr", f.lr);
  r.read("momentum", f.momentum);
  r.read("weight_decay", f.weight_decay);
  r.finish();
}

inline Json to_json(const EvalConfig& e) {
  return {{"shots", e.shots},
          {"runs", e.runs},
          {"llt", {{"solver", e.llt.solver}, {"lambda", e.llt.lambda}}},
          {"ft",
           {{"subject_bias", e.finetune_bias.subject_bias},
            {"folds", e.finetune_bias.folds.to_json()},
            {"finetune", to_json(e.finetune_bias.finetune)}}},
          {"within",
           {{"train_subjects", e.within.train_subjects},
            {"validation_subjects", e.within.validation_subjects},
            {"fractions", e.within.fractions},
            {"runs", e.within.runs},
            {"finetune", to_json(e.within.finetune)}}}};
}

inline void read(ObjectReader r, EvalConfig& e) {
  r.read("shots", e.shots);
  r.read("runs", e.runs);
  {
    ObjectReader llt = r.child("llt");
    llt.read("solver", e.llt.solver);
    llt.read("lambda", e.llt.lambda);
    llt.finish();
  }
  {
    ObjectReader ft = r.child("ft");
    ft.read("subject_bias", e.finetune_bias.subject_bias);
    ObjectReader folds = ft.child("folds");
    e.finetune_bias.folds = FoldSpec::from_reader(folds);
    read(ft.child("finetune"), e.finetune_bias.finetune);
    ft.finish();
  }
  {
    ObjectReader w = r.child("within");
    w.read("train_subjects", e.within.train_subjects);
    w.read("validation_subjects", e.within.validation_subjects);
    w.read("fractions", e.within.fractions);
    w.read("runs", e.within.runs);
    read(w.child("finetune"), e.within.finetune);
    w.finish();
  }
  r.finish();
}

inline Json to_json(const DiagnosticsConfig& d) {
  return {{"mode", to_string(d.mode)},
          {"pairs", d.pairs},
          {"max_points", d.max_points},
          {"max_groups_per_subject", d.max_groups_per_subject},
          {"run_tsne", d.run_tsne},
          {"tsne",
           {{"perplexity", d.tsne.perplexity},
            {"iterations", d.tsne.iterations},
            {"learning_rate", d.tsne.learning_rate},
            {"early_exaggeration", d.tsne.early_exaggeration},
            {"exaggeration_iterations", d.tsne.exaggeration_iterations}}}};
}

inline void read(ObjectReader r, DiagnosticsConfig& d) {
  if (r.has("mode")) {
    std::string m;
    r.read("mode", m);
    d.mode = diagnostic_mode_from_string(m);
  } else {
    r.raw("mode");
  }
  r.read("pairs", d.pairs);
  r.read("max_points", d.max_points);
  r.read("max_groups_per_subject", d.max_groups_per_subject);
  r.read("run_tsne", d.run_tsne);
  ObjectReader t = r.child("tsne");
  t.read("perplexity", d.tsne.perplexity);
  t.read("iterations", d.tsne.iterations);
  t.read("learning_rate", d.tsne.learning_rate);
  t.read("early_exaggeration", d.tsne.early_exaggeration);
  t.read("exaggeration_iterations", d.tsne.exaggeration_iterations);
  t.finish();
  r.finish();
}

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  return {{"seed", c.seed ? Json(*c.seed) : Json(nullptr)},
          {"data", {{"views", c.data.views}}},
          {"augmentation", detail::to_json(c.augmentation)},
          {"model", to_json(c.model)},
          {"train", detail::to_json(c.train)},
          {"finetune", detail::to_json(c.finetune)},
          {"eval", detail::to_json(c.eval)},
          {"diagnostics", detail::to_json(c.diagnostics)},
          {"checkpoint_every", c.checkpoint_every}};
}

/// Strict parse: unknown keys and type mismatches raise ConfigError naming the key path.
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  if (const Json* s = r.raw("seed"); s && !s->is_null()) {
    if (!s->is_number_unsigned()) throw ConfigError("seed", "must be an unsigned integer");
    c.seed = s->get<std::uint64_t>();
  }
  {
    ObjectReader d = r.child("data");
    d.read("views", c.data.views);
    d.finish();
  }
  detail::read(r.child("augmentation"), c.augmentation);
  read_model_config(r.child("model"), c.model);
  detail::read(r.child("train"), c.train);
  detail::read(r.child("finetune"), c.finetune);
  detail::read(r.child("eval"), c.eval);
  detail::read(r.child("diagnostics"), c.diagnostics);
  r.read("checkpoint_every", c.checkpoint_every);
  r.finish();
  return c;
}

/// Applies one "dotted.key=value" override in place. The value is parsed as
/// JSON when possible and taken as a plain string otherwise.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must have the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  Json* node = &j;
  std::string path;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].empty()) throw ConfigError(key, "empty key segment");
    path += (path.empty() ? "" : ".") + parts[i];
    if (!node->is_object()) throw ConfigError(path, "cannot set a field inside a non-object value");
    if (i + 1 == parts.size()) {
      (*node)[parts[i]] = value;
    } else {
      node = &(*node)[parts[i]];
      if (node->is_null()) *node = Json::object();
    }
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string(), "cannot open configuration file");
  Json j = Json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
  return j;
}

/// Config file (optional) + overrides + seed resolution + validation.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& file,
                                 const std::vector<std::string>& overrides = {},
                                 std::optional<std::uint64_t> flag_seed = std::nullopt) {
  Json j = file ? read_json_file(*file) : Json::object();
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c = run_config_from_json(j);
  c.resolve(flag_seed);
  c.validate();
  return c;
}

}  // namespace gazeclr
