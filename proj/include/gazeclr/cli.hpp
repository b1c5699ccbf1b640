#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "gazeclr/config.hpp"
#include "gazeclr/data.hpp"
#include "gazeclr/errors.hpp"
#include "gazeclr/evaluation.hpp"
#include "gazeclr/model.hpp"
#include "gazeclr/plot.hpp"
#include "gazeclr/synth.hpp"
#include "gazeclr/training.hpp"

namespace gazeclr::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kConfig = 3, kData = 4, kDivergence = 5 };

/// Thrown for argument combinations CLI11 cannot express.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Output directory with the fixed layout.
struct OutputLayout {
  fs::path root;
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path traces() const { return root / "traces"; }
  fs::path reports() const { return root / "reports"; }
  fs::path plots() const { return root / "plots"; }

  void write_snapshot(const Json& snapshot) const {
    fs::create_directories(root);
    detail::write_text(root / "config.snapshot", snapshot.dump(2) + "\n");
  }
  void write_json(const fs::path& path, const Json& j) const { detail::write_text(path, j.dump(2) + "\n"); }
};

inline fs::path manifest_path(const fs::path& data) {
  return fs::is_directory(data) ? data / "manifest.jsonl" : data;
}

inline DatasetManifest load_data(const fs::path& data, const RunConfig& cfg) {
  ManifestOptions opts;
  opts.views = cfg.data.views;
  return load_manifest(manifest_path(data), opts);
}

struct CommonArgs {
  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;

  RunConfig load() const {
    return load_run_config(config ? std::optional<fs::path>(*config) : std::nullopt, sets, seed);
  }
};

inline Json snapshot(const std::string& command, const RunConfig& cfg, const Json& inputs) {
  return {{"command", command}, {"config", to_json(cfg)}, {"inputs", inputs}};
}

inline void write_epoch_trace(const fs::path& path, const std::vector<EpochRecord>& trace) {
  std::ostringstream os;
  for (const auto& e : trace) {
    os << Json{{"epoch", e.epoch}, {"loss", e.loss}, {"lr", e.lr},
               {"val_mae", e.val_mae ? Json(*e.val_mae) : Json(nullptr)}}
              .dump()
       << '\n';
  }
  detail::write_text(path, os.str());
}

// ------------------------------------------------------------------ commands

struct SynthArgs {
  std::string out;
  int participants = 5, groups = 400, views = 4, size = 64;
  std::uint64_t seed = 0;
  std::string prefix = "p";
};

inline int cmd_synth(const SynthArgs& a, std::ostream& log) {
  SynthConfig sc;
  sc.participants = a.participants;
  sc.groups_per_participant = a.groups;
  sc.views = a.views;
  sc.image_size = a.size;
  sc.seed = a.seed;
  sc.participant_prefix = a.prefix;
  sc.validate();
  const auto m = synth_generate(a.out, sc);
  OutputLayout{a.out}.write_snapshot({{"command", "synth"},
                                      {"synth",
                                       {{"participants", a.participants}, {"groups", a.groups}, {"views", a.views},
                                        {"size", a.size}, {"seed", a.seed}, {"prefix", a.prefix}}}});
  log << "wrote " << m.records.size() << " images in " << m.groups.size() << " groups to " << a.out << "\n";
  return kOk;
}

struct PretrainArgs {
  CommonArgs common;
  std::string data;
  std::optional<std::string> variant;
  std::optional<std::string> init;
};

inline int cmd_pretrain(const PretrainArgs& a, std::ostream& log) {
  auto sets = a.common.sets;
  if (a.variant) sets.push_back("train.variant=" + *a.variant);
  CommonArgs common = a.common;
  common.sets = sets;
  RunConfig cfg = common.load();
  const DatasetManifest m = load_data(a.data, cfg);
  ImageStore store(m.root);

  OutputLayout out{a.common.out};
  const Json snap = snapshot("pretrain", cfg, {{"data", a.data}, {"init", a.init ? Json(*a.init) : Json(nullptr)}});
  out.write_snapshot(snap);

  GazeModel<float> model = [&] {
    if (!a.init) return GazeModel<float>(cfg.model, *cfg.seed);
    auto loaded = load_checkpoint(*a.init, &cfg.model);
    if (loaded.model.stage() != Stage::pretrain) {
      throw IncompatibleCheckpointError("--init checkpoint has no projection heads");
    }
    return std::move(loaded.model);
  }();

  fs::create_directories(out.traces());
  std::ofstream trace(out.traces() / "pretrain.jsonl");
  if (!trace) throw DataError("cannot write trace under '" + out.traces().string() + "'");
  const long every = std::max<long>(1, cfg.train.iterations / 20);
  PretrainHooks hooks;
  hooks.on_step = [&](const TraceRecord& r) {
    write_trace_jsonl(trace, {r});
    trace.flush();
    if (r.step % every == 0 || r.step + 1 == cfg.train.iterations) {
      log << "step " << r.step << " loss " << detail::num(r.loss) << " lr " << detail::num(r.lr) << "\n";
    }
  };
  hooks.checkpoint_every = cfg.checkpoint_every;
  hooks.on_checkpoint = [&](long step) {
    save_checkpoint(model, out.checkpoints() / ("step_" + std::to_string(step)), {step, snap});
  };
  const PretrainResult res = pretrain(m, store, model, cfg.train, hooks);
  save_checkpoint(model, out.checkpoints() / "final", {cfg.train.iterations, snap});
  out.write_json(out.reports() / "pretrain.json",
                 {{"variant", to_string(cfg.train.variant)},
                  {"iterations", cfg.train.iterations},
                  {"single_view_pairs", res.single_view_pairs},
                  {"multi_view_pairs", res.multi_view_pairs},
                  {"batches_per_epoch", res.stream.batches_per_epoch},
                  {"skipped_participants", res.stream.skipped},
                  {"final_loss", res.trace.empty() ? Json(nullptr) : Json(res.trace.back().loss)}});
  log << "checkpoint " << (out.checkpoints() / "final").string() << "\n";
  return kOk;
}

struct EvalArgs {
  CommonArgs common;
  std::string protocol;
  std::string ckpt;
  std::string data;
  std::vector<int> shots;
  std::optional<int> runs;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& log) {
  RunConfig cfg = a.common.load();
  const std::vector<int> shots = a.shots.empty() ? cfg.eval.shots : a.shots;
  const int runs = a.runs ? *a.runs : cfg.eval.runs;
  if (runs < 1) throw UsageError("--runs must be at least 1");
  const DatasetManifest m = load_data(a.data, cfg);
  ImageStore store(m.root);
  OutputLayout out{a.common.out};
  out.write_snapshot(snapshot("eval", cfg,
                              {{"protocol", a.protocol}, {"ckpt", a.ckpt}, {"data", a.data}, {"shots", shots},
                               {"runs", runs}}));
  const std::uint64_t seed = *cfg.seed;
  std::vector<EvalReport> reports;
  if (a.protocol == "llt") {
    auto loaded = load_checkpoint(a.ckpt);
    reports = eval_llt(loaded.model, m, store, shots, runs, seed, cfg.eval.llt);
  } else if (a.protocol == "ft") {
    const fs::path ckpt = a.ckpt;
    ModelFactory factory = [ckpt] { return std::move(load_checkpoint(ckpt).model); };
    reports = eval_finetune_bias(factory, m, store, shots, runs, seed, cfg.eval.finetune_bias);
  } else if (a.protocol == "within") {
    auto loaded = load_checkpoint(a.ckpt);
    WithinConfig wc = cfg.eval.within;
    if (a.runs) wc.runs = *a.runs;
    reports = eval_within(loaded.model, m, store, wc, seed);
  } else {
    throw UsageError("unknown protocol '" + a.protocol + "'");
  }
  out.write_json(out.reports() / (a.protocol + ".json"), reports_to_json(reports));
  for (const auto& r : reports) {
    log << r.protocol << " k=" << r.k;
    if (r.fraction) log << " fraction=" << detail::num(*r.fraction);
    log << " MAE " << detail::num(r.mean) << " +/- " << detail::num(r.std) << " deg\n";
    for (const auto& w : r.warnings) log << "warning: " << w << "\n";
  }
  return kOk;
}

struct DiagnoseArgs {
  CommonArgs common;
  std::string ckpt;
  std::string data;
  std::optional<std::string> mode;
};

inline int cmd_diagnose(const DiagnoseArgs& a, std::ostream& log) {
  CommonArgs common = a.common;
  if (a.mode) common.sets.push_back("diagnostics.mode=" + *a.mode);
  RunConfig cfg = common.load();
  const DatasetManifest m = load_data(a.data, cfg);
  ImageStore store(m.root);
  OutputLayout out{a.common.out};
  out.write_snapshot(snapshot("diagnose", cfg, {{"ckpt", a.ckpt}, {"data", a.data}}));
  auto loaded = load_checkpoint(a.ckpt);
  const DiagnosticsBundle d = embed_diagnostics(loaded.model, m, store, cfg.diagnostics);
  out.write_json(out.reports() / "diagnostics.json", d.to_json());
  auto show = [](const std::optional<double>& v) { return v ? detail::num(*v) : std::string("n/a"); };
  log << "same-timestamp distance " << show(d.same_timestamp_distance) << ", mismatched "
      << show(d.mismatched_timestamp_distance) << "\n"
      << "embedding/PoG correlation " << show(d.embedding_correlation.r) << " (" << d.embedding_correlation.status
      << ")\n";
  for (const auto& n : d.notices) log << "notice: " << n << "\n";
  return kOk;
}

struct FinetuneArgs {
  CommonArgs common;
  std::string ckpt;
  std::string data;
  std::vector<std::string> subjects;
  std::vector<std::string> validation;
};

inline int cmd_finetune(const FinetuneArgs& a, std::ostream& log) {
  RunConfig cfg = a.common.load();
  const DatasetManifest m = load_data(a.data, cfg);
  ImageStore store(m.root);
  OutputLayout out{a.common.out};
  const Json snap = snapshot("finetune", cfg, {{"ckpt", a.ckpt}, {"data", a.data}, {"subjects", a.subjects},
                                               {"validation", a.validation}});
  out.write_snapshot(snap);
  auto loaded = load_checkpoint(a.ckpt);
  GazeModel<float>& model = loaded.model;
  if (model.stage() == Stage::pretrain) model.attach_regressor(*cfg.seed);
  const auto frames = frames_of(m, a.subjects);
  if (frames.empty()) throw DataError("finetune: no labelled frames selected");
  const auto val = a.validation.empty() ? std::vector<FrameRef>{} : frames_of(m, a.validation);
  const FinetuneResult res = finetune(model, m, store, frames, cfg.finetune, val);
  write_epoch_trace(out.traces() / "finetune.jsonl", res.trace);
  save_checkpoint(model, out.checkpoints() / "finetuned", {static_cast<long>(res.trace.size()), snap});
  if (!res.trace.empty()) {
    const auto& last = res.trace.back();
    log << "epoch " << last.epoch << " training MAE " << detail::num(last.loss) << " deg";
    if (last.val_mae) log << ", validation MAE " << detail::num(*last.val_mae) << " deg";
    log << "\n";
  }
  return kOk;
}

struct PlotArgs {
  std::string out;
  std::vector<std::string> traces, reports, diagnostics;
};

inline int cmd_plot(const PlotArgs& a, std::ostream& log) {
  if (a.traces.empty() && a.reports.empty() && a.diagnostics.empty()) {
    throw UsageError("plot needs at least one of --trace, --report, --diagnostics");
  }
  OutputLayout out{a.out};
  out.write_snapshot({{"command", "plot"},
                      {"inputs", {{"trace", a.traces}, {"report", a.reports}, {"diagnostics", a.diagnostics}}}});
  auto stem = [](const std::string& p) { return fs::path(p).stem().string(); };
  auto read_doc = [](const std::string& p) {
    std::ifstream in(p);
    if (!in) throw DataError("cannot open '" + p + "'");
    Json j = Json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("'" + p + "' is not valid JSON");
    return j;
  };
  std::size_t written = 0;
  for (const auto& t : a.traces) {
    plot_loss_curve(read_trace_file(t)).save(out.plots(), "loss_" + stem(t));
    ++written;
  }
  for (const auto& r : a.reports) {
    const auto reports = reports_from_json(read_doc(r));
    plot_mae_vs_shots(reports).save(out.plots(), "mae_vs_shots_" + stem(r));
    ++written;
    if (std::any_of(reports.begin(), reports.end(), [](const EvalReport& e) { return e.fraction.has_value(); })) {
      plot_fraction_curve(reports).save(out.plots(), "fraction_" + stem(r));
      ++written;
    }
  }
  for (const auto& d : a.diagnostics) {
    const auto bundle = DiagnosticsBundle::from_json(read_doc(d));
    plot_embedding_scatter(bundle).save(out.plots(), "embedding_" + stem(d));
    ++written;
    if (!bundle.pairs.empty()) {
      plot_pog_scatter(bundle).save(out.plots(), "pog_" + stem(d));
      ++written;
    } else {
      log << "notice: " << d << " has no PoG pairs, skipping the PoG scatter\n";
    }
  }
  log << "wrote " << written << " plots to " << out.plots().string() << "\n";
  return kOk;
}

// ------------------------------------------------------------------ dispatch

inline void add_common(CLI::App* sub, CommonArgs& c, bool with_config = true) {
  sub->add_option("--out", c.out, "Output directory")->required();
  if (with_config) {
    sub->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--set", c.sets, "Override a config value: dotted.key=value (repeatable)");
  }
  sub->add_option("--seed", c.seed, "Seed (overrides config and GAZECLR_SEED)");
}

/// Runs one command line; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-view contrastive gaze representation learning", "gazeclr"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic multi-view dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--participants", synth.participants, "Number of participants");
  s->add_option("--groups", synth.groups, "Timestamp groups per participant");
  s->add_option("--views", synth.views, "Camera views");
  s->add_option("--size", synth.size, "Image side in pixels");
  s->add_option("--seed", synth.seed, "Generator seed");
  s->add_option("--prefix", synth.prefix, "Participant id prefix");

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Contrastive pre-training");
  add_common(p, pre.common);
  p->add_option("--data", pre.data, "Manifest file or dataset directory")->required();
  p->add_option("--variant", pre.variant, "equiv | inv+equiv")->check(CLI::IsMember({"equiv", "inv+equiv"}));
  p->add_option("--init", pre.init, "Checkpoint to resume from");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(e, ev.common);
  e->add_option("--protocol", ev.protocol, "within | llt | ft")
      ->required()
      ->check(CLI::IsMember({"within", "llt", "ft"}));
  e->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  e->add_option("--data", ev.data, "Manifest file or dataset directory")->required();
  e->add_option("--shots", ev.shots, "Calibration sample counts, comma separated")->delimiter(',');
  e->add_option("--runs", ev.runs, "Repetitions per setting");

  DiagnoseArgs dg;
  auto* d = app.add_subcommand("diagnose", "Embedding diagnostics");
  add_common(d, dg.common);
  d->add_option("--ckpt", dg.ckpt, "Checkpoint path")->required();
  d->add_option("--data", dg.data, "Manifest file or dataset directory")->required();
  d->add_option("--mode", dg.mode, "equivariant | encoder")->check(CLI::IsMember({"equivariant", "encoder"}));

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Stage-II gaze regression training");
  add_common(f, ft.common);
  f->add_option("--ckpt", ft.ckpt, "Checkpoint path")->required();
  f->add_option("--data", ft.data, "Manifest file or dataset directory")->required();
  f->add_option("--subjects", ft.subjects, "Training participants (default: all)")->delimiter(',');
  f->add_option("--validation", ft.validation, "Validation participants")->delimiter(',');

  PlotArgs pl;
  auto* g = app.add_subcommand("plot", "Render figures and data tables");
  g->add_option("--out", pl.out, "Output directory")->required();
  g->add_option("--trace", pl.traces, "Loss trace (JSON lines)");
  g->add_option("--report", pl.reports, "Evaluation report document");
  g->add_option("--diagnostics", pl.diagnostics, "Diagnostics document");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    log << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    log << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "usage error: " << ex.what() << "\n" << "run 'gazeclr --help' for usage\n";
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(synth, log);
    if (p->parsed()) return cmd_pretrain(pre, log);
    if (e->parsed()) return cmd_eval(ev, log);
    if (d->parsed()) return cmd_diagnose(dg, log);
    if (f->parsed()) return cmd_finetune(ft, log);
    if (g->parsed()) return cmd_plot(pl, log);
  } catch (const UsageError& ex) {
    err << "usage error: " << ex.what() << "\n";
    return kUsage;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& ex) {
    err << "diverged: " << ex.what() << "\n";
    return kDivergence;
  } catch (const DataError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const ParseError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const CheckpointError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const InsufficientViewsError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const EmptyBatchError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const MissingViewError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const EmptyPlotError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

}  // namespace gazeclr::cli
