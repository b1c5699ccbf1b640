#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "gazeclr/cli.hpp"
#include "support/scratch.hpp"

namespace gazeclr {
namespace {

namespace fs = std::filesystem;

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "gazeclr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Json read_json(const fs::path& p) { return Json::parse(slurp(p)); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    unsetenv("GAZECLR_SEED");
    dir_ = new testing::ScratchDir("cli");
    data_ = (dir_->path() / "data").string();
    const auto r = run({"synth", "--out", data_, "--participants", "3", "--groups", "12", "--views", "3", "--seed",
                        "5"});
    ASSERT_EQ(r.code, 0) << r.err;
    ckpt_ = (dir_->path() / "base" / "checkpoints" / "final").string();
    const auto p = run(pretrain_args("base"));
    ASSERT_EQ(p.code, 0) << p.err;
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }

  static std::string out(const std::string& name) { return (dir_->path() / name).string(); }

  static std::vector<std::string> pretrain_args(const std::string& name, const std::string& variant = "equiv") {
    return {"pretrain", "--data", data_, "--out", out(name), "--variant", variant, "--set", "train.iterations=3",
            "--set", "train.batch_size=4", "--seed", "2"};
  }

  static testing::ScratchDir* dir_;
  static std::string data_, ckpt_;
};

testing::ScratchDir* CliTest::dir_ = nullptr;
std::string CliTest::data_, CliTest::ckpt_;

TEST_F(CliTest, SynthWritesRequestedCounts) {
  const auto m = load_manifest(fs::path(data_) / "manifest.jsonl");
  EXPECT_EQ(m.participants().size(), 3u);
  EXPECT_EQ(m.groups.size(), 36u);
  EXPECT_EQ(m.views.size(), 3u);
  EXPECT_TRUE(fs::exists(fs::path(data_) / "config.snapshot"));
}

TEST_F(CliTest, SynthIsDeterministic) {
  ASSERT_EQ(run({"synth", "--out", out("s1"), "--participants", "2", "--groups", "3", "--seed", "9"}).code, 0);
  ASSERT_EQ(run({"synth", "--out", out("s2"), "--participants", "2", "--groups", "3", "--seed", "9"}).code, 0);
  EXPECT_EQ(slurp(fs::path(out("s1")) / "manifest.jsonl"), slurp(fs::path(out("s2")) / "manifest.jsonl"));
  const auto m = load_manifest(fs::path(out("s1")) / "manifest.jsonl");
  EXPECT_EQ(m.views.size(), 4u);
  const ImageU8 a = read_png(fs::path(out("s1")) / m.records[0].image_path);
  const ImageU8 b = read_png(fs::path(out("s2")) / m.records[0].image_path);
  EXPECT_EQ(a.data, b.data);
  EXPECT_EQ(a.width, 64);
}

TEST_F(CliTest, SynthRejectsSingleView) {
  EXPECT_EQ(run({"synth", "--out", out("s3"), "--views", "1"}).code, cli::kData);
}

TEST_F(CliTest, PretrainLayoutAndMetadata) {
  const fs::path base = out("base");
  for (const char* p : {"config.snapshot", "checkpoints/final.json", "checkpoints/final.bin", "traces/pretrain.jsonl",
                        "reports/pretrain.json"}) {
    EXPECT_TRUE(fs::exists(base / p)) << p;
  }
  const Json meta = read_json(base / "reports" / "pretrain.json");
  EXPECT_EQ(meta.at("variant"), "equiv");
  EXPECT_EQ(meta.at("single_view_pairs"), 0);
  EXPECT_GT(meta.at("multi_view_pairs").get<int>(), 0);
  const Json snap = read_json(base / "config.snapshot");
  EXPECT_EQ(snap.at("config").at("seed"), 2);
  EXPECT_EQ(snap.at("config").at("train").at("iterations"), 3);
}

TEST_F(CliTest, InvEquivBuildsSingleViewPairs) {
  ASSERT_EQ(run(pretrain_args("inv", "inv+equiv")).code, 0);
  const Json meta = read_json(fs::path(out("inv")) / "reports" / "pretrain.json");
  EXPECT_EQ(meta.at("variant"), "inv+equiv");
  EXPECT_GT(meta.at("single_view_pairs").get<int>(), 0);
}

TEST_F(CliTest, PretrainIsReproducible) {
  ASSERT_EQ(run(pretrain_args("rep")).code, 0);
  EXPECT_EQ(slurp(fs::path(out("base")) / "traces" / "pretrain.jsonl"),
            slurp(fs::path(out("rep")) / "traces" / "pretrain.jsonl"));
  EXPECT_EQ(slurp(fs::path(out("base")) / "checkpoints" / "final.bin"),
            slurp(fs::path(out("rep")) / "checkpoints" / "final.bin"));
}

TEST_F(CliTest, PretrainUsageAndConfigErrors) {
  EXPECT_EQ(run({"pretrain", "--out", out("x")}).code, cli::kUsage);
  EXPECT_EQ(run({"pretrain", "--data", data_, "--out", out("x"), "--variant", "simclr"}).code, cli::kUsage);
  EXPECT_EQ(run({}).code, cli::kUsage);
  const auto bad = run({"pretrain", "--data", data_, "--out", out("x"), "--set", "train.lrate=1"});
  EXPECT_EQ(bad.code, cli::kConfig);
  EXPECT_NE(bad.err.find("train.lrate"), std::string::npos);
  EXPECT_EQ(run({"pretrain", "--data", out("missing"), "--out", out("x")}).code, cli::kData);
}

TEST_F(CliTest, DivergenceGuardExitCode) {
  auto args = pretrain_args("div");
  args.insert(args.end(), {"--set", "train.divergence_threshold=0.001"});
  EXPECT_EQ(run(args).code, cli::kDivergence);
}

TEST_F(CliTest, ResumesFromInit) {
  auto args = pretrain_args("resumed");
  args.insert(args.end(), {"--init", ckpt_});
  ASSERT_EQ(run(args).code, 0);
  const auto fresh = read_trace_file(fs::path(out("base")) / "traces" / "pretrain.jsonl");
  const auto resumed = read_trace_file(fs::path(out("resumed")) / "traces" / "pretrain.jsonl");
  ASSERT_EQ(resumed.size(), fresh.size());
  EXPECT_NE(resumed[0].loss, fresh[0].loss);
  EXPECT_EQ(read_json(fs::path(out("resumed")) / "config.snapshot").at("inputs").at("init"), ckpt_);
  auto wrong = pretrain_args("wrong");
  wrong.insert(wrong.end(), {"--init", ckpt_, "--set", "model.heads.hidden_dim=64"});
  EXPECT_EQ(run(wrong).code, cli::kData);
}

TEST_F(CliTest, EvalLltMatchesLibrary) {
  ASSERT_EQ(run({"eval", "--protocol", "llt", "--ckpt", ckpt_, "--data", data_, "--shots", "3,5", "--runs", "2",
                 "--seed", "4", "--out", out("llt")})
                .code,
            0);
  const auto reports = reports_from_json(read_json(fs::path(out("llt")) / "reports" / "llt.json"));
  ASSERT_EQ(reports.size(), 2u);
  auto loaded = load_checkpoint(ckpt_);
  const auto m = load_manifest(fs::path(data_) / "manifest.jsonl");
  ImageStore store(m.root);
  const std::vector<int> shots{3, 5};
  const auto direct = eval_llt(loaded.model, m, store, shots, 2, 4);
  EXPECT_EQ(reports_to_json(reports), reports_to_json(direct));
}

TEST_F(CliTest, EvalFinetuneBiasDispatch) {
  const auto r = run({"eval", "--protocol", "ft", "--ckpt", ckpt_, "--data", data_, "--shots", "0,3", "--runs", "2",
                      "--set", "eval.ft.finetune.epochs=1", "--out", out("ft")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto reports = reports_from_json(read_json(fs::path(out("ft")) / "reports" / "ft.json"));
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_EQ(reports[0].protocol, "ft");
  EXPECT_EQ(reports[0].per_subject.size(), 3u);
}

TEST_F(CliTest, EvalWithinDispatch) {
  const auto r = run({"eval", "--protocol", "within", "--ckpt", ckpt_, "--data", data_, "--set",
                      "eval.within.fractions=[0.5,1.0]", "--set", "eval.within.finetune.epochs=1", "--out",
                      out("within")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto reports = reports_from_json(read_json(fs::path(out("within")) / "reports" / "within.json"));
  ASSERT_EQ(reports.size(), 2u);
  EXPECT_DOUBLE_EQ(*reports[0].fraction, 0.5);
}

TEST_F(CliTest, EvalUnknownProtocolIsUsageError) {
  EXPECT_EQ(run({"eval", "--protocol", "zero", "--ckpt", ckpt_, "--data", data_, "--out", out("e")}).code,
            cli::kUsage);
  EXPECT_EQ(run({"eval", "--protocol", "llt", "--ckpt", out("nope"), "--data", data_, "--out", out("e")}).code,
            cli::kData);
}

TEST_F(CliTest, DiagnoseAndPlot) {
  ASSERT_EQ(run({"diagnose", "--ckpt", ckpt_, "--data", data_, "--set", "diagnostics.tsne.iterations=50", "--out",
                 out("diag")})
                .code,
            0);
  const fs::path diag = fs::path(out("diag")) / "reports" / "diagnostics.json";
  const auto bundle = DiagnosticsBundle::from_json(read_json(diag));
  EXPECT_FALSE(bundle.projection.empty());
  for (const char* name : {"plot1", "plot2"}) {
    const auto r = run({"plot", "--diagnostics", diag.string(), "--trace",
                        (fs::path(out("base")) / "traces" / "pretrain.jsonl").string(), "--out", out(name)});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  for (const char* f : {"embedding_diagnostics.csv", "pog_diagnostics.svg", "loss_pretrain.csv"}) {
    EXPECT_EQ(slurp(fs::path(out("plot1")) / "plots" / f), slurp(fs::path(out("plot2")) / "plots" / f)) << f;
    EXPECT_FALSE(slurp(fs::path(out("plot1")) / "plots" / f).empty()) << f;
  }
}

TEST_F(CliTest, PlotInputErrors) {
  EXPECT_EQ(run({"plot", "--out", out("p")}).code, cli::kUsage);
  const fs::path empty = fs::path(out("empty.jsonl"));
  std::ofstream(empty).close();
  EXPECT_EQ(run({"plot", "--trace", empty.string(), "--out", out("p")}).code, cli::kData);
  const fs::path bad = fs::path(out("bad.jsonl"));
  std::ofstream(bad) << "{\"step\":0,\"loss\":1,\"lr\":0}\n{\"step\":1}\n";
  const auto r = run({"plot", "--trace", bad.string(), "--out", out("p")});
  EXPECT_EQ(r.code, cli::kData);
  EXPECT_NE(r.err.find(":2:"), std::string::npos);
}

TEST_F(CliTest, FinetuneWritesCheckpoint) {
  const auto r = run({"finetune", "--ckpt", ckpt_, "--data", data_, "--subjects", "p000,p001", "--validation", "p002",
                      "--set", "finetune.epochs=2", "--out", out("fin")});
  ASSERT_EQ(r.code, 0) << r.err;
  auto loaded = load_checkpoint(fs::path(out("fin")) / "checkpoints" / "finetuned");
  EXPECT_EQ(loaded.model.stage(), Stage::finetune);
  const std::string trace = slurp(fs::path(out("fin")) / "traces" / "finetune.jsonl");
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 2);
}

}  // namespace
}  // namespace gazeclr
