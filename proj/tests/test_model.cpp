#include <gtest/gtest.h>

#include <fstream>

#include "gazeclr/model.hpp"
#include "support/scratch.hpp"
#include "support/test_util.hpp"

namespace gazeclr {
namespace {

using testing::ScratchDir;

std::vector<Image> random_images(std::mt19937_64& rng, int n, int size) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) {
    Image img(size, size);
    for (auto& v : img.data) v = u(rng);
    out.push_back(std::move(img));
  }
  return out;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder.feature_dim = 24;
  c.encoder.widths = {8, 12};
  c.heads.hidden_dim = 32;
  c.heads.out_dim = 18;
  c.regressor.hidden_dim = 16;
  return c;
}

TEST(Encoder, ShapesAndDeterminism) {
  std::mt19937_64 rng(1);
  GazeModel<float> model(tiny_config(), 7);
  const auto images = random_images(rng, 5, 64);
  const auto f1 = model.encode(images);
  const auto f2 = model.encode(images, 2);
  ASSERT_EQ(f1.rows(), 5);
  ASSERT_EQ(f1.cols(), 24);
  EXPECT_TRUE(f1.allFinite());
  EXPECT_EQ(f1, model.encode(images));
  EXPECT_LT((f1 - f2).cwiseAbs().maxCoeff(), 1e-6f);  // chunking only changes summation order

  const auto empty = model.encode(std::span<const Image>{});
  EXPECT_EQ(empty.rows(), 0);
  EXPECT_EQ(empty.cols(), 24);

  const auto wrong = random_images(rng, 1, 32);
  EXPECT_THROW(model.encode(wrong), ShapeError);
}

TEST(Encoder, ConfigValidation) {
  ModelConfig c = tiny_config();
  c.encoder.input_size = 96;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.heads.out_dim = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.encoder.architecture = "vgg";
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.encoder.architecture = "resnet18";
  EXPECT_THROW(c.validate(), ConfigError);  // feature_dim must be 512
  c.encoder.feature_dim = 512;
  EXPECT_NO_THROW(c.validate());
}

TEST(Encoder, Resnet18Forward) {
  ModelConfig c;
  c.encoder.architecture = "resnet18";
  c.encoder.feature_dim = 512;
  GazeModel<float> model(c, 3);
  std::mt19937_64 rng(2);
  const auto images = random_images(rng, 2, 64);
  const auto f = model.encode(images);
  EXPECT_EQ(f.cols(), 512);
  EXPECT_TRUE(f.allFinite());
  std::size_t convs = 0;
  for (auto* p : model.encoder_parameters()) convs += p->name.find("conv") != std::string::npos;
  EXPECT_EQ(convs, 17u);  // stem + 16 block convolutions
}

TEST(Encoder, GradientMatchesFiniteDifference) {
  ModelConfig c = tiny_config();
  c.encoder.feature_dim = 4;
  c.encoder.widths = {3, 3};
  std::mt19937_64 rng(5);
  Encoder<double> enc(c.encoder, rng);
  const auto images = random_images(rng, 2, 64);
  const auto x = images_to_tensor<double>(images);
  const auto r = testing::random_matrix(rng, 2, 4);
  enc.forward(x, true);
  nn::ParameterList<double> ps;
  enc.collect(ps);
  nn::zero_grads(ps);
  enc.backward(r);
  const double h = 1e-6;
  for (auto* p : ps) {
    for (Eigen::Index i = 0; i < p->size(); i += 1 + p->size() / 7) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = enc.forward(x, true).cwiseProduct(r).sum();
      p->value[i] = orig - h;
      const double down = enc.forward(x, true).cwiseProduct(r).sum();
      p->value[i] = orig;
      EXPECT_NEAR(p->grad[i], (up - down) / (2 * h), 1e-6 * std::max(1.0, std::abs(p->grad[i]))) << p->name;
    }
  }
}

TEST(Heads, ProjectionShapes) {
  std::mt19937_64 rng(3);
  GazeModel<float> model(tiny_config(), 11);
  const auto f = model.encode(random_images(rng, 3, 64));
  const auto z = model.project_invariant(f);
  const auto zh = model.project_equivariant(f);
  EXPECT_EQ(z.rows(), 3);
  EXPECT_EQ(z.cols(), 18);
  EXPECT_EQ(zh.cols(), 18);
  EXPECT_EQ(equivariant_width(zh.cols()), 6);
  EXPECT_EQ(model.project_equivariant(f), zh);
  // flatten(reshape(x)) == x
  const Block3<float> block = as_block(zh, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 6; ++c) EXPECT_EQ(block(r, c), zh(1, r * 6 + c));
  EXPECT_EQ(equivariant_width(180), 60);
}

TEST(Heads, RotateEmbeddingProperties) {
  std::mt19937_64 rng(4);
  const Block3<double> a = testing::random_matrix(rng, 3, 60);
  const Block3<double> b = testing::random_matrix(rng, 3, 60);
  const RotationMatrix r1 = testing::random_rotation(rng), r2 = testing::random_rotation(rng);
  EXPECT_EQ(rotate_embedding(a, RotationMatrix::identity()), a);
  EXPECT_NEAR(rotate_embedding(a, r1).norm(), a.norm(), 1e-9);
  const Block3<double> composed = rotate_embedding(rotate_embedding(a, r1), r2);
  const RotationMatrix product(r2.matrix() * r1.matrix());
  EXPECT_LT((composed - rotate_embedding(a, product)).cwiseAbs().maxCoeff(), 1e-9);
  const double alpha = 0.7, beta = -1.3;
  const Block3<double> lhs = rotate_embedding<double>(alpha * a + beta * b, r1);
  const Block3<double> rhs = alpha * rotate_embedding(a, r1) + beta * rotate_embedding(b, r1);
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Regressor, StageTwoGraphAndOutputs) {
  std::mt19937_64 rng(5);
  GazeModel<float> model(tiny_config(), 13);
  EXPECT_EQ(model.module_names(), (std::vector<std::string>{"encoder", "p1", "p2"}));
  EXPECT_THROW(model.regressor(), InvalidArgument);
  model.attach_regressor(99);
  EXPECT_EQ(model.module_names(), (std::vector<std::string>{"encoder", "regressor"}));
  EXPECT_THROW(model.p1(), InvalidArgument);
  const auto f = model.encode(random_images(rng, 4, 64));
  const auto g = model.regress_gaze(f);
  ASSERT_EQ(g.size(), 4u);
  for (const auto& d : g) EXPECT_NEAR(d.vector().norm(), 1.0, 1e-12);
  const auto g2 = model.regress_gaze(f);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g[i].vector(), g2[i].vector());

  for (auto* p : model.head_parameters()) p->value.setZero();
  for (const auto& d : model.regress_gaze(f)) {
    EXPECT_EQ(d.vector(), Vec3(-0.0, -0.0, -1.0));
  }
}

TEST(Checkpoint, RoundTrip) {
  ScratchDir dir("ckpt");
  std::mt19937_64 rng(6);
  GazeModel<float> model(tiny_config(), 21);
  const auto probe = random_images(rng, 3, 64);
  const auto before = model.project_equivariant(model.encode(probe));
  CheckpointInfo info;
  info.step = 123;
  info.config = {{"seed", 5}};
  save_checkpoint(model, dir.path() / "ck", info);
  auto loaded = load_checkpoint(dir.path() / "ck.json");
  EXPECT_EQ(loaded.info.step, 123);
  EXPECT_EQ(loaded.info.config["seed"], 5);
  const auto after = loaded.model.project_equivariant(loaded.model.encode(probe));
  EXPECT_LE((before - after).cwiseAbs().maxCoeff(), 1e-6f);
  EXPECT_EQ(loaded.model.module_names(), model.module_names());

  model.attach_regressor(4);
  save_checkpoint(model, dir.path() / "ft", info);
  auto ft = load_checkpoint(dir.path() / "ft");
  EXPECT_EQ(ft.model.module_names(), (std::vector<std::string>{"encoder", "regressor"}));
  EXPECT_EQ(ft.model.regress_pitch_yaw(ft.model.encode(probe)), model.regress_pitch_yaw(model.encode(probe)));
}

TEST(Checkpoint, ResNetBuffersRoundTrip) {
  ScratchDir dir("ckpt_bn");
  ModelConfig c;
  c.encoder.architecture = "resnet18";
  c.encoder.feature_dim = 512;
  GazeModel<float> model(c, 1);
  for (auto* p : model.encoder_parameters()) {
    if (!p->trainable) p->value.setConstant(p->name.find("var") != std::string::npos ? 2.0f : 0.1f);
  }
  std::mt19937_64 rng(8);
  const auto probe = random_images(rng, 1, 64);
  const auto before = model.encode(probe);
  save_checkpoint(model, dir.path() / "r", {});
  auto loaded = load_checkpoint(dir.path() / "r");
  EXPECT_LE((before - loaded.model.encode(probe)).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(Checkpoint, TruncatedBlobIsIntegrityError) {
  ScratchDir dir("trunc");
  GazeModel<float> model(tiny_config(), 1);
  save_checkpoint(model, dir.path() / "ck", {});
  const auto bin = dir.path() / "ck.bin";
  std::filesystem::resize_file(bin, std::filesystem::file_size(bin) - 8);
  EXPECT_THROW(load_checkpoint(dir.path() / "ck"), IntegrityError);
}

TEST(Checkpoint, CorruptBlobIsIntegrityError) {
  ScratchDir dir("corrupt");
  GazeModel<float> model(tiny_config(), 1);
  save_checkpoint(model, dir.path() / "ck", {});
  std::fstream f(dir.path() / "ck.bin", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(100);
  f.put('\x7f');
  f.close();
  EXPECT_THROW(load_checkpoint(dir.path() / "ck"), IntegrityError);
}

TEST(Checkpoint, MismatchIsIncompatible) {
  ScratchDir dir("mismatch");
  GazeModel<float> model(tiny_config(), 1);
  save_checkpoint(model, dir.path() / "ck", {});
  ModelConfig other = tiny_config();
  other.encoder.feature_dim = 32;
  EXPECT_THROW(load_checkpoint(dir.path() / "ck", &other), IncompatibleCheckpointError);
  const ModelConfig same = tiny_config();
  EXPECT_NO_THROW(load_checkpoint(dir.path() / "ck", &same));

  std::ifstream in(dir.path() / "ck.json");
  Json side = Json::parse(in);
  in.close();
  side["format_version"] = 99;
  std::ofstream(dir.path() / "ck.json") << side.dump();
  EXPECT_THROW(load_checkpoint(dir.path() / "ck"), IncompatibleCheckpointError);
}

}  // namespace
}  // namespace gazeclr
