#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "gazeclr/nn/layers.hpp"
#include "gazeclr/nn/mlp.hpp"
#include "gazeclr/nn/optim.hpp"

namespace gazeclr::nn {
namespace {

using D = double;

Tensor<D> random_tensor(std::mt19937_64& rng, int c, int n, int h, int w) {
  std::normal_distribution<double> dist;
  Tensor<D> t(c, n, h, w);
  for (auto& v : t.data) v = dist(rng);
  return t;
}

double weighted_sum(const Tensor<D>& y, const Tensor<D>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.data.size(); ++i) s += y.data[i] * r.data[i];
  return s;
}

// Checks input and parameter gradients of `layer` against central differences
// of L = sum(y * r) for a fixed random r.
void check_layer(Layer<D>& layer, Tensor<D> x, std::mt19937_64& rng, bool check_input = true,
                 double step = 1e-6, double tol = 1e-6) {
  Tensor<D> y = layer.forward(x, true);
  const Tensor<D> r = random_tensor(rng, y.channels, y.batch, y.height, y.width);
  ParameterList<D> params;
  layer.collect(params);
  zero_grads(params);
  const Tensor<D> dx = layer.backward(r);

  auto loss = [&](const Tensor<D>& in) {
    Layer<D>& l = layer;
    // Training-mode forward so batch statistics match the analytic pass.
    ParameterList<D> ps;
    l.collect(ps);
    std::vector<Eigen::VectorXd> saved;
    for (auto* p : ps) saved.push_back(p->value);  // running stats drift in train mode
    const double v = weighted_sum(l.forward(in, true), r);
    l.release();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i]->trainable) ps[i]->value = saved[i];
    }
    return v;
  };

  if (check_input) {
    for (std::size_t i = 0; i < x.data.size(); i += 1 + x.data.size() / 40) {
      const double orig = x.data[i];
      x.data[i] = orig + step;
      const double up = loss(x);
      x.data[i] = orig - step;
      const double down = loss(x);
      x.data[i] = orig;
      const double fd = (up - down) / (2 * step);
      ASSERT_NEAR(dx.data[i], fd, tol * std::max(1.0, std::abs(fd))) << layer.kind() << " input " << i;
    }
  }
  for (auto* p : params) {
    if (!p->trainable) continue;
    for (Eigen::Index i = 0; i < p->size(); i += 1 + p->size() / 20) {
      const double orig = p->value[i];
      p->value[i] = orig + step;
      const double up = loss(x);
      p->value[i] = orig - step;
      const double down = loss(x);
      p->value[i] = orig;
      const double fd = (up - down) / (2 * step);
      ASSERT_NEAR(p->grad[i], fd, tol * std::max(1.0, std::abs(fd))) << p->name << "[" << i << "]";
    }
  }
}

TEST(Conv2d, GradientsStrideTwoPadded) {
  std::mt19937_64 rng(1);
  Conv2d<D> conv("c", 3, 4, 3, 2, 1, true, rng);
  check_layer(conv, random_tensor(rng, 3, 2, 7, 6), rng);
}

TEST(Conv2d, GradientsPointwise) {
  std::mt19937_64 rng(2);
  Conv2d<D> conv("c", 2, 3, 1, 1, 0, false, rng);
  check_layer(conv, random_tensor(rng, 2, 3, 4, 4), rng);
}

TEST(Conv2d, MatchesDirectConvolution) {
  std::mt19937_64 rng(3);
  Conv2d<D> conv("c", 2, 3, 3, 2, 1, true, rng);
  ParameterList<D> ps;
  conv.collect(ps);
  const Tensor<D> x = random_tensor(rng, 2, 2, 5, 5);
  const Tensor<D> y = conv.forward(x, false);
  ASSERT_EQ(y.height, 3);
  ASSERT_EQ(y.width, 3);
  for (int co = 0; co < 3; ++co) {
    for (int n = 0; n < 2; ++n) {
      for (int oy = 0; oy < 3; ++oy) {
        for (int ox = 0; ox < 3; ++ox) {
          double acc = ps[1]->value[co];
          for (int ci = 0; ci < 2; ++ci) {
            for (int ky = 0; ky < 3; ++ky) {
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                acc += ps[0]->value[((co * 2 + ci) * 3 + ky) * 3 + kx] * x.at(ci, n, iy, ix);
              }
            }
          }
          EXPECT_NEAR(y.at(co, n, oy, ox), acc, 1e-12);
        }
      }
    }
  }
}

TEST(BatchNorm2d, Gradients) {
  std::mt19937_64 rng(4);
  BatchNorm2d<D> bn("bn", 3);
  ParameterList<D> ps;
  bn.collect(ps);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < 3; ++i) {
    ps[0]->value[i] = 1.0 + 0.3 * n(rng);
    ps[1]->value[i] = 0.2 * n(rng);
  }
  check_layer(bn, random_tensor(rng, 3, 4, 3, 3), rng, true, 1e-5, 1e-5);
}

TEST(BatchNorm2d, EvalUsesRunningStatistics) {
  std::mt19937_64 rng(5);
  BatchNorm2d<D> bn("bn", 2);
  const Tensor<D> x = random_tensor(rng, 2, 3, 2, 2);
  // Fresh running stats (mean 0, var 1) make eval mode an affine identity.
  const Tensor<D> y = bn.forward(x, false);
  for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(y.data[i], x.data[i] / std::sqrt(1.0 + 1e-5), 1e-12);
  bn.forward(x, true);
  ParameterList<D> ps;
  bn.collect(ps);
  EXPECT_NE(ps[2]->value[0], 0.0);
}

TEST(MaxPool2d, Gradients) {
  std::mt19937_64 rng(6);
  MaxPool2d<D> pool(3, 2, 1);
  check_layer(pool, random_tensor(rng, 2, 2, 6, 6), rng);
}

TEST(BasicBlock, GradientsWithProjection) {
  std::mt19937_64 rng(7);
  BasicBlock<D> block("b", 2, 3, 2, rng);
  check_layer(block, random_tensor(rng, 2, 3, 5, 5), rng, true, 1e-5, 1e-5);
}

TEST(BasicBlock, GradientsIdentityShortcut) {
  std::mt19937_64 rng(8);
  BasicBlock<D> block("b", 3, 3, 1, rng);
  check_layer(block, random_tensor(rng, 3, 2, 4, 4), rng, true, 1e-5, 1e-5);
}

TEST(AddCoords, AppendsCoordinatePlanes) {
  std::mt19937_64 rng(9);
  AddCoords<D> coords;
  const Tensor<D> x = random_tensor(rng, 3, 2, 4, 5);
  const Tensor<D> y = coords.forward(x, false);
  ASSERT_EQ(y.channels, 5);
  EXPECT_EQ(y.at(3, 1, 0, 0), -1.0);
  EXPECT_EQ(y.at(3, 1, 0, 4), 1.0);
  EXPECT_EQ(y.at(4, 0, 3, 2), 1.0);
  EXPECT_EQ(y.at(0, 1, 2, 3), x.at(0, 1, 2, 3));

  Sequential<D> seq;
  seq.add(std::make_unique<AddCoords<D>>());
  seq.add(std::make_unique<Conv2d<D>>("c", 5, 2, 3, 1, 1, true, rng));
  seq.add(std::make_unique<ReLU<D>>());
  check_layer(seq, x, rng);
}

TEST(GlobalAveragePool, ForwardBackward) {
  std::mt19937_64 rng(10);
  const Tensor<D> x = random_tensor(rng, 3, 2, 2, 3);
  const auto f = global_average_pool(x);
  double acc = 0.0;
  for (int y = 0; y < 2; ++y)
    for (int xx = 0; xx < 3; ++xx) acc += x.at(2, 1, y, xx);
  EXPECT_NEAR(f(1, 2), acc / 6.0, 1e-14);
  RowMatrix<D> g = RowMatrix<D>::Ones(2, 3);
  const auto dx = global_average_pool_backward(g, 2, 3);
  EXPECT_NEAR(dx.at(1, 0, 1, 2), 1.0 / 6.0, 1e-15);
}

class MlpGradients : public ::testing::TestWithParam<bool> {};

TEST_P(MlpGradients, MatchFiniteDifference) {
  const bool batch_norm = GetParam();
  std::mt19937_64 rng(11);
  Mlp<D> mlp("m", {5, 7, 3}, rng, batch_norm);
  std::normal_distribution<double> n;
  RowMatrix<D> x(4, 5), r(4, 3);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = n(rng);
  ParameterList<D> ps;
  mlp.collect(ps);
  mlp.forward(x, true);
  zero_grads(ps);
  const RowMatrix<D> dx = mlp.backward(r);
  auto loss = [&](const RowMatrix<D>& in) { return mlp.forward(in, true).cwiseProduct(r).sum(); };
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    RowMatrix<D> up = x, down = x;
    up.data()[i] += h;
    down.data()[i] -= h;
    EXPECT_NEAR(dx.data()[i], (loss(up) - loss(down)) / (2 * h), 1e-6);
  }
  for (auto* p : ps) {
    for (Eigen::Index i = 0; i < p->size(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + h;
      const double up = loss(x);
      p->value[i] = orig - h;
      const double down = loss(x);
      p->value[i] = orig;
      EXPECT_NEAR(p->grad[i], (up - down) / (2 * h), 1e-6) << p->name;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Mlp, MlpGradients, ::testing::Bool());

TEST(Mlp, HiddenBatchNormParametersCollected) {
  std::mt19937_64 rng(2);
  Mlp<D> mlp("p1", {4, 6, 2}, rng, true);
  ParameterList<D> ps;
  mlp.collect(ps);
  std::vector<std::string> names;
  for (auto* p : ps) names.push_back(p->name);
  EXPECT_NE(std::find(names.begin(), names.end(), "p1.bn0.weight"), names.end());
  Mlp<D> plain("p1", {4, 6, 2}, rng);
  ParameterList<D> qs;
  plain.collect(qs);
  EXPECT_LT(qs.size(), ps.size());
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.03), 0.03);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 0.03), 0.0);
  EXPECT_NEAR(cosine_lr(50, 100, 0.03), 0.015, 1e-15);
  EXPECT_THROW(cosine_lr(101, 100, 0.03), RangeError);
  EXPECT_THROW(cosine_lr(-1, 100, 0.03), RangeError);
}

TEST(Sgd, MomentumUpdate) {
  Parameter<D> p("w", {2});
  p.value << 1.0, -1.0;
  ParameterList<D> ps{&p};
  Sgd<D> opt(ps, 0.9, 0.0);
  p.grad << 1.0, 2.0;
  opt.step(0.1);
  EXPECT_NEAR(p.value[0], 0.9, 1e-15);
  opt.step(0.1);  // v = 0.9 * 1 + 1 = 1.9
  EXPECT_NEAR(p.value[0], 0.9 - 0.19, 1e-15);
  EXPECT_NEAR(p.value[1], -1.0 - 0.2 - 0.38, 1e-15);
}

}  // namespace
}  // namespace gazeclr::nn
