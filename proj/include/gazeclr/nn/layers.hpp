#pragma once

// Convolutional building blocks with hand-written backward passes.
//
// Every layer caches what its backward pass needs during a training-mode
// forward call; backward() accumulates into parameter gradients and returns
// the gradient with respect to the layer input.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "gazeclr/errors.hpp"
#include "gazeclr/nn/tensor.hpp"

namespace gazeclr::nn {

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect(ParameterList<T>& out) { (void)out; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::string kind() const = 0;
  /// Drops cached activations.
  virtual void release() {}
};

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int padding,
         bool with_bias, std::mt19937_64& rng)
      : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), pad_(padding),
        weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}) {
    he_normal(weight_, in_channels * kernel * kernel, rng);
    if (with_bias) bias_ = Parameter<T>(name + ".bias", {out_channels});
    has_bias_ = with_bias;
  }

  /// The first layer of a network never needs dL/d(input).
  void set_input_grad(bool enabled) { input_grad_ = enabled; }

  int out_size(int n) const { return (n + 2 * pad_ - kernel_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.channels != in_) throw ShapeError("conv2d: expected " + std::to_string(in_) + " input channels");
    const int oh = out_size(x.height), ow = out_size(x.width);
    if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: input smaller than kernel");
    const Eigen::Index k = static_cast<Eigen::Index>(in_) * kernel_ * kernel_;
    const Eigen::Index p = static_cast<Eigen::Index>(x.batch) * oh * ow;
    RowMatrix<T> cols(k, p);
    im2col(x, oh, ow, cols.data());

    Tensor<T> y(out_, x.batch, oh, ow);
    auto ym = y.matrix();
    ym.noalias() = weights() * cols;
    if (has_bias_) ym.colwise() += bias_.value;
    if (train) {
      cols_ = std::move(cols);
      in_shape_ = {x.channels, x.batch, x.height, x.width};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (cols_.size() == 0) throw Error("conv2d: backward without a training forward pass");
    const auto g = grad_out.matrix();
    Eigen::Map<RowMatrix<T>> dw(weight_.grad.data(), out_, cols_.rows());
    dw.noalias() += g * cols_.transpose();
    if (has_bias_) bias_.grad += g.rowwise().sum();
    Tensor<T> dx;
    if (input_grad_) {
      RowMatrix<T> dcols = weights().transpose() * g;
      dx = Tensor<T>(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
      col2im(dcols.data(), grad_out.height, grad_out.width, dx);
    }
    release();
    return dx;
  }

  void collect(ParameterList<T>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }
  std::string kind() const override { return "conv2d"; }
  void release() override { cols_.resize(0, 0); }

 private:
  Eigen::Map<const RowMatrix<T>> weights() const {
    return Eigen::Map<const RowMatrix<T>>(weight_.value.data(), out_,
                                          static_cast<Eigen::Index>(in_) * kernel_ * kernel_);
  }

  void im2col(const Tensor<T>& x, int oh, int ow, T* cols) const {
    const std::size_t p = static_cast<std::size_t>(x.batch) * oh * ow;
    for (int ci = 0; ci < in_; ++ci) {
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          T* row = cols + ((static_cast<std::size_t>(ci) * kernel_ + ky) * kernel_ + kx) * p;
          for (int n = 0; n < x.batch; ++n) {
            const T* src_plane = x.data.data() + ci * x.channel_stride() + static_cast<std::size_t>(n) * x.plane();
            for (int oy = 0; oy < oh; ++oy) {
              T* dst = row + (static_cast<std::size_t>(n) * oh + oy) * ow;
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= x.height) {
                std::fill(dst, dst + ow, T(0));
                continue;
              }
              const T* src = src_plane + static_cast<std::size_t>(iy) * x.width;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                dst[ox] = (ix >= 0 && ix < x.width) ? src[ix] : T(0);
              }
            }
          }
        }
      }
    }
  }

  void col2im(const T* cols, int oh, int ow, Tensor<T>& dx) const {
    const std::size_t p = static_cast<std::size_t>(dx.batch) * oh * ow;
    for (int ci = 0; ci < in_; ++ci) {
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const T* row = cols + ((static_cast<std::size_t>(ci) * kernel_ + ky) * kernel_ + kx) * p;
          for (int n = 0; n < dx.batch; ++n) {
            T* dst_plane = dx.data.data() + ci * dx.channel_stride() + static_cast<std::size_t>(n) * dx.plane();
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= dx.height) continue;
              const T* src = row + (static_cast<std::size_t>(n) * oh + oy) * ow;
              T* dst = dst_plane + static_cast<std::size_t>(iy) * dx.width;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix >= 0 && ix < dx.width) dst[ix] += src[ox];
              }
            }
          }
        }
      }
    }
  }

  int in_, out_, kernel_, stride_, pad_;
  bool has_bias_ = false;
  bool input_grad_ = true;
  Parameter<T> weight_;
  Parameter<T> bias_;
  RowMatrix<T> cols_;
  std::array<int, 4> in_shape_{};
};

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = x;
    for (auto& v : y.data) v = std::max(v, T(0));
    if (train) output_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> dx = grad_out;
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
      if (!(output_.data[i] > T(0))) dx.data[i] = T(0);
    }
    release();
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
  std::string kind() const override { return "relu"; }
  void release() override { output_ = Tensor<T>(); }

 private:
  Tensor<T> output_;
};

/// Per-channel batch normalization with running statistics for eval mode.
template <typename T>
class BatchNorm2d final : public Layer<T> {
 public:
  BatchNorm2d(const std::string& name, int channels, double momentum = 0.1, double eps = 1e-5)
      : channels_(channels), momentum_(momentum), eps_(eps),
        gamma_(name + ".weight", {channels}), beta_(name + ".bias", {channels}),
        running_mean_(name + ".running_mean", {channels}, false),
        running_var_(name + ".running_var", {channels}, false) {
    gamma_.value.setOnes();
    running_var_.value.setOnes();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    if (x.channels != channels_) throw ShapeError("batchnorm: channel mismatch");
    const Eigen::Index m = static_cast<Eigen::Index>(x.channel_stride());
    Tensor<T> y(x.channels, x.batch, x.height, x.width);
    auto xm = x.matrix();
    auto ym = y.matrix();
    if (!train) {
      for (int c = 0; c < channels_; ++c) {
        const T inv_std = T(1) / std::sqrt(running_var_.value[c] + T(eps_));
        const T scale = gamma_.value[c] * inv_std;
        const T shift = beta_.value[c] - running_mean_.value[c] * scale;
        ym.row(c) = (xm.row(c).array() * scale + shift).matrix();
      }
      return y;
    }
    if (m < 2) throw ShapeError("batchnorm: training needs more than one value per channel");
    normalized_ = Tensor<T>(x.channels, x.batch, x.height, x.width);
    auto nm = normalized_.matrix();
    inv_std_.resize(channels_);
    for (int c = 0; c < channels_; ++c) {
      const T mean = xm.row(c).mean();
      const T var = (xm.row(c).array() - mean).square().mean();
      const T inv_std = T(1) / std::sqrt(var + T(eps_));
      inv_std_[c] = inv_std;
      nm.row(c) = ((xm.row(c).array() - mean) * inv_std).matrix();
      ym.row(c) = (nm.row(c).array() * gamma_.value[c] + beta_.value[c]).matrix();
      const T unbiased = var * T(m) / T(m - 1);
      running_mean_.value[c] = T(1 - momentum_) * running_mean_.value[c] + T(momentum_) * mean;
      running_var_.value[c] = T(1 - momentum_) * running_var_.value[c] + T(momentum_) * unbiased;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    if (normalized_.size() == 0) throw Error("batchnorm: backward without a training forward pass");
    const T m = T(grad_out.channel_stride());
    Tensor<T> dx(grad_out.channels, grad_out.batch, grad_out.height, grad_out.width);
    auto g = grad_out.matrix();
    auto nm = normalized_.matrix();
    auto dxm = dx.matrix();
    for (int c = 0; c < channels_; ++c) {
      const T sum_g = g.row(c).sum();
      const T sum_gx = g.row(c).dot(nm.row(c));
      gamma_.grad[c] += sum_gx;
      beta_.grad[c] += sum_g;
      const T k = gamma_.value[c] * inv_std_[c] / m;
      dxm.row(c) = ((g.row(c).array() * m - sum_g - nm.row(c).array() * sum_gx) * k).matrix();
    }
    release();
    return dx;
  }

  void collect(ParameterList<T>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm2d>(*this); }
  std::string kind() const override { return "batchnorm2d"; }
  void release() override { normalized_ = Tensor<T>(); }

 private:
  int channels_;
  double momentum_, eps_;
  Parameter<T> gamma_, beta_, running_mean_, running_var_;
  Tensor<T> normalized_;
  std::vector<T> inv_std_;
};

template <typename T>
class MaxPool2d final : public Layer<T> {
 public:
  MaxPool2d(int kernel, int stride, int padding) : kernel_(kernel), stride_(stride), pad_(padding) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    const int oh = (x.height + 2 * pad_ - kernel_) / stride_ + 1;
    const int ow = (x.width + 2 * pad_ - kernel_) / stride_ + 1;
    Tensor<T> y(x.channels, x.batch, oh, ow);
    std::vector<std::size_t> argmax(y.size());
    std::size_t o = 0;
    for (int c = 0; c < x.channels; ++c) {
      for (int n = 0; n < x.batch; ++n) {
        const std::size_t base = c * x.channel_stride() + static_cast<std::size_t>(n) * x.plane();
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_idx = base;
            for (int ky = 0; ky < kernel_; ++ky) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= x.height) continue;
              for (int kx = 0; kx < kernel_; ++kx) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= x.width) continue;
                const std::size_t idx = base + static_cast<std::size_t>(iy) * x.width + ix;
                if (x.data[idx] > best) {
                  best = x.data[idx];
                  best_idx = idx;
                }
              }
            }
            y.data[o] = best;
            argmax[o] = best_idx;
          }
        }
      }
    }
    if (train) {
      argmax_ = std::move(argmax);
      in_shape_ = {x.channels, x.batch, x.height, x.width};
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t o = 0; o < grad_out.data.size(); ++o) dx.data[argmax_[o]] += grad_out.data[o];
    release();
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2d>(*this); }
  std::string kind() const override { return "maxpool2d"; }
  void release() override { argmax_.clear(); }

 private:
  int kernel_, stride_, pad_;
  std::vector<std::size_t> argmax_;
  std::array<int, 4> in_shape_{};
};

/// Appends normalized x and y coordinate planes in [-1, 1] so that a pooled
/// convolutional stack can still localize features.
template <typename T>
class AddCoords final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    (void)train;
    Tensor<T> y(x.channels + 2, x.batch, x.height, x.width);
    std::copy(x.data.begin(), x.data.end(), y.data.begin());
    for (int n = 0; n < x.batch; ++n) {
      for (int yy = 0; yy < x.height; ++yy) {
        for (int xx = 0; xx < x.width; ++xx) {
          y.at(x.channels, n, yy, xx) = x.width > 1 ? T(-1) + T(2) * T(xx) / T(x.width - 1) : T(0);
          y.at(x.channels + 1, n, yy, xx) = x.height > 1 ? T(-1) + T(2) * T(yy) / T(x.height - 1) : T(0);
        }
      }
    }
    channels_ = x.channels;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> dx(channels_, grad_out.batch, grad_out.height, grad_out.width);
    std::copy(grad_out.data.begin(), grad_out.data.begin() + static_cast<std::ptrdiff_t>(dx.size()), dx.data.begin());
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<AddCoords>(*this); }
  std::string kind() const override { return "addcoords"; }

 private:
  int channels_ = 0;
};

template <typename T>
class Sequential final : public Layer<T> {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      layers_.clear();
      for (const auto& l : o.layers_) layers_.push_back(l->clone());
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L>
  L& add(std::unique_ptr<L> layer) {
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h, train);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }
  void collect(ParameterList<T>& out) override {
    for (auto& l : layers_) l->collect(out);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Sequential>(*this); }
  std::string kind() const override { return "sequential"; }
  void release() override {
    for (auto& l : layers_) l->release();
  }
  std::size_t size() const noexcept { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// ResNet basic block: conv-bn-relu-conv-bn plus (projected) shortcut, then relu.
template <typename T>
class BasicBlock final : public Layer<T> {
 public:
  BasicBlock(const std::string& name, int in_channels, int out_channels, int stride, std::mt19937_64& rng) {
    main_.add(std::make_unique<Conv2d<T>>(name + ".conv1", in_channels, out_channels, 3, stride, 1, false, rng));
    main_.add(std::make_unique<BatchNorm2d<T>>(name + ".bn1", out_channels));
    main_.add(std::make_unique<ReLU<T>>());
    main_.add(std::make_unique<Conv2d<T>>(name + ".conv2", out_channels, out_channels, 3, 1, 1, false, rng));
    main_.add(std::make_unique<BatchNorm2d<T>>(name + ".bn2", out_channels));
    if (stride != 1 || in_channels != out_channels) {
      shortcut_.add(std::make_unique<Conv2d<T>>(name + ".downsample.0", in_channels, out_channels, 1, stride, 0,
                                                false, rng));
      shortcut_.add(std::make_unique<BatchNorm2d<T>>(name + ".downsample.1", out_channels));
      projected_ = true;
    }
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = main_.forward(x, train);
    const Tensor<T> s = projected_ ? shortcut_.forward(x, train) : x;
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::max(y.data[i] + s.data[i], T(0));
    if (train) output_ = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> g = grad_out;
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      if (!(output_.data[i] > T(0))) g.data[i] = T(0);
    }
    Tensor<T> dx = main_.backward(g);
    const Tensor<T> ds = projected_ ? shortcut_.backward(g) : g;
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += ds.data[i];
    output_ = Tensor<T>();
    return dx;
  }

  void collect(ParameterList<T>& out) override {
    main_.collect(out);
    shortcut_.collect(out);
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BasicBlock>(*this); }
  std::string kind() const override { return "basicblock"; }
  void release() override {
    main_.release();
    shortcut_.release();
    output_ = Tensor<T>();
  }

 private:
  Sequential<T> main_;
  Sequential<T> shortcut_;
  bool projected_ = false;
  Tensor<T> output_;
};

/// Mean over each (channel, image) plane: C x N x H x W -> N x C.
template <typename T>
RowMatrix<T> global_average_pool(const Tensor<T>& x) {
  RowMatrix<T> out(x.batch, x.channels);
  const T inv = T(1) / T(x.plane());
  for (int c = 0; c < x.channels; ++c) {
    for (int n = 0; n < x.batch; ++n) {
      const T* p = x.data.data() + c * x.channel_stride() + static_cast<std::size_t>(n) * x.plane();
      T acc = T(0);
      for (std::size_t i = 0; i < x.plane(); ++i) acc += p[i];
      out(n, c) = acc * inv;
    }
  }
  return out;
}

template <typename T>
Tensor<T> global_average_pool_backward(const RowMatrix<T>& grad, int height, int width) {
  Tensor<T> dx(static_cast<int>(grad.cols()), static_cast<int>(grad.rows()), height, width);
  const T inv = T(1) / T(dx.plane());
  for (int c = 0; c < dx.channels; ++c) {
    for (int n = 0; n < dx.batch; ++n) {
      T* p = dx.data.data() + c * dx.channel_stride() + static_cast<std::size_t>(n) * dx.plane();
      std::fill(p, p + dx.plane(), grad(n, c) * inv);
    }
  }
  return dx;
}

}  // namespace gazeclr::nn
