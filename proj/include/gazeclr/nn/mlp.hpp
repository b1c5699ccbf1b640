#pragma once

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include "gazeclr/errors.hpp"
#include "gazeclr/nn/layers.hpp"
#include "gazeclr/nn/tensor.hpp"

namespace gazeclr::nn {

/// y = x W^T + b over rows of an N x in matrix.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_features, int out_features, std::mt19937_64& rng)
      : in_(in_features), out_(out_features), weight_(name + ".weight", {out_features, in_features}),
        bias_(name + ".bias", {out_features}) {
    he_normal(weight_, in_features, rng);
  }

  int in_features() const noexcept { return in_; }
  int out_features() const noexcept { return out_; }

  RowMatrix<T> forward(const RowMatrix<T>& x, bool train) {
    if (x.cols() != in_) throw ShapeError("linear: expected " + std::to_string(in_) + " input features");
    RowMatrix<T> y = x * weights().transpose();
    y.rowwise() += bias_.value.transpose();
    if (train) input_ = x;
    return y;
  }

  RowMatrix<T> backward(const RowMatrix<T>& grad_out) {
    Eigen::Map<RowMatrix<T>> dw(weight_.grad.data(), out_, in_);
    dw.noalias() += grad_out.transpose() * input_;
    bias_.grad += grad_out.colwise().sum().transpose();
    RowMatrix<T> dx = grad_out * weights();
    input_.resize(0, 0);
    return dx;
  }

  void collect(ParameterList<T>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Parameter<T>& weight() { return weight_; }
  Parameter<T>& bias() { return bias_; }

 private:
  Eigen::Map<const RowMatrix<T>> weights() const {
    return Eigen::Map<const RowMatrix<T>>(weight_.value.data(), out_, in_);
  }

  int in_ = 0, out_ = 0;
  Parameter<T> weight_, bias_;
  RowMatrix<T> input_;
};

/// Stack of Linear layers with ReLU between them (none after the last),
/// optionally batch-normalizing each hidden pre-activation.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, const std::vector<int>& dims, std::mt19937_64& rng, bool hidden_batch_norm = false) {
    if (dims.size() < 2) throw InvalidArgument("mlp needs at least input and output sizes");
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      layers_.emplace_back(name + "." + std::to_string(i), dims[i], dims[i + 1], rng);
      if (hidden_batch_norm && i + 2 < dims.size()) norms_.emplace_back(name + ".bn" + std::to_string(i), dims[i + 1]);
    }
  }

  int in_features() const { return layers_.front().in_features(); }
  int out_features() const { return layers_.back().out_features(); }
  std::size_t depth() const noexcept { return layers_.size(); }
  Linear<T>& layer(std::size_t i) { return layers_.at(i); }

  RowMatrix<T> forward(const RowMatrix<T>& x, bool train) {
    RowMatrix<T> h = x;
    if (train) activations_.clear();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = layers_[i].forward(h, train);
      if (i + 1 < layers_.size()) {
        if (!norms_.empty()) h = from_tensor(norms_[i].forward(to_tensor(h), train));
        h = h.cwiseMax(T(0));
        if (train) activations_.push_back(h);
      }
    }
    return h;
  }

  RowMatrix<T> backward(const RowMatrix<T>& grad_out) {
    RowMatrix<T> g = grad_out;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) {
        g = g.cwiseProduct((activations_[i].array() > T(0)).matrix().template cast<T>());
        if (!norms_.empty()) g = from_tensor(norms_[i].backward(to_tensor(g)));
      }
      g = layers_[i].backward(g);
    }
    activations_.clear();
    return g;
  }

  void collect(ParameterList<T>& out) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].collect(out);
      if (i < norms_.size()) norms_[i].collect(out);
    }
  }

 private:
  // N x C rows <-> C x N x 1 x 1 tensor.
  static Tensor<T> to_tensor(const RowMatrix<T>& h) {
    Tensor<T> t(static_cast<int>(h.cols()), static_cast<int>(h.rows()), 1, 1);
    t.matrix() = h.transpose();
    return t;
  }
  static RowMatrix<T> from_tensor(const Tensor<T>& t) { return t.matrix().transpose(); }

  std::vector<Linear<T>> layers_;
  std::vector<BatchNorm2d<T>> norms_;
  std::vector<RowMatrix<T>> activations_;
};

}  // namespace gazeclr::nn
