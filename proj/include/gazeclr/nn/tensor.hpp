#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "gazeclr/embedding.hpp"
#include "gazeclr/errors.hpp"

namespace gazeclr::nn {

/// Dense activation tensor stored channel-major: index (c, n, y, x).
///
/// Keeping all images of a channel contiguous lets a convolution over the
/// whole batch run as a single matrix product. Storage is aligned so that
/// vectorized reductions split the same way on every allocation, which keeps
/// results bit-reproducible.
template <typename T>
struct Tensor {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  std::vector<T, Eigen::aligned_allocator<T>> data;

  Tensor() = default;
  Tensor(int c, int n, int h, int w, T fill = T(0))
      : channels(c), batch(n), height(h), width(w),
        data(static_cast<std::size_t>(c) * n * h * w, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }
  /// Elements per channel across the batch.
  std::size_t channel_stride() const noexcept { return static_cast<std::size_t>(batch) * plane(); }

  T& at(int c, int n, int y, int x) {
    return data[c * channel_stride() + static_cast<std::size_t>(n) * plane() + static_cast<std::size_t>(y) * width + x];
  }
  const T& at(int c, int n, int y, int x) const {
    return data[c * channel_stride() + static_cast<std::size_t>(n) * plane() + static_cast<std::size_t>(y) * width + x];
  }

  /// Channels x (batch * plane) view.
  Eigen::Map<RowMatrix<T>> matrix() {
    return Eigen::Map<RowMatrix<T>>(data.data(), channels, static_cast<Eigen::Index>(channel_stride()));
  }
  Eigen::Map<const RowMatrix<T>> matrix() const {
    return Eigen::Map<const RowMatrix<T>>(data.data(), channels, static_cast<Eigen::Index>(channel_stride()));
  }

  bool same_shape(const Tensor& o) const noexcept {
    return channels == o.channels && batch == o.batch && height == o.height && width == o.width;
  }
};

/// Learnable weights (or a persistent buffer when `trainable` is false).
template <typename T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  Eigen::Matrix<T, Eigen::Dynamic, 1> value;
  Eigen::Matrix<T, Eigen::Dynamic, 1> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, bool is_trainable = true)
      : name(std::move(n)), shape(std::move(s)), trainable(is_trainable) {
    Eigen::Index count = 1;
    for (int d : shape) count *= d;
    value = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(count);
    grad = Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(count);
  }

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

template <typename T>
using ParameterList = std::vector<Parameter<T>*>;

/// He-normal initialization with the given fan-in.
template <typename T>
void he_normal(Parameter<T>& p, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(n(rng));
}

template <typename T>
void zero_grads(const ParameterList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace gazeclr::nn
