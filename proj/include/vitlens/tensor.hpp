#pragma once

// Dense row-major f32 tensors and the handful of deterministic kernels the
// rest of the library is built on. Reductions accumulate in double; every
// kernel walks its inputs in a fixed order so identical inputs produce
// bit-identical outputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vitlens/error.hpp"

namespace vitlens {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      fail(ErrorCode::dimension, "tensor data length " +
                                     std::to_string(data_.size()) +
                                     " does not match shape " +
                                     shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<float> values) {
    return Tensor({rows, cols}, std::vector<float>(values));
  }

  static Tensor vector(std::initializer_list<float> values) {
    return Tensor({values.size()}, std::vector<float>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D access; callers guarantee rank 2.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const {
    return data_[r * shape_[1] + c];
  }

  /// Contiguous view over the trailing dimensions at leading index `i`.
  std::span<float> row(std::size_t i) {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<float>(data_).subspan(i * stride, stride);
  }
  std::span<const float> row(std::size_t i) const {
    const std::size_t stride = data_.size() / shape_.at(0);
    return std::span<const float>(data_).subspan(i * stride, stride);
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      fail(ErrorCode::dimension, "cannot reshape " + shape_string(shape_) +
                                     " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) fail(ErrorCode::dimension, "tensor rank must be >= 1");
    for (std::size_t d : shape) {
      if (d == 0) {
        fail(ErrorCode::dimension,
             "tensor dimensions must be >= 1, got " + shape_string(shape));
      }
    }
  }

  Shape shape_;
  std::vector<float> data_;
};

namespace detail {

inline void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    fail(ErrorCode::dimension, std::string(what) + " expects a matrix, got " +
                                   shape_string(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// c = a * b for a [m x k] and b [k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    fail(ErrorCode::dimension, "matmul inner dimension mismatch: " +
                                   shape_string(a.shape()) + " * " +
                                   shape_string(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a.at(i, t);
      if (av == 0.0) continue;
      const float* brow = &b.storage()[t * n];
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
    }
    for (std::size_t j = 0; j < n; ++j) c.at(i, j) = static_cast<float>(acc[j]);
  }
  return c;
}

/// c = a * b^T for a [m x k] and b [n x k].
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_bt");
  detail::require_rank2(b, "matmul_bt");
  if (a.cols() != b.cols()) {
    fail(ErrorCode::dimension, "matmul_bt inner dimension mismatch: " +
                                   shape_string(a.shape()) + " * " +
                                   shape_string(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = &a.storage()[i * k];
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = &b.storage()[j * k];
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += double(arow[t]) * brow[t];
      c.at(i, j) = static_cast<float>(acc);
    }
  }
  return c;
}

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  Tensor t({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
  return t;
}

/// Adds `bias` to every row of the matrix `x` in place.
inline void add_row_bias(Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_row_bias");
  if (bias.size() != x.cols()) {
    fail(ErrorCode::dimension, "bias " + shape_string(bias.shape()) +
                                   " does not match rows of " +
                                   shape_string(x.shape()));
  }
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x.at(i, j) += bias[j];
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::dimension, "add shape mismatch: " +
                                   shape_string(a.shape()) + " vs " +
                                   shape_string(b.shape()));
  }
  Tensor c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

/// Rows `indices` of a matrix, in the given order.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  detail::require_rank2(x, "gather_rows");
  if (indices.empty()) fail(ErrorCode::empty_sequence, "gather_rows: no rows");
  Tensor out({indices.size(), x.cols()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= x.rows()) {
      fail(ErrorCode::invalid_argument, "row index out of range");
    }
    std::copy_n(x.row(indices[r]).begin(), x.cols(), out.row(r).begin());
  }
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * b[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

/// Numerically stable softmax along `axis` (max-subtracted).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    fail(ErrorCode::dimension, "softmax axis " + std::to_string(axis) +
                                   " out of range for " +
                                   shape_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Tensor y(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      float mx = x[base];
      for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, x[base + t * inner]);
      double sum = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const double e = std::exp(double(x[base + t * inner]) - mx);
        y[base + t * inner] = static_cast<float>(e);
        sum += e;
      }
      for (std::size_t t = 0; t < len; ++t) {
        y[base + t * inner] = static_cast<float>(y[base + t * inner] / sum);
      }
    }
  }
  return y;
}

/// Normalizes one row in double precision and writes gamma * xhat + beta.
inline void layer_norm_row(std::span<const float> x, std::span<const float> gamma,
                           std::span<const float> beta, float eps,
                           std::span<float> out) {
  const std::size_t d = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= double(d);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= double(d);
  const double inv = 1.0 / std::sqrt(var + double(eps));
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
  }
}

/// Layer normalization over the last dimension.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, float eps) {
  const std::size_t d = x.dim(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d) {
    fail(ErrorCode::dimension, "layer_norm: last dim " + std::to_string(d) +
                                   " vs gamma " + shape_string(gamma.shape()) +
                                   ", beta " + shape_string(beta.shape()));
  }
  Tensor y(x.shape());
  const std::size_t rows = x.size() / d;
  const auto xs = x.data();
  auto ys = y.data();
  for (std::size_t r = 0; r < rows; ++r) {
    layer_norm_row(xs.subspan(r * d, d), gamma.data(), beta.data(), eps,
                   ys.subspan(r * d, d));
  }
  return y;
}

/// Exact-erf GELU: x * Phi(x).
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

/// d/dx GELU(x) = Phi(x) + x * phi(x).
inline double gelu_derivative(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline Tensor gelu(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<float>(gelu(double(x[i])));
  return y;
}

inline Tensor gelu_derivative(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = static_cast<float>(gelu_derivative(double(x[i])));
  }
  return y;
}

// ---------------------------------------------------------------------------
// Ranking

/// Indices ordering `x` from highest to lowest; ties keep the lower index first.
template <typename T>
std::vector<std::size_t> argsort_desc(std::span<const T> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  return idx;
}

inline std::vector<std::size_t> argsort_desc(const std::vector<float>& x) {
  return argsort_desc(std::span<const float>(x));
}

/// Index of the maximum; the lowest index wins ties.
template <typename T>
std::size_t argmax(std::span<const T> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return best;
}

inline std::size_t argmax(const std::vector<float>& x) {
  return argmax(std::span<const float>(x));
}

/// Top `k` indices of `x` in descending order (same tie rule as argsort_desc).
template <typename T>
std::vector<std::size_t> top_k(std::span<const T> x, std::size_t k) {
  auto order = argsort_desc(x);
  order.resize(std::min(k, order.size()));
  return order;
}

}  // namespace vitlens
