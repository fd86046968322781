#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "fobor/error.hpp"

namespace fobor {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows_ && c < cols_);
    return data_[r * cols_ + c];
  }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

template <class A, class B>
double dot(std::span<const A> a, std::span<const B> b) {
  assert(a.size() == b.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class T>
double norm2(std::span<const T> v) {
  return std::sqrt(dot(v, v));
}

/// log(sum(exp(x))) with max-subtraction.
inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double hi = *std::max_element(x.begin(), x.end());
  double acc = 0.0;
  for (double v : x) acc += std::exp(v - hi);
  return hi + std::log(acc);
}

/// Writes log-softmax of `logits` into `out` (same size).
inline void log_softmax(std::span<const double> logits, std::span<double> out) {
  assert(logits.size() == out.size());
  const double lse = log_sum_exp(logits);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
}

/// exp(z - max) / sum, so equal logits give exactly 1/n.
inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  assert(logits.size() == out.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += out[i] = std::exp(logits[i] - mx);
  for (double& v : out) v /= z;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  softmax_into(logits, out);
  return out;
}

/// Vector-Jacobian product of softmax: given p = softmax(z) and a = dL/dp,
/// returns dL/dz_k = p_k (a_k - sum_m a_m p_m).
inline void softmax_backward(std::span<const double> probs, std::span<const double> grad_probs,
                             std::span<double> grad_logits) {
  double mean = 0.0;
  for (std::size_t m = 0; m < probs.size(); ++m) mean += grad_probs[m] * probs[m];
  for (std::size_t k = 0; k < probs.size(); ++k)
    grad_logits[k] += probs[k] * (grad_probs[k] - mean);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// x log x with the 0 log 0 = 0 convention.
inline double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

}  // namespace fobor
