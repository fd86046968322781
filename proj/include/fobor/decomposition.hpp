#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fobor/error.hpp"
#include "fobor/tensor.hpp"

namespace fobor {

/// Foreground/background split of one image's patches.
struct Decomposition {
  std::vector<std::uint32_t> fg;
  std::vector<std::uint32_t> bg;
  std::uint32_t kappa = 1;
  std::vector<std::uint32_t> ranks;  // 1-based rank of the true class per patch
};

/// max(1, round(0.2 M)).
inline std::uint32_t default_kappa(std::size_t num_classes) {
  const auto k = static_cast<std::uint32_t>(std::lround(0.2 * static_cast<double>(num_classes)));
  return k < 1 ? 1 : k;
}

/// rank = 1 + #{m : p_m > p_t} + #{m < t : p_m = p_t}.
inline std::uint32_t rank_of(std::span<const double> row, std::size_t t) {
  if (t >= row.size()) throw InvalidArgument("true class " + std::to_string(t) + " out of range");
  std::uint32_t rank = 1;
  for (std::size_t m = 0; m < row.size(); ++m) {
    if (row[m] > row[t] || (m < t && row[m] == row[t])) ++rank;
  }
  return rank;
}

inline std::vector<std::uint32_t> rank_true_class(const Matrix& local_probs, std::size_t t) {
  if (t >= local_probs.cols())
    throw InvalidArgument("true class " + std::to_string(t) + " out of range");
  std::vector<std::uint32_t> ranks(local_probs.rows());
  for (std::size_t i = 0; i < local_probs.rows(); ++i) ranks[i] = rank_of(local_probs.row(i), t);
  return ranks;
}

inline Decomposition decompose(const Matrix& local_probs, std::size_t t, std::uint32_t kappa) {
  if (kappa < 1) throw InvalidArgument("kappa must be >= 1");
  Decomposition dec;
  dec.kappa = kappa;
  dec.ranks = rank_true_class(local_probs, t);
  for (std::uint32_t i = 0; i < dec.ranks.size(); ++i)
    (dec.ranks[i] <= kappa ? dec.fg : dec.bg).push_back(i);
  return dec;
}

/// Shannon entropy in nats.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double x : p) h -= xlogx(x);
  return h;
}

/// Uniform background entropy loss: -(1/|bg|) sum_j H(p_j); 0 for an empty set.
inline double ood_loss(const Matrix& local_probs, std::span<const std::uint32_t> bg) {
  if (bg.empty()) return 0.0;
  double acc = 0.0;
  for (std::uint32_t j : bg) {
    if (j >= local_probs.rows()) throw InvalidArgument("background index out of range");
    acc += entropy(local_probs.row(j));
  }
  return -acc / static_cast<double>(bg.size());
}

}  // namespace fobor
