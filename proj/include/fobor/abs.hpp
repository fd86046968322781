#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fobor/decomposition.hpp"
#include "fobor/embedding_store.hpp"
#include "fobor/error.hpp"
#include "fobor/tensor.hpp"

// Adaptive background suppression: attention of each background patch's query
// to the global key, calibrated by the true-class probability, weights the
// per-patch background entropy.
namespace fobor {

inline constexpr double kDefaultEta = 5.0;

struct CorrelationWeights {
  std::vector<double> r;  // softmax over background patches
  std::vector<double> w;  // sigmoid(eta * p_true * r_i)
  double eta = kDefaultEta;
  double p_true = 0.0;
};

/// r = softmax_i(q_i . k / sqrt(d_k)) over the given query rows.
inline std::vector<double> attention_scores(std::span<const std::span<const float>> queries,
                                            std::span<const float> key) {
  if (queries.empty()) throw InvalidArgument("attention_scores needs at least one query");
  const double scale = 1.0 / std::sqrt(static_cast<double>(key.size()));
  std::vector<double> logits(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    if (queries[i].size() != key.size()) throw InvalidArgument("d_k mismatch between query and key");
    logits[i] = dot<float, float>(queries[i], key) * scale;
  }
  return softmax(logits);
}

/// Attention scores of the record's background patches.
inline std::vector<double> background_attention(const EmbeddingRecord& rec,
                                                std::span<const std::uint32_t> bg) {
  std::vector<std::span<const float>> q;
  q.reserve(bg.size());
  for (std::uint32_t j : bg) q.emplace_back(rec.patch_queries.at(j));
  return attention_scores(q, rec.global_key);
}

inline std::vector<double> calibrated_weights(std::span<const double> r, double p_true, double eta) {
  if (!(eta > 0.0)) throw InvalidArgument("eta must be > 0");
  std::vector<double> w(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) w[i] = sigmoid(eta * p_true * r[i]);
  return w;
}

inline CorrelationWeights correlation_weights(const EmbeddingRecord& rec,
                                              std::span<const std::uint32_t> bg, double p_true,
                                              double eta) {
  CorrelationWeights cw;
  cw.eta = eta;
  cw.p_true = p_true;
  if (bg.empty()) return cw;
  cw.r = background_attention(rec, bg);
  cw.w = calibrated_weights(cw.r, p_true, eta);
  return cw;
}

/// -(1/|bg|) sum_j w_j H(p_j); 0 for an empty background.
inline double abs_loss(const Matrix& local_probs, std::span<const std::uint32_t> bg,
                       std::span<const double> w) {
  if (w.size() != bg.size()) throw InvalidArgument("abs_loss: |w| != |bg|");
  if (bg.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < bg.size(); ++k) {
    if (bg[k] >= local_probs.rows()) throw InvalidArgument("background index out of range");
    acc += w[k] * entropy(local_probs.row(bg[k]));
  }
  return -acc / static_cast<double>(bg.size());
}

}  // namespace fobor
