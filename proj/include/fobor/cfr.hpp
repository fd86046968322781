#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "fobor/embedding_store.hpp"
#include "fobor/error.hpp"
#include "fobor/tensor.hpp"
#include "fobor/text_encoder.hpp"

// Confusable foreground rectification.
namespace fobor {

inline constexpr std::uint32_t kDefaultNumConfusableClasses = 2;
inline constexpr std::uint32_t kDefaultNumConfusablePatches = 3;
inline constexpr double kDefaultFusionWeight = 0.5;

/// How a foreground patch's similarities to the confusable classes reduce to one score.
enum class PatchReduce { max, mean };

/// raw: p_t log p_t + p_c log p_c on the M-way posterior.
/// renormalized: binary entropy term of (p_t, p_c) / (p_t + p_c).
enum class PairMode { raw, renormalized };

struct ClassSimilarities {
  std::vector<double> s_txt;
  std::vector<double> s_vis;
  std::vector<double> s_fusion;
};

struct ConfusionSelection {
  ClassSimilarities sims;
  double lambda = kDefaultFusionWeight;
  std::vector<std::uint32_t> classes;
  std::vector<double> patch_scores;  // aligned with the fg index list given to selection
  std::vector<std::uint32_t> patches;
};

inline ClassSimilarities class_similarities(const TextBank& bank, std::span<const float> global,
                                            std::size_t t, double lambda) {
  if (t >= bank.num_classes()) throw InvalidArgument("true class out of range");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
  if (global.size() != bank.dim()) throw InvalidArgument("global feature dim mismatch");
  ClassSimilarities s;
  const std::size_t num_classes = bank.num_classes();
  s.s_txt.resize(num_classes);
  s.s_vis.resize(num_classes);
  s.s_fusion.resize(num_classes);
  for (std::size_t m = 0; m < num_classes; ++m) {
    s.s_txt[m] = dot<double, double>(bank[t], bank[m]);
    s.s_vis[m] = dot<float, double>(global, bank[m]);
    s.s_fusion[m] = lambda * s.s_txt[m] + (1.0 - lambda) * s.s_vis[m];
  }
  return s;
}

namespace detail {

/// Positions of the n largest values, descending, ties to the smaller position.
inline std::vector<std::uint32_t> top_n(std::span<const double> values, std::size_t n,
                                        std::span<const std::uint32_t> exclude = {}) {
  std::vector<std::uint32_t> idx;
  for (std::uint32_t i = 0; i < values.size(); ++i)
    if (std::find(exclude.begin(), exclude.end(), i) == exclude.end()) idx.push_back(i);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return values[a] > values[b]; });
  if (idx.size() > n) idx.resize(n);
  return idx;
}

}  // namespace detail

inline std::vector<std::uint32_t> select_confusable_classes(std::span<const double> s_fusion,
                                                            std::size_t t,
                                                            std::uint32_t num_classes) {
  if (num_classes < 1) throw InvalidArgument("n_class must be >= 1");
  if (s_fusion.size() < 2) throw InvalidArgument("confusable classes need M >= 2");
  if (t >= s_fusion.size()) throw InvalidArgument("true class out of range");
  const std::uint32_t excluded[] = {static_cast<std::uint32_t>(t)};
  return detail::top_n(s_fusion, num_classes, excluded);
}

struct PatchSelection {
  std::vector<double> patch_scores;  // one per fg entry, in fg order
  std::vector<std::uint32_t> patches;  // selected patch indices (not positions in fg)
};

inline PatchSelection select_confusable_patches(const EmbeddingRecord& rec,
                                                std::span<const std::uint32_t> fg,
                                                const TextBank& bank,
                                                std::span<const std::uint32_t> classes,
                                                std::uint32_t num_patches,
                                                PatchReduce reduce = PatchReduce::max) {
  if (fg.empty()) throw InvalidArgument("confusable patch selection needs a non-empty foreground");
  if (classes.empty()) throw InvalidArgument("confusable patch selection needs confusable classes");
  PatchSelection sel;
  sel.patch_scores.resize(fg.size());
  for (std::size_t k = 0; k < fg.size(); ++k) {
    const auto& f = rec.patch_features.at(fg[k]);
    double acc = reduce == PatchReduce::max ? -std::numeric_limits<double>::infinity() : 0.0;
    for (std::uint32_t c : classes) {
      const double s = dot<float, double>(f, bank[c]);
      acc = reduce == PatchReduce::max ? std::max(acc, s) : acc + s;
    }
    if (reduce == PatchReduce::mean) acc /= static_cast<double>(classes.size());
    sel.patch_scores[k] = acc;
  }
  // fg is sorted ascending, so position ties resolve to the smaller patch index.
  for (std::uint32_t pos : detail::top_n(sel.patch_scores, num_patches))
    sel.patches.push_back(fg[pos]);
  return sel;
}

inline double cfr_pair_term(double p_true, double p_conf, PairMode mode) {
  if (mode == PairMode::raw) return xlogx(p_true) + xlogx(p_conf);
  const double s = p_true + p_conf;
  if (!(s > 0.0)) return 0.0;
  return xlogx(p_true / s) + xlogx(p_conf / s);
}

/// d term / d p_true and d term / d p_conf, from log-probabilities so both stay finite.
inline std::pair<double, double> cfr_pair_grad(double log_p_true, double log_p_conf,
                                               PairMode mode) {
  if (mode == PairMode::raw) return {log_p_true + 1.0, log_p_conf + 1.0};
  // With q = p_t / (p_t + p_c): d/dq [q ln q + (1-q) ln(1-q)] = ln(p_t / p_c).
  const double p_t = std::exp(log_p_true);
  const double p_c = std::exp(log_p_conf);
  const double s = p_t + p_c;
  const double dq = log_p_true - log_p_conf;
  return {dq * p_c / (s * s), -dq * p_t / (s * s)};
}

/// Mean over (confusable class, confusable patch) pairs of the pair term.
inline double cfr_loss(const Matrix& local_probs, std::span<const std::uint32_t> patches,
                       std::span<const std::uint32_t> classes, std::size_t t,
                       PairMode mode = PairMode::raw) {
  if (patches.empty() || classes.empty()) return 0.0;
  if (t >= local_probs.cols()) throw InvalidArgument("true class out of range");
  double acc = 0.0;
  for (std::uint32_t c : classes) {
    if (c == t) throw InvalidArgument("true class listed as confusable");
    for (std::uint32_t j : patches) acc += cfr_pair_term(local_probs(j, t), local_probs(j, c), mode);
  }
  return acc / static_cast<double>(classes.size() * patches.size());
}

}  // namespace fobor
