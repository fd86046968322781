#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "fobor/embedding_store.hpp"
#include "fobor/error.hpp"
#include "fobor/tensor.hpp"
#include "fobor/text_encoder.hpp"

namespace fobor {

inline constexpr double kDefaultTemperature = 0.01;

/// Global posterior p(y|x) and per-patch posteriors p_i, each a softmax over
/// the M classes of sim/tau. Log-probabilities are kept for the losses.
struct PosteriorMatrix {
  std::vector<double> global_probs;
  std::vector<double> global_log_probs;
  Matrix local_probs;      // N x M
  Matrix local_log_probs;  // N x M
  double temperature = kDefaultTemperature;

  std::size_t num_classes() const noexcept { return global_probs.size(); }
  std::size_t num_patches() const noexcept { return local_probs.rows(); }
};

struct ScoreRecord {
  double mcm = 0.0;
  double lmcm = 0.0;
  double glmcm = 0.0;
};

enum class Detection : int { ood = 0, id = 1 };

/// Similarities of the global feature (first) and every patch (rows of second) to the bank.
struct Similarities {
  std::vector<double> global;
  Matrix local;  // N x M
};

inline Similarities similarities(const EmbeddingRecord& rec, const TextBank& bank) {
  const std::size_t num_classes = bank.num_classes();
  if (rec.global_feature.size() != bank.dim())
    throw InvalidArgument("record feature dim does not match text bank");
  Similarities s;
  s.global.resize(num_classes);
  for (std::size_t m = 0; m < num_classes; ++m)
    s.global[m] = dot<float, double>(rec.global_feature, bank[m]);
  s.local = Matrix(rec.num_patches(), num_classes);
  for (std::size_t i = 0; i < rec.num_patches(); ++i) {
    if (rec.patch_features[i].size() != bank.dim())
      throw InvalidArgument("patch feature dim does not match text bank");
    for (std::size_t m = 0; m < num_classes; ++m)
      s.local(i, m) = dot<float, double>(rec.patch_features[i], bank[m]);
  }
  return s;
}

inline PosteriorMatrix posteriors_from_similarities(std::span<const double> global_sims,
                                                    const Matrix& local_sims, double tau) {
  if (!(tau > 0.0)) throw InvalidArgument("temperature must be > 0");
  const std::size_t num_classes = global_sims.size();
  PosteriorMatrix pm;
  pm.temperature = tau;
  std::vector<double> logits(num_classes);

  auto fill_row = [&](std::span<const double> sims, std::span<double> logp, std::span<double> p) {
    for (std::size_t m = 0; m < num_classes; ++m) {
      if (!std::isfinite(sims[m])) throw NumericalError("non-finite similarity");
      logits[m] = sims[m] / tau;
    }
    log_softmax(logits, logp);
    softmax_into(logits, p);
  };

  pm.global_probs.resize(num_classes);
  pm.global_log_probs.resize(num_classes);
  fill_row(global_sims, pm.global_log_probs, pm.global_probs);

  pm.local_probs = Matrix(local_sims.rows(), num_classes);
  pm.local_log_probs = Matrix(local_sims.rows(), num_classes);
  for (std::size_t i = 0; i < local_sims.rows(); ++i)
    fill_row(local_sims.row(i), pm.local_log_probs.row(i), pm.local_probs.row(i));
  return pm;
}

inline PosteriorMatrix posteriors(const EmbeddingRecord& rec, const TextBank& bank, double tau) {
  const Similarities s = similarities(rec, bank);
  return posteriors_from_similarities(s.global, s.local, tau);
}

/// Maximum global softmax probability.
inline double mcm_score(std::span<const double> global_probs) {
  return *std::max_element(global_probs.begin(), global_probs.end());
}

/// Maximum local softmax probability over every (patch, class).
inline double lmcm_score(const Matrix& local_probs) {
  const auto d = local_probs.data();
  return *std::max_element(d.begin(), d.end());
}

inline ScoreRecord glmcm_score(const PosteriorMatrix& pm) {
  ScoreRecord s;
  s.mcm = mcm_score(pm.global_probs);
  s.lmcm = lmcm_score(pm.local_probs);
  s.glmcm = s.mcm + s.lmcm;
  return s;
}

inline Detection detect(double score, double threshold) {
  return score >= threshold ? Detection::id : Detection::ood;
}

}  // namespace fobor
