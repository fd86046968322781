#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fobor/embedding_store.hpp"
#include "fobor/error.hpp"
#include "fobor/parallel.hpp"
#include "fobor/scoring.hpp"
#include "fobor/text_encoder.hpp"

namespace fobor {

/// Mann-Whitney statistic in half-units: 2 * #{id > ood} + #{id == ood}.
struct Concordance {
  std::uint64_t twice_wins = 0;
  std::uint64_t twice_pairs = 0;  // 2 * n_id * n_ood
};

inline Concordance concordance(std::span<const double> id_scores, std::span<const double> ood_scores) {
  if (id_scores.empty() || ood_scores.empty()) throw InvalidArgument("AUROC needs non-empty score sets");
  std::vector<double> ood(ood_scores.begin(), ood_scores.end());
  std::sort(ood.begin(), ood.end());
  Concordance c;
  for (double s : id_scores) {
    const auto lo = std::lower_bound(ood.begin(), ood.end(), s);
    const auto hi = std::upper_bound(lo, ood.end(), s);
    c.twice_wins += 2 * static_cast<std::uint64_t>(lo - ood.begin()) +
                    static_cast<std::uint64_t>(hi - lo);
  }
  c.twice_pairs = 2 * static_cast<std::uint64_t>(id_scores.size()) * ood_scores.size();
  return c;
}

/// Converts a concordance to a probability. The smaller side of 1/2 is formed
/// by division and the larger as its complement, so swapping the two score
/// sets yields values that sum to exactly 1.
inline double concordance_to_auroc(const Concordance& c) {
  const auto total = static_cast<double>(c.twice_pairs);
  if (2 * c.twice_wins <= c.twice_pairs) return static_cast<double>(c.twice_wins) / total;
  return 1.0 - static_cast<double>(c.twice_pairs - c.twice_wins) / total;
}

/// P(id > ood) + P(id == ood) / 2, in O(n log n).
inline double auroc(std::span<const double> id_scores, std::span<const double> ood_scores) {
  return concordance_to_auroc(concordance(id_scores, ood_scores));
}

/// FPR at the largest threshold whose ID true-positive rate is >= tpr_target.
inline double fpr_at_tpr(std::span<const double> id_scores, std::span<const double> ood_scores,
                         double tpr_target = 0.95) {
  if (id_scores.empty() || ood_scores.empty()) throw InvalidArgument("FPR95 needs non-empty score sets");
  if (!(tpr_target > 0.0 && tpr_target <= 1.0)) throw InvalidArgument("tpr_target must lie in (0, 1]");
  std::vector<double> id(id_scores.begin(), id_scores.end());
  std::sort(id.begin(), id.end(), std::greater<>());
  const double n_id = static_cast<double>(id.size());
  // Walk down the sorted ID scores until the TPR target is met.
  double threshold = id.back();
  for (std::size_t k = 0; k < id.size();) {
    std::size_t end = k + 1;
    while (end < id.size() && id[end] == id[k]) ++end;
    if (static_cast<double>(end) / n_id >= tpr_target) {
      threshold = id[k];
      break;
    }
    k = end;
  }
  const auto false_pos =
      std::count_if(ood_scores.begin(), ood_scores.end(), [&](double s) { return s >= threshold; });
  return static_cast<double>(false_pos) / static_cast<double>(ood_scores.size());
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

enum class ScoreFn { mcm, glmcm };

inline const char* to_string(ScoreFn f) { return f == ScoreFn::mcm ? "mcm" : "glmcm"; }

struct SetMetrics {
  double auroc = 0.0;
  double fpr95 = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
};

/// Equal-width bins over [lo, hi]; the last bin is closed on the right.
struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::uint64_t> counts;
};

inline constexpr std::size_t kHistogramBins = 20;

inline Histogram histogram(std::span<const double> values, double lo, double hi,
                           std::size_t bins = kHistogramBins) {
  if (!(hi > lo) || bins == 0) throw InvalidArgument("histogram needs hi > lo and bins >= 1");
  Histogram h{lo, hi, std::vector<std::uint64_t>(bins, 0)};
  const double width = (hi - lo) / static_cast<double>(bins);
  for (double v : values) {
    const double k = std::floor((v - lo) / width);
    h.counts[static_cast<std::size_t>(std::clamp(k, 0.0, static_cast<double>(bins - 1)))] += 1;
  }
  return h;
}

/// Score range of each function: MCM lies in [1/M, 1], GL-MCM in [2/M, 2].
inline double score_upper_bound(ScoreFn f) { return f == ScoreFn::mcm ? 1.0 : 2.0; }

struct EvalReport {
  ScoreFn score_fn = ScoreFn::glmcm;
  std::map<std::string, SetMetrics> per_ood_set;
  double average_auroc = 0.0;
  double average_fpr95 = 0.0;
  Histogram id_histogram;
  std::map<std::string, Histogram> ood_histograms;
};

inline std::vector<ScoreRecord> score_dataset(const EmbeddingDataset& ds, const TextBank& bank,
                                              double tau, std::size_t threads = 1) {
  std::vector<ScoreRecord> out(ds.records.size());
  parallel_for(ds.records.size(), threads, [&](std::size_t i) {
    out[i] = glmcm_score(posteriors(ds.records[i], bank, tau));
  });
  return out;
}

inline std::vector<double> select_scores(std::span<const ScoreRecord> s, ScoreFn fn) {
  std::vector<double> out;
  out.reserve(s.size());
  for (const auto& r : s) out.push_back(fn == ScoreFn::mcm ? r.mcm : r.glmcm);
  return out;
}

struct OodSet {
  std::string name;
  const EmbeddingDataset* data = nullptr;
};

/// One report per score function (MCM first, then GL-MCM).
inline std::vector<EvalReport> evaluate(const TextBank& bank, const EmbeddingDataset& id_test,
                                        std::span<const OodSet> ood_sets, double tau,
                                        std::size_t threads = 1) {
  if (ood_sets.empty()) throw InvalidArgument("evaluation needs at least one OOD set");
  if (id_test.records.empty()) throw InvalidArgument("ID test set is empty");
  const auto id_scores = score_dataset(id_test, bank, tau, threads);
  std::vector<std::vector<ScoreRecord>> ood_scores;
  for (const auto& s : ood_sets) {
    if (!s.data || s.data->records.empty())
      throw InvalidArgument("OOD set '" + s.name + "' is empty");
    ood_scores.push_back(score_dataset(*s.data, bank, tau, threads));
  }

  std::vector<EvalReport> reports;
  for (ScoreFn fn : {ScoreFn::mcm, ScoreFn::glmcm}) {
    EvalReport rep;
    rep.score_fn = fn;
    const auto id = select_scores(id_scores, fn);
    rep.id_histogram = histogram(id, 0.0, score_upper_bound(fn));
    for (std::size_t k = 0; k < ood_sets.size(); ++k) {
      const auto ood = select_scores(ood_scores[k], fn);
      SetMetrics m{auroc(id, ood), fpr_at_tpr(id, ood), id.size(), ood.size()};
      rep.per_ood_set[ood_sets[k].name] = m;
      rep.ood_histograms[ood_sets[k].name] = histogram(ood, 0.0, score_upper_bound(fn));
      rep.average_auroc += m.auroc;
      rep.average_fpr95 += m.fpr95;
    }
    rep.average_auroc /= static_cast<double>(ood_sets.size());
    rep.average_fpr95 /= static_cast<double>(ood_sets.size());
    reports.push_back(std::move(rep));
  }
  return reports;
}

inline std::vector<EvalReport> evaluate(const PromptContext& ctx, const ClassTokens& ct,
                                        const EmbeddingDataset& id_test,
                                        std::span<const OodSet> ood_sets, double tau,
                                        std::size_t threads = 1) {
  return evaluate(encode_classes(ctx, ct), id_test, ood_sets, tau, threads);
}

}  // namespace fobor
