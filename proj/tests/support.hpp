#pragma once

// Random instance generators and independent reference implementations used
// as oracles by the unit and acceptance tests. The reference code recomputes
// every quantity from raw embeddings with its own loops; it only borrows the
// library's plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "fobor/fobor.hpp"

namespace fobor::testing {

using Rng = std::mt19937_64;

inline std::vector<float> random_unit(std::size_t d, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(d);
  double n = 0.0;
  do {
    n = 0.0;
    for (double& x : v) {
      x = normal(rng);
      n += x * x;
    }
  } while (n < 1e-6);
  n = std::sqrt(n);
  std::vector<float> out(d);
  for (std::size_t k = 0; k < d; ++k) out[k] = static_cast<float>(v[k] / n);
  return out;
}

inline std::vector<float> random_vector(std::size_t d, double sigma, Rng& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  std::vector<float> v(d);
  for (float& x : v) x = static_cast<float>(normal(rng));
  return v;
}

inline EmbeddingRecord random_record(const Dims& dims, std::optional<std::uint32_t> label, Rng& rng) {
  EmbeddingRecord r;
  r.global_feature = random_unit(dims.feature_dim, rng);
  for (std::uint32_t i = 0; i < dims.num_patches; ++i) {
    r.patch_features.push_back(random_unit(dims.feature_dim, rng));
    r.patch_queries.push_back(random_vector(dims.key_dim, 1.0, rng));
  }
  r.global_key = random_vector(dims.key_dim, 1.0, rng);
  r.label = label;
  return r;
}

inline EmbeddingDataset random_dataset(const Dims& dims, std::size_t n, Split split, Rng& rng) {
  EmbeddingDataset ds;
  ds.dims = dims;
  ds.split = split;
  for (std::uint32_t m = 0; m < dims.num_classes; ++m) ds.class_names.push_back("c" + std::to_string(m));
  std::uniform_int_distribution<std::uint32_t> cls(0, dims.num_classes - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::optional<std::uint32_t> label;
    if (split != Split::ood_test) label = cls(rng);
    ds.records.push_back(random_record(dims, label, rng));
  }
  return ds;
}

inline ClassTokens random_tokens(std::size_t m, std::size_t d, Rng& rng, bool orthogonal_mix_on = false) {
  Matrix t(m, d);
  for (std::size_t c = 0; c < m; ++c) {
    const auto u = random_unit(d, rng);
    for (std::size_t k = 0; k < d; ++k) t(c, k) = u[k];
  }
  ClassTokens ct = make_class_tokens(std::move(t));
  if (orthogonal_mix_on) ct.mix = orthogonal_mix(d, rng());
  return ct;
}

inline PromptContext random_context(std::size_t l, std::size_t d, double sigma, Rng& rng) {
  std::normal_distribution<double> normal(0.0, sigma);
  PromptContext ctx{Matrix(l, d), true};
  for (double& x : ctx.vectors.data()) x = normal(rng);
  return ctx;
}

/// Random row-stochastic N x M matrix; some rows are uniform, one-hot or peaked.
inline Matrix random_probs(std::size_t n, std::size_t m, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> kind(0, 5);
  Matrix p(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = p.row(i);
    switch (kind(rng)) {
      case 0:
        std::fill(row.begin(), row.end(), 1.0 / static_cast<double>(m));
        break;
      case 1: {
        std::fill(row.begin(), row.end(), 0.0);
        row[std::uniform_int_distribution<std::size_t>(0, m - 1)(rng)] = 1.0;
        break;
      }
      case 2: {
        // Logits at temperature 0.01, the regime training runs in.
        double mx = -1e300;
        for (double& x : row) mx = std::max(mx, x = (2.0 * u(rng) - 1.0) / 0.01);
        double s = 0.0;
        for (double& x : row) s += x = std::exp(x - mx);
        for (double& x : row) x /= s;
        break;
      }
      default: {
        double s = 0.0;
        for (double& x : row) s += x = u(rng);
        for (double& x : row) x /= s;
      }
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

/// O(n^2) pair counting in half-units.
inline Concordance brute_concordance(const std::vector<double>& id, const std::vector<double>& ood) {
  Concordance c;
  for (double a : id)
    for (double b : ood) c.twice_wins += a > b ? 2 : (a == b ? 1 : 0);
  c.twice_pairs = 2 * id.size() * ood.size();
  return c;
}

/// Reference FPR: scans every candidate threshold, keeps the largest meeting the TPR target.
inline double brute_fpr(const std::vector<double>& id, const std::vector<double>& ood, double target) {
  double best = -std::numeric_limits<double>::infinity();
  for (double g : id) {
    const auto hits = std::count_if(id.begin(), id.end(), [&](double s) { return s >= g; });
    if (static_cast<double>(hits) / static_cast<double>(id.size()) >= target) best = std::max(best, g);
  }
  const auto fp = std::count_if(ood.begin(), ood.end(), [&](double s) { return s >= best; });
  return static_cast<double>(fp) / static_cast<double>(ood.size());
}

// ---------------------------------------------------------------------------
// Straight-line reference of the scoring and training objective
// ---------------------------------------------------------------------------

namespace ref {

inline double dotf(const std::vector<float>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += static_cast<double>(a[k]) * b[k];
  return s;
}

inline std::vector<std::vector<double>> bank(const PromptContext& ctx, const ClassTokens& ct) {
  const std::size_t d = ct.tokens.cols();
  std::vector<double> mean(d, 0.0);
  for (std::size_t l = 0; l < ctx.vectors.rows(); ++l)
    for (std::size_t k = 0; k < d; ++k) mean[k] += ctx.vectors(l, k) / static_cast<double>(ctx.vectors.rows());
  std::vector<std::vector<double>> g(ct.tokens.rows(), std::vector<double>(d));
  for (std::size_t m = 0; m < g.size(); ++m) {
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double s = ct.tokens(m, i);
      for (std::size_t k = 0; k < d; ++k) s += ct.mix(i, k) * mean[k];
      g[m][i] = s;
      n += s * s;
    }
    for (double& x : g[m]) x /= std::sqrt(n);
  }
  return g;
}

inline std::vector<double> softmax(const std::vector<double>& sims, double tau) {
  const double mx = *std::max_element(sims.begin(), sims.end());
  std::vector<double> p(sims.size());
  double z = 0.0;
  for (std::size_t m = 0; m < sims.size(); ++m) z += p[m] = std::exp((sims[m] - mx) / tau);
  for (double& x : p) x /= z;
  return p;
}

inline std::vector<double> probs(const std::vector<float>& f, const std::vector<std::vector<double>>& g,
                                 double tau) {
  std::vector<double> s(g.size());
  for (std::size_t m = 0; m < g.size(); ++m) s[m] = dotf(f, g[m]);
  return softmax(s, tau);
}

inline double plogp(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double x : p) h -= plogp(x);
  return h;
}

struct Scores {
  double mcm, lmcm, glmcm;
};

inline Scores scores(const EmbeddingRecord& rec, const std::vector<std::vector<double>>& g, double tau) {
  const auto pg = probs(rec.global_feature, g, tau);
  double lm = 0.0;
  for (const auto& f : rec.patch_features) {
    const auto p = probs(f, g, tau);
    lm = std::max(lm, *std::max_element(p.begin(), p.end()));
  }
  const double mcm = *std::max_element(pg.begin(), pg.end());
  return {mcm, lm, mcm + lm};
}

/// Indices of the n largest entries of v (skipping `skip`), ties to the smaller index.
inline std::vector<std::uint32_t> top(const std::vector<double>& v, std::size_t n, long skip = -1) {
  std::vector<std::uint32_t> out;
  std::vector<bool> used(v.size(), false);
  if (skip >= 0) used[static_cast<std::size_t>(skip)] = true;
  while (out.size() < n) {
    long best = -1;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!used[i] && (best < 0 || v[i] > v[static_cast<std::size_t>(best)])) best = static_cast<long>(i);
    if (best < 0) break;
    used[static_cast<std::size_t>(best)] = true;
    out.push_back(static_cast<std::uint32_t>(best));
  }
  return out;
}

/// Per-image choices that stay fixed within a step.
struct Frozen {
  std::uint32_t t = 0;
  std::vector<std::uint32_t> bg;
  std::vector<double> w;
  std::vector<std::uint32_t> classes, patches;
};

inline Frozen freeze(const EmbeddingRecord& rec, const std::vector<std::vector<double>>& g,
                     const TrainConfig& cfg) {
  Frozen fr;
  fr.t = *rec.label;
  const std::size_t num_classes = g.size();
  const std::uint32_t kappa =
      cfg.kappa ? cfg.kappa
                : std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::lround(0.2 * num_classes)));
  std::vector<std::uint32_t> fg;
  for (std::uint32_t i = 0; i < rec.patch_features.size(); ++i) {
    const auto p = probs(rec.patch_features[i], g, cfg.tau);
    std::uint32_t rank = 1;
    for (std::uint32_t m = 0; m < num_classes; ++m)
      if (p[m] > p[fr.t] || (p[m] == p[fr.t] && m < fr.t)) ++rank;
    (rank <= kappa ? fg : fr.bg).push_back(i);
  }
  if (cfg.use_abs && cfg.bg_loss_mode == BgLossMode::weighted && !fr.bg.empty()) {
    const double p_true = probs(rec.global_feature, g, cfg.tau)[fr.t];
    std::vector<double> logits;
    for (std::uint32_t j : fr.bg) {
      double s = 0.0;
      for (std::size_t k = 0; k < rec.global_key.size(); ++k)
        s += static_cast<double>(rec.patch_queries[j][k]) * rec.global_key[k];
      logits.push_back(s / std::sqrt(static_cast<double>(rec.global_key.size())));
    }
    const auto r = softmax(logits, 1.0);
    for (double ri : r) fr.w.push_back(1.0 / (1.0 + std::exp(-cfg.eta * p_true * ri)));
  }
  if (cfg.use_cfr && num_classes >= 2 && !fg.empty()) {
    std::vector<double> fusion(num_classes);
    for (std::size_t m = 0; m < num_classes; ++m) {
      double txt = 0.0;
      for (std::size_t k = 0; k < g[m].size(); ++k) txt += g[fr.t][k] * g[m][k];
      fusion[m] = cfg.lambda * txt + (1.0 - cfg.lambda) * dotf(rec.global_feature, g[m]);
    }
    fr.classes = top(fusion, cfg.n_class, fr.t);
    std::vector<double> conf;
    for (std::uint32_t i : fg) {
      double best = -1e300, sum = 0.0;
      for (std::uint32_t c : fr.classes) {
        const double s = dotf(rec.patch_features[i], g[c]);
        best = std::max(best, s);
        sum += s;
      }
      conf.push_back(cfg.patch_reduce == PatchReduce::max ? best : sum / static_cast<double>(fr.classes.size()));
    }
    for (std::uint32_t pos : top(conf, cfg.n_patch)) fr.patches.push_back(fg[pos]);
  }
  return fr;
}

/// Batch objective with choices frozen at `frozen_ctx`, evaluated at `ctx`.
inline LossBreakdown objective(const std::vector<const EmbeddingRecord*>& batch, const PromptContext& ctx,
                               const PromptContext& frozen_ctx, const ClassTokens& ct,
                               const TrainConfig& cfg) {
  const auto g0 = bank(frozen_ctx, ct);
  const auto g = bank(ctx, ct);
  double sum_id = 0.0, sum_bg = 0.0, sum_cfr = 0.0;
  int n_bg = 0, n_cfr = 0;
  for (const EmbeddingRecord* rec : batch) {
    const Frozen fr = freeze(*rec, g0, cfg);
    sum_id += -std::log(probs(rec->global_feature, g, cfg.tau)[fr.t]);
    if (!fr.bg.empty()) {
      double acc = 0.0;
      for (std::size_t k = 0; k < fr.bg.size(); ++k)
        acc += (fr.w.empty() ? 1.0 : fr.w[k]) * entropy(probs(rec->patch_features[fr.bg[k]], g, cfg.tau));
      sum_bg += -acc / static_cast<double>(fr.bg.size());
      ++n_bg;
    }
    if (!fr.classes.empty() && !fr.patches.empty()) {
      double acc = 0.0;
      for (std::uint32_t c : fr.classes)
        for (std::uint32_t j : fr.patches) {
          const auto p = probs(rec->patch_features[j], g, cfg.tau);
          if (cfg.pair_mode == PairMode::raw) {
            acc += plogp(p[fr.t]) + plogp(p[c]);
          } else {
            const double s = p[fr.t] + p[c];
            acc += plogp(p[fr.t] / s) + plogp(p[c] / s);
          }
        }
      sum_cfr += acc / static_cast<double>(fr.classes.size() * fr.patches.size());
      ++n_cfr;
    }
  }
  LossBreakdown lb;
  lb.l_id = sum_id / static_cast<double>(batch.size());
  lb.l_abs = n_bg ? sum_bg / n_bg : 0.0;
  lb.l_cfr = n_cfr ? sum_cfr / n_cfr : 0.0;
  lb.l_total = lb.l_id + cfg.alpha * lb.l_abs + cfg.beta * lb.l_cfr;
  return lb;
}

/// Central differences of the reference objective with choices frozen at ctx.
inline Matrix numeric_gradient(const std::vector<const EmbeddingRecord*>& batch, const PromptContext& ctx,
                               const ClassTokens& ct, const TrainConfig& cfg, double eps = 1e-5) {
  Matrix out(ctx.vectors.rows(), ctx.vectors.cols());
  PromptContext probe = ctx;
  for (std::size_t k = 0; k < out.data().size(); ++k) {
    const double x = probe.vectors.data()[k];
    probe.vectors.data()[k] = x + eps;
    const double up = objective(batch, probe, ctx, ct, cfg).l_total;
    probe.vectors.data()[k] = x - eps;
    const double down = objective(batch, probe, ctx, ct, cfg).l_total;
    probe.vectors.data()[k] = x;
    out.data()[k] = (up - down) / (2.0 * eps);
  }
  return out;
}

}  // namespace ref

/// Max over coordinates of |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.data().size(); ++k) {
    const double x = a.data()[k], y = b.data()[k];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

/// Small random training problem for gradient and identity checks.
struct Instance {
  EmbeddingDataset data;
  ClassTokens tokens;
  PromptContext context;
  Batch batch;
};

inline Instance random_instance(std::uint64_t seed, std::uint32_t max_m = 5, std::uint32_t max_n = 8,
                                std::uint32_t max_d = 16, std::uint32_t max_l = 4) {
  Rng rng(seed);
  auto pick = [&](std::uint32_t lo, std::uint32_t hi) {
    return std::uniform_int_distribution<std::uint32_t>(lo, hi)(rng);
  };
  const Dims dims{pick(2, max_m), pick(4, max_d), pick(2, 8), pick(1, max_n)};
  Instance inst;
  inst.data = random_dataset(dims, pick(2, 6), Split::id_train, rng);
  inst.tokens = random_tokens(dims.num_classes, dims.feature_dim, rng, seed % 2 == 1);
  inst.context = random_context(pick(1, max_l), dims.feature_dim, 0.3, rng);
  inst.batch = make_batch(inst.data.records);
  return inst;
}

}  // namespace fobor::testing
