#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fobor/abs.hpp"
#include "fobor/cfr.hpp"
#include "fobor/decomposition.hpp"
#include "fobor/embedding_store.hpp"
#include "fobor/error.hpp"
#include "fobor/parallel.hpp"
#include "fobor/scoring.hpp"
#include "fobor/tensor.hpp"
#include "fobor/text_encoder.hpp"

namespace fobor {

/// Background term formula. `weighted` applies the ABS weights and only takes
/// effect with use_abs; otherwise the uniform entropy term is used.
enum class BgLossMode { uniform, weighted };

struct TrainConfig {
  double alpha = 0.2;
  double beta = 3.0;
  double eta = kDefaultEta;
  std::uint32_t kappa = 0;  // 0 selects default_kappa(M)
  double lambda = kDefaultFusionWeight;
  std::uint32_t n_class = kDefaultNumConfusableClasses;
  std::uint32_t n_patch = kDefaultNumConfusablePatches;
  double tau = kDefaultTemperature;
  double lr = 0.002;
  double momentum = 0.9;
  std::uint32_t steps = 200;
  std::uint32_t batch_size = 32;
  std::uint64_t seed = 0;
  bool use_abs = true;
  bool use_cfr = true;
  BgLossMode bg_loss_mode = BgLossMode::weighted;
  PatchReduce patch_reduce = PatchReduce::max;
  PairMode pair_mode = PairMode::raw;
  std::uint32_t context_length = 16;
  double init_sigma = 0.02;
  std::uint32_t threads = 1;

  std::uint32_t kappa_for(std::size_t num_classes) const {
    return kappa == 0 ? default_kappa(num_classes) : kappa;
  }
  bool weighted_background() const { return use_abs && bg_loss_mode == BgLossMode::weighted; }

  void check() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw InvalidArgument("alpha and beta must be >= 0");
    if (!(eta > 0.0)) throw InvalidArgument("eta must be > 0");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
    if (n_class < 1 || n_patch < 1) throw InvalidArgument("n_class and n_patch must be >= 1");
    if (!(tau > 0.0)) throw InvalidArgument("tau must be > 0");
    if (!(lr >= 0.0 && std::isfinite(lr))) throw InvalidArgument("lr must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must lie in [0, 1)");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    if (context_length < 1) throw InvalidArgument("context_length must be >= 1");
    if (!(init_sigma >= 0.0)) throw InvalidArgument("init_sigma must be >= 0");
  }
};

struct LossBreakdown {
  double l_id = 0.0;
  double l_abs = 0.0;
  double l_cfr = 0.0;
  double l_total = 0.0;
};

using Batch = std::vector<const EmbeddingRecord*>;

inline Batch make_batch(std::span<const EmbeddingRecord> records) {
  Batch b;
  b.reserve(records.size());
  for (const auto& r : records) b.push_back(&r);
  return b;
}

inline double id_loss(std::span<const double> global_probs, std::size_t t) {
  if (t >= global_probs.size()) throw InvalidArgument("true class out of range");
  return -std::log(global_probs[t]);
}

/// Stop-gradient quantities of one image, fixed for the duration of a step.
struct ImagePlan {
  std::uint32_t label = 0;
  Decomposition decomposition;
  std::vector<double> bg_weights;  // empty in uniform mode
  std::vector<std::uint32_t> classes;
  std::vector<std::uint32_t> patches;

  bool has_bg() const noexcept { return !decomposition.bg.empty(); }
  bool has_cfr() const noexcept { return !classes.empty() && !patches.empty(); }
};

struct StepPlan {
  std::vector<ImagePlan> images;
};

inline ImagePlan plan_image(const EmbeddingRecord& rec, const TextBank& bank,
                            const PosteriorMatrix& pm, const TrainConfig& cfg) {
  if (!rec.label) throw InvalidArgument("training record without label");
  ImagePlan plan;
  plan.label = *rec.label;
  const std::size_t num_classes = bank.num_classes();
  plan.decomposition = decompose(pm.local_probs, plan.label, cfg.kappa_for(num_classes));
  const auto& dec = plan.decomposition;
  if (cfg.weighted_background() && !dec.bg.empty())
    plan.bg_weights = correlation_weights(rec, dec.bg, pm.global_probs[plan.label], cfg.eta).w;
  if (cfg.use_cfr && num_classes >= 2 && !dec.fg.empty()) {
    const ClassSimilarities sims =
        class_similarities(bank, rec.global_feature, plan.label, cfg.lambda);
    plan.classes = select_confusable_classes(sims.s_fusion, plan.label, cfg.n_class);
    plan.patches =
        select_confusable_patches(rec, dec.fg, bank, plan.classes, cfg.n_patch, cfg.patch_reduce)
            .patches;
  }
  return plan;
}

struct ImageTerms {
  double l_id = 0.0;
  double l_bg = 0.0;
  double l_cfr = 0.0;
};

namespace detail {

inline ImageTerms image_terms(const PosteriorMatrix& pm, const ImagePlan& plan,
                              const TrainConfig& cfg) {
  ImageTerms t;
  t.l_id = id_loss(pm.global_probs, plan.label);
  const auto& bg = plan.decomposition.bg;
  if (!bg.empty())
    t.l_bg = cfg.weighted_background() ? abs_loss(pm.local_probs, bg, plan.bg_weights)
                                       : ood_loss(pm.local_probs, bg);
  if (plan.has_cfr())
    t.l_cfr = cfr_loss(pm.local_probs, plan.patches, plan.classes, plan.label, cfg.pair_mode);
  return t;
}

/// Gradient of (coef_id * l_id + coef_bg * l_bg + coef_cfr * l_cfr) for one image
/// w.r.t. the text bank, accumulated into grad_bank.
inline void image_backward(const EmbeddingRecord& rec, const PosteriorMatrix& pm,
                           const ImagePlan& plan, const TrainConfig& cfg, double coef_id,
                           double coef_bg, double coef_cfr, Matrix& grad_bank) {
  const std::size_t num_classes = pm.num_classes();
  const std::size_t num_patches = pm.num_patches();
  const std::size_t d = grad_bank.cols();
  const double inv_tau = 1.0 / pm.temperature;

  std::vector<double> grad_global(num_classes, 0.0);
  for (std::size_t m = 0; m < num_classes; ++m)
    grad_global[m] = coef_id * (pm.global_probs[m] - (m == plan.label ? 1.0 : 0.0));

  Matrix grad_local(num_patches, num_classes);
  const auto& bg = plan.decomposition.bg;
  if (coef_bg != 0.0 && !bg.empty()) {
    const double scale = coef_bg / static_cast<double>(bg.size());
    for (std::size_t k = 0; k < bg.size(); ++k) {
      const std::uint32_t j = bg[k];
      const double w = cfg.weighted_background() ? plan.bg_weights[k] : 1.0;
      const auto p = pm.local_probs.row(j);
      const auto logp = pm.local_log_probs.row(j);
      const double h = entropy(p);
      // d(-w H)/dz_k = w p_k (ln p_k + H)
      for (std::size_t m = 0; m < num_classes; ++m)
        grad_local(j, m) += scale * w * p[m] * (logp[m] + h);
    }
  }
  if (coef_cfr != 0.0 && plan.has_cfr()) {
    const double scale =
        coef_cfr / static_cast<double>(plan.classes.size() * plan.patches.size());
    std::vector<double> grad_probs(num_classes);
    for (std::uint32_t j : plan.patches) {
      std::fill(grad_probs.begin(), grad_probs.end(), 0.0);
      const auto logp = pm.local_log_probs.row(j);
      for (std::uint32_t c : plan.classes) {
        const auto [gt, gc] = cfr_pair_grad(logp[plan.label], logp[c], cfg.pair_mode);
        grad_probs[plan.label] += scale * gt;
        grad_probs[c] += scale * gc;
      }
      softmax_backward(pm.local_probs.row(j), grad_probs, grad_local.row(j));
    }
  }

  // logits = sim / tau and sim = feature . g_m
  for (std::size_t m = 0; m < num_classes; ++m) {
    auto gm = grad_bank.row(m);
    const double a = grad_global[m] * inv_tau;
    if (a != 0.0)
      for (std::size_t k = 0; k < d; ++k) gm[k] += a * rec.global_feature[k];
    for (std::size_t i = 0; i < num_patches; ++i) {
      const double b = grad_local(i, m) * inv_tau;
      if (b == 0.0) continue;
      const auto& f = rec.patch_features[i];
      for (std::size_t k = 0; k < d; ++k) gm[k] += b * f[k];
    }
  }
}

}  // namespace detail

struct BatchEvaluation {
  LossBreakdown loss;
  std::optional<Matrix> grad_bank;  // dL_total / dg, M x d
};

/// Composite loss of a batch for a fixed plan; optionally its gradient w.r.t. the bank.
inline BatchEvaluation evaluate_batch(const Batch& batch, const StepPlan& plan,
                                      const TextBank& bank, const TrainConfig& cfg,
                                      bool want_gradient) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  if (plan.images.size() != batch.size()) throw InvalidArgument("plan does not match batch");
  const std::size_t n = batch.size();
  std::vector<PosteriorMatrix> post(n);
  std::vector<ImageTerms> terms(n);
  parallel_for(n, cfg.threads, [&](std::size_t i) {
    post[i] = posteriors(*batch[i], bank, cfg.tau);
    terms[i] = detail::image_terms(post[i], plan.images[i], cfg);
  });

  std::size_t n_bg = 0, n_cfr = 0;
  double sum_id = 0.0, sum_bg = 0.0, sum_cfr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum_id += terms[i].l_id;
    if (plan.images[i].has_bg()) {
      ++n_bg;
      sum_bg += terms[i].l_bg;
    }
    if (cfg.use_cfr && plan.images[i].has_cfr()) {
      ++n_cfr;
      sum_cfr += terms[i].l_cfr;
    }
  }
  BatchEvaluation out;
  LossBreakdown& lb = out.loss;
  lb.l_id = sum_id / static_cast<double>(n);
  lb.l_abs = n_bg ? sum_bg / static_cast<double>(n_bg) : 0.0;
  lb.l_cfr = n_cfr ? sum_cfr / static_cast<double>(n_cfr) : 0.0;
  lb.l_total = lb.l_id + cfg.alpha * lb.l_abs + cfg.beta * lb.l_cfr;

  if (want_gradient) {
    const double coef_id = 1.0 / static_cast<double>(n);
    const double coef_bg = n_bg ? cfg.alpha / static_cast<double>(n_bg) : 0.0;
    const double coef_cfr = n_cfr ? cfg.beta / static_cast<double>(n_cfr) : 0.0;
    std::vector<Matrix> per_image(n, Matrix(bank.num_classes(), bank.dim()));
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      detail::image_backward(*batch[i], post[i], plan.images[i], cfg, coef_id, coef_bg,
                             cfg.use_cfr ? coef_cfr : 0.0, per_image[i]);
    });
    Matrix g(bank.num_classes(), bank.dim());
    for (const Matrix& pi : per_image)
      for (std::size_t k = 0; k < g.data().size(); ++k) g.data()[k] += pi.data()[k];
    out.grad_bank = std::move(g);
  }
  return out;
}

inline StepPlan plan_batch(const Batch& batch, const TextBank& bank, const TrainConfig& cfg) {
  StepPlan plan;
  plan.images.resize(batch.size());
  parallel_for(batch.size(), cfg.threads, [&](std::size_t i) {
    const PosteriorMatrix pm = posteriors(*batch[i], bank, cfg.tau);
    plan.images[i] = plan_image(*batch[i], bank, pm, cfg);
  });
  return plan;
}

inline LossBreakdown total_loss(const Batch& batch, const PromptContext& ctx,
                                const ClassTokens& ct, const TrainConfig& cfg) {
  const TextBank bank = encode_classes(ctx, ct);
  return evaluate_batch(batch, plan_batch(batch, bank, cfg), bank, cfg, false).loss;
}

struct LossAndGradient {
  LossBreakdown loss;
  Matrix grad;  // L x d, w.r.t. the context vectors
};

inline LossAndGradient grad_total_loss_with_plan(const Batch& batch, const StepPlan& plan,
                                                 const PromptContext& ctx, const ClassTokens& ct,
                                                 const TrainConfig& cfg) {
  const EncodedClasses enc = encode_classes_with_tape(ctx, ct);
  BatchEvaluation ev = evaluate_batch(batch, plan, enc.bank, cfg, true);
  LossAndGradient out{ev.loss, encode_classes_backward(enc, ct, *ev.grad_bank, ctx.length())};
  if (!std::isfinite(out.loss.l_id)) throw NumericalError("non-finite gradient in l_id term");
  if (!std::isfinite(out.loss.l_abs)) throw NumericalError("non-finite gradient in l_abs term");
  if (!std::isfinite(out.loss.l_cfr)) throw NumericalError("non-finite gradient in l_cfr term");
  for (double g : out.grad.data())
    if (!std::isfinite(g)) throw NumericalError("non-finite gradient w.r.t. context vectors");
  return out;
}

/// Loss and reverse-mode gradient; selections and ABS weights are computed at
/// `ctx` and held constant.
inline LossAndGradient grad_total_loss(const Batch& batch, const PromptContext& ctx,
                                       const ClassTokens& ct, const TrainConfig& cfg) {
  const TextBank bank = encode_classes(ctx, ct);
  return grad_total_loss_with_plan(batch, plan_batch(batch, bank, cfg), ctx, ct, cfg);
}

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

struct FdOptions {
  double eps = 1e-5;
  /// Denominator floor for the per-coordinate relative error.
  double abs_floor = 1e-6;
  std::size_t max_coordinates = 1000;
  std::uint64_t seed = 0;
};

/// Max over coordinates of |analytic - central difference| / max(|analytic|, |numeric|, floor).
/// Above max_coordinates a seeded random subset is checked.
template <class LossFn>
double fd_compare(LossFn&& loss, const Matrix& point, const Matrix& analytic,
                  const FdOptions& opt = {}) {
  if (!(opt.eps > 0.0)) throw InvalidArgument("fd epsilon must be > 0");
  const std::size_t n = point.data().size();
  std::vector<std::size_t> coords(n);
  std::iota(coords.begin(), coords.end(), 0);
  if (n > opt.max_coordinates) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }
  Matrix x = point;
  double worst = 0.0;
  for (std::size_t k : coords) {
    const double orig = x.data()[k];
    x.data()[k] = orig + opt.eps;
    const double up = loss(x);
    x.data()[k] = orig - opt.eps;
    const double down = loss(x);
    x.data()[k] = orig;
    const double numeric = (up - down) / (2.0 * opt.eps);
    const double a = analytic.data()[k];
    const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

inline double fd_check(const Batch& batch, const PromptContext& ctx, const ClassTokens& ct,
                       const TrainConfig& cfg, const FdOptions& opt = {}) {
  const TextBank bank = encode_classes(ctx, ct);
  const StepPlan plan = plan_batch(batch, bank, cfg);
  const LossAndGradient lg = grad_total_loss_with_plan(batch, plan, ctx, ct, cfg);
  auto loss_at = [&](const Matrix& v) {
    const PromptContext probe{v, true};
    return evaluate_batch(batch, plan, encode_classes(probe, ct), cfg, false).loss.l_total;
  };
  return fd_compare(loss_at, ctx.vectors, lg.grad, opt);
}

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

struct TrainResult {
  PromptContext context;
  std::vector<LossBreakdown> history;  // loss at the start of each step
};

/// Epoch-wise shuffled mini-batches drawn from a seeded generator.
class BatchSampler {
 public:
  BatchSampler(std::size_t num_records, std::size_t batch_size, std::uint64_t seed)
      : order_(num_records), batch_size_(std::min(batch_size, num_records)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_size_);
    while (out.size() < batch_size_) {
      if (cursor_ == order_.size()) reshuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    if (batch_size_ < order_.size()) std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// SGD with momentum on the context vectors: v <- mu v + g; x <- x - lr v.
inline TrainResult train(const EmbeddingDataset& train_set, const ClassTokens& ct,
                         const TrainConfig& cfg, std::optional<PromptContext> init = std::nullopt,
                         const std::function<void(std::uint32_t, const LossBreakdown&)>& on_step = {}) {
  cfg.check();
  if (train_set.split != Split::id_train && train_set.split != Split::id_test)
    throw InvalidArgument("training requires a labelled dataset");
  if (train_set.records.empty()) throw InvalidArgument("training set is empty");
  if (train_set.dims.num_classes != ct.num_classes() || train_set.dims.feature_dim != ct.dim())
    throw InvalidArgument("class tokens do not match the training set dims");

  TrainResult res;
  res.context = init ? std::move(*init)
                     : init_prompt(cfg.context_length, ct.dim(), cfg.init_sigma, cfg.seed);
  Matrix velocity(res.context.length(), res.context.dim());
  BatchSampler sampler(train_set.records.size(), cfg.batch_size, cfg.seed ^ 0x9e3779b97f4a7c15ull);
  res.history.reserve(cfg.steps);

  for (std::uint32_t step = 0; step < cfg.steps; ++step) {
    Batch batch;
    for (std::size_t i : sampler.next()) batch.push_back(&train_set.records[i]);
    LossAndGradient lg;
    try {
      lg = grad_total_loss(batch, res.context, ct, cfg);
    } catch (const NumericalError& e) {
      throw NumericalError("training diverged at step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(lg.loss.l_total))
      throw NumericalError("training diverged at step " + std::to_string(step));
    res.history.push_back(lg.loss);
    if (on_step) on_step(step, lg.loss);
    auto v = velocity.data();
    auto x = res.context.vectors.data();
    const auto g = lg.grad.data();
    for (std::size_t k = 0; k < x.size(); ++k) {
      v[k] = cfg.momentum * v[k] + g[k];
      x[k] -= cfg.lr * v[k];
    }
  }
  return res;
}

}  // namespace fobor
