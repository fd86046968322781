#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "fobor/embedding_store.hpp"
#include "fobor/error.hpp"
#include "fobor/tensor.hpp"
#include "fobor/text_encoder.hpp"

// Synthetic embedding fixtures. Every image has a foreground region drawn
// around an object centroid and a background region drawn either from the
// class's own context centroid (probability bg_correlation) or from a shared
// neutral centroid. Class text tokens lean slightly toward their class's
// context, so correlated backgrounds leak class evidence. OOD images carry
// foregrounds from centroids orthogonal to every ID class but reuse the same
// background mechanism with a randomly chosen ID context.
namespace fobor {

struct ConfusablePair {
  std::uint32_t a = 0;
  std::uint32_t b = 1;
  double cosine = 0.95;

  friend bool operator==(const ConfusablePair&, const ConfusablePair&) = default;
};

struct FixtureSpec {
  std::uint32_t num_classes = 10;
  std::uint32_t feature_dim = 32;
  std::uint32_t key_dim = 16;
  std::uint32_t num_patches = 16;
  std::uint32_t images_per_class = 16;
  std::uint32_t test_images_per_class = 20;
  std::uint32_t ood_images = 200;
  std::uint32_t ood_classes = 4;
  double fg_fraction = 0.5;
  double bg_correlation = 0.8;
  std::vector<ConfusablePair> confusable_pairs{{0, 1, 0.95}};
  /// Expected norm of the isotropic perturbation added to each feature before normalization.
  double noise_sigma = 1.5;
  /// Weight of the class's context centroid inside its text token.
  double text_context_coupling = 0.3;
  /// Weight of a direction shared by every text token and absent from images.
  double text_bias = 10.0;
  double text_noise = 0.1;
  /// Mean q.k / sqrt(d_k) per patch kind.
  double attn_foreground = 0.5;
  double attn_context = 1.5;
  double attn_neutral = 0.0;
  double attn_noise = 0.25;
  std::uint64_t seed = 0;

  friend bool operator==(const FixtureSpec&, const FixtureSpec&) = default;

  std::size_t directions_needed() const {
    return 2 * std::size_t{num_classes} + 2 + ood_classes;
  }

  void check() const {
    if (num_classes < 2) throw InvalidArgument("fixture needs M >= 2");
    if (feature_dim < 1 || key_dim < 1 || num_patches < 1)
      throw InvalidArgument("fixture dims must be >= 1");
    if (images_per_class < 1 || test_images_per_class < 1 || ood_images < 1 || ood_classes < 1)
      throw InvalidArgument("fixture image counts must be >= 1");
    if (!(fg_fraction > 0.0 && fg_fraction <= 1.0)) throw InvalidArgument("fg_fraction must lie in (0, 1]");
    if (!(bg_correlation >= 0.0 && bg_correlation <= 1.0))
      throw InvalidArgument("bg_correlation must lie in [0, 1]");
    if (!(noise_sigma >= 0.0) || !(text_noise >= 0.0) || !(attn_noise >= 0.0))
      throw InvalidArgument("noise levels must be >= 0");
    std::vector<int> used(num_classes, 0);
    for (const auto& p : confusable_pairs) {
      if (p.a >= num_classes || p.b >= num_classes || p.a == p.b)
        throw InvalidArgument("confusable pair references an invalid class");
      if (!(p.cosine >= 0.9 && p.cosine < 1.0))
        throw InvalidArgument("confusable pair cosine must lie in [0.9, 1)");
      if (used[p.a]++ || used[p.b]++)
        throw InvalidArgument("a class may appear in at most one confusable pair");
    }
    if (directions_needed() > feature_dim)
      throw InvalidArgument("infeasible fixture: " + std::to_string(directions_needed()) +
                            " orthogonal directions needed (2M + 2 + ood_classes) but d = " +
                            std::to_string(feature_dim));
  }
};

enum class PatchKind : std::uint8_t { foreground, class_context, neutral_context };

struct FixtureGeometry {
  Matrix class_centroids;    // M x d
  Matrix context_centroids;  // M x d
  std::vector<double> neutral_centroid;
  std::vector<double> bias_direction;
  Matrix ood_centroids;      // ood_classes x d
  std::vector<double> key_direction;
};

struct Fixture {
  EmbeddingDataset train;
  EmbeddingDataset id_test;
  EmbeddingDataset ood_test;
  ClassTokens class_tokens;
  FixtureGeometry geometry;
  // record -> patch -> kind, per split
  std::vector<std::vector<PatchKind>> train_kinds;
  std::vector<std::vector<PatchKind>> id_test_kinds;
  std::vector<std::vector<PatchKind>> ood_kinds;
};

namespace detail {

class FixtureSampler {
 public:
  FixtureSampler(const FixtureSpec& spec, const FixtureGeometry& geo)
      : spec_(spec), geo_(geo), rng_(spec.seed * 0x2545f4914f6cdd1dull + 17) {}

  /// Adds isotropic noise of expected norm sigma and returns the unit vector as f32.
  std::vector<float> perturbed_unit(std::span<const double> centre, double sigma) {
    std::vector<double> v(centre.begin(), centre.end());
    const double per_coord = sigma / std::sqrt(static_cast<double>(v.size()));
    for (double& x : v) x += per_coord * normal_(rng_);
    return to_unit_f32(v);
  }

  static std::vector<float> to_unit_f32(std::span<const double> v) {
    const double n = norm2<double>(v);
    if (!(n > 1e-12)) throw NumericalError("degenerate fixture vector");
    std::vector<float> out(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = static_cast<float>(v[k] / n);
    return out;
  }

  /// One image with the given foreground centroid and the context of class `context_class`.
  EmbeddingRecord image(std::span<const double> fg_centroid, std::uint32_t context_class,
                        std::vector<PatchKind>& kinds) {
    const std::uint32_t n = spec_.num_patches;
    const auto n_fg = static_cast<std::uint32_t>(std::clamp<long>(
        std::lround(spec_.fg_fraction * n), 1, static_cast<long>(n)));
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);

    kinds.assign(n, PatchKind::neutral_context);
    for (std::uint32_t k = 0; k < n_fg; ++k) kinds[order[k]] = PatchKind::foreground;
    for (std::uint32_t k = n_fg; k < n; ++k)
      if (uniform_(rng_) < spec_.bg_correlation) kinds[order[k]] = PatchKind::class_context;

    EmbeddingRecord rec;
    const std::size_t d = spec_.feature_dim;
    std::vector<double> sum(d, 0.0);
    for (std::uint32_t i = 0; i < n; ++i) {
      std::span<const double> centre = fg_centroid;
      if (kinds[i] == PatchKind::class_context) centre = geo_.context_centroids.row(context_class);
      else if (kinds[i] == PatchKind::neutral_context) centre = geo_.neutral_centroid;
      rec.patch_features.push_back(perturbed_unit(centre, spec_.noise_sigma));
      for (std::size_t k = 0; k < d; ++k) sum[k] += rec.patch_features.back()[k];
    }
    for (double& x : sum) x /= static_cast<double>(n);
    rec.global_feature = perturbed_unit(sum, spec_.noise_sigma / std::sqrt(static_cast<double>(n)));

    const std::size_t dk = spec_.key_dim;
    const double root = std::sqrt(static_cast<double>(dk));
    const double per_coord = spec_.attn_noise / root;
    for (std::uint32_t i = 0; i < n; ++i) {
      const double level = kinds[i] == PatchKind::foreground      ? spec_.attn_foreground
                           : kinds[i] == PatchKind::class_context ? spec_.attn_context
                                                                  : spec_.attn_neutral;
      std::vector<float> q(dk);
      for (std::size_t k = 0; k < dk; ++k)
        q[k] = static_cast<float>(level * geo_.key_direction[k] + per_coord * normal_(rng_));
      rec.patch_queries.push_back(std::move(q));
    }
    // k = sqrt(d_k) * k_hat, so q.k / sqrt(d_k) is centred on the kind's level.
    rec.global_key.resize(dk);
    for (std::size_t k = 0; k < dk; ++k)
      rec.global_key[k] = static_cast<float>(root * geo_.key_direction[k]);
    return rec;
  }

  std::uint32_t uniform_index(std::uint32_t n) {
    return std::uniform_int_distribution<std::uint32_t>(0, n - 1)(rng_);
  }

 private:
  const FixtureSpec& spec_;
  const FixtureGeometry& geo_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline std::vector<std::string> fixture_class_names(std::uint32_t m) {
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < m; ++i) names.push_back("class_" + std::to_string(i));
  return names;
}

}  // namespace detail

inline FixtureGeometry fixture_geometry(const FixtureSpec& spec) {
  const std::size_t d = spec.feature_dim;
  const std::size_t m = spec.num_classes;
  const Matrix basis = orthogonal_mix(d, spec.seed ^ 0x5bd1e995ull);
  auto basis_row = [&](std::size_t r) {
    const auto row = basis.row(r);
    return std::vector<double>(row.begin(), row.end());
  };

  FixtureGeometry geo;
  geo.class_centroids = Matrix(m, d);
  geo.context_centroids = Matrix(m, d);
  for (std::size_t c = 0; c < m; ++c)
    for (std::size_t k = 0; k < d; ++k) {
      geo.class_centroids(c, k) = basis(c, k);
      geo.context_centroids(c, k) = basis(m + c, k);
    }
  for (const auto& p : spec.confusable_pairs) {
    const double s = std::sqrt(1.0 - p.cosine * p.cosine);
    for (std::size_t k = 0; k < d; ++k)
      geo.class_centroids(p.b, k) = p.cosine * basis(p.a, k) + s * basis(p.b, k);
  }
  geo.neutral_centroid = basis_row(2 * m);
  geo.bias_direction = basis_row(2 * m + 1);
  geo.ood_centroids = Matrix(spec.ood_classes, d);
  for (std::size_t o = 0; o < spec.ood_classes; ++o)
    for (std::size_t k = 0; k < d; ++k) geo.ood_centroids(o, k) = basis(2 * m + 2 + o, k);

  std::mt19937_64 rng(spec.seed ^ 0x7f4a7c15ull);
  std::normal_distribution<double> normal(0.0, 1.0);
  geo.key_direction.resize(spec.key_dim);
  for (double& x : geo.key_direction) x = normal(rng);
  const double kn = norm2<double>(geo.key_direction);
  for (double& x : geo.key_direction) x /= kn;
  return geo;
}

inline ClassTokens fixture_class_tokens(const FixtureSpec& spec, const FixtureGeometry& geo) {
  const std::size_t d = spec.feature_dim;
  std::mt19937_64 rng(spec.seed ^ 0x1b873593ull);
  std::normal_distribution<double> normal(0.0, spec.text_noise / std::sqrt(static_cast<double>(d)));
  Matrix tokens(spec.num_classes, d);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    std::vector<double> v(d);
    for (std::size_t k = 0; k < d; ++k)
      v[k] = geo.class_centroids(c, k) + spec.text_context_coupling * geo.context_centroids(c, k) +
             spec.text_bias * geo.bias_direction[k] + normal(rng);
    const auto unit = detail::FixtureSampler::to_unit_f32(v);
    for (std::size_t k = 0; k < d; ++k) tokens(c, k) = unit[k];
  }
  return make_class_tokens(std::move(tokens));
}

inline Fixture generate_fixture(const FixtureSpec& spec) {
  spec.check();
  Fixture fx;
  fx.geometry = fixture_geometry(spec);
  fx.class_tokens = fixture_class_tokens(spec, fx.geometry);
  detail::FixtureSampler sampler(spec, fx.geometry);

  const Dims dims{spec.num_classes, spec.feature_dim, spec.key_dim, spec.num_patches};
  const auto names = detail::fixture_class_names(spec.num_classes);
  auto make_split = [&](Split split) {
    EmbeddingDataset ds;
    ds.dims = dims;
    ds.class_names = names;
    ds.split = split;
    return ds;
  };
  fx.train = make_split(Split::id_train);
  fx.id_test = make_split(Split::id_test);
  fx.ood_test = make_split(Split::ood_test);

  auto fill_id = [&](EmbeddingDataset& ds, std::vector<std::vector<PatchKind>>& kinds,
                     std::uint32_t per_class) {
    for (std::uint32_t c = 0; c < spec.num_classes; ++c)
      for (std::uint32_t k = 0; k < per_class; ++k) {
        kinds.emplace_back();
        ds.records.push_back(sampler.image(fx.geometry.class_centroids.row(c), c, kinds.back()));
        ds.records.back().label = c;
      }
  };
  fill_id(fx.train, fx.train_kinds, spec.images_per_class);
  fill_id(fx.id_test, fx.id_test_kinds, spec.test_images_per_class);
  for (std::uint32_t k = 0; k < spec.ood_images; ++k) {
    const std::uint32_t o = k % spec.ood_classes;
    const std::uint32_t context = sampler.uniform_index(spec.num_classes);
    fx.ood_kinds.emplace_back();
    fx.ood_test.records.push_back(
        sampler.image(fx.geometry.ood_centroids.row(o), context, fx.ood_kinds.back()));
  }
  return fx;
}

}  // namespace fobor
