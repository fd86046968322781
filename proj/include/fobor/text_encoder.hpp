#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "fobor/binary_io.hpp"
#include "fobor/error.hpp"
#include "fobor/tensor.hpp"

// Surrogate prompt-learning text pathway:
//   g_m = normalize(W * mean(v_1..v_L) + w_m)
// Only the context vectors v_l are learnable; W and the class tokens w_m are frozen.
namespace fobor {

struct PromptContext {
  Matrix vectors;  // L x d
  bool learnable = true;

  std::size_t length() const noexcept { return vectors.rows(); }
  std::size_t dim() const noexcept { return vectors.cols(); }

  friend bool operator==(const PromptContext&, const PromptContext&) = default;
};

struct ClassTokens {
  Matrix tokens;  // M x d
  Matrix mix;     // d x d, identity unless a seeded orthogonal mix is requested

  std::size_t num_classes() const noexcept { return tokens.rows(); }
  std::size_t dim() const noexcept { return tokens.cols(); }

  friend bool operator==(const ClassTokens&, const ClassTokens&) = default;
};

/// Unit-norm class text embeddings g_1..g_M (rows).
struct TextBank {
  Matrix embeddings;

  std::size_t num_classes() const noexcept { return embeddings.rows(); }
  std::size_t dim() const noexcept { return embeddings.cols(); }
  std::span<const double> operator[](std::size_t m) const { return embeddings.row(m); }
};

/// Forward result with the intermediates needed to back-propagate.
struct EncodedClasses {
  TextBank bank;
  std::vector<double> norms;  // ||W c + w_m|| before normalization
  std::vector<double> mean_context;
};

inline constexpr double kDegenerateNorm = 1e-12;

/// Random d x d orthogonal matrix (Gram-Schmidt on a seeded Gaussian draw).
inline Matrix orthogonal_mix(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix q(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    for (;;) {
      auto row = q.row(i);
      for (double& x : row) x = normal(rng);
      for (std::size_t j = 0; j < i; ++j) {
        const double p = dot<double, double>(row, q.row(j));
        for (std::size_t k = 0; k < d; ++k) row[k] -= p * q(j, k);
      }
      const double n = norm2<double>(row);
      if (n > 1e-8) {
        for (double& x : row) x /= n;
        break;
      }
    }
  }
  return q;
}

inline ClassTokens make_class_tokens(Matrix tokens) {
  ClassTokens ct;
  ct.mix = Matrix::identity(tokens.cols());
  ct.tokens = std::move(tokens);
  return ct;
}

inline EncodedClasses encode_classes_with_tape(const PromptContext& ctx, const ClassTokens& ct) {
  const std::size_t d = ct.dim();
  const std::size_t num_classes = ct.num_classes();
  if (ctx.dim() != d || ct.mix.rows() != d || ct.mix.cols() != d)
    throw InvalidArgument("prompt context and class tokens disagree on d");
  if (ctx.length() == 0) throw InvalidArgument("prompt context must have L >= 1");

  EncodedClasses enc;
  enc.mean_context.assign(d, 0.0);
  for (std::size_t l = 0; l < ctx.length(); ++l)
    for (std::size_t k = 0; k < d; ++k) enc.mean_context[k] += ctx.vectors(l, k);
  for (double& x : enc.mean_context) x /= static_cast<double>(ctx.length());

  std::vector<double> shift(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    shift[i] = dot<double, double>(ct.mix.row(i), enc.mean_context);

  enc.bank.embeddings = Matrix(num_classes, d);
  enc.norms.resize(num_classes);
  for (std::size_t m = 0; m < num_classes; ++m) {
    auto g = enc.bank.embeddings.row(m);
    for (std::size_t k = 0; k < d; ++k) g[k] = shift[k] + ct.tokens(m, k);
    const double n = norm2<double>(g);
    if (!(n >= kDegenerateNorm))
      throw NumericalError("degenerate normalization for class " + std::to_string(m));
    enc.norms[m] = n;
    for (double& x : g) x /= n;
  }
  return enc;
}

inline TextBank encode_classes(const PromptContext& ctx, const ClassTokens& ct) {
  return encode_classes_with_tape(ctx, ct).bank;
}

/// Given dL/dg (M x d), returns dL/dv (L x d). Every context row receives the
/// same gradient because the encoder depends on the context only through its mean.
inline Matrix encode_classes_backward(const EncodedClasses& enc, const ClassTokens& ct,
                                      const Matrix& grad_bank, std::size_t context_length) {
  const std::size_t d = ct.dim();
  std::vector<double> grad_shift(d, 0.0);
  for (std::size_t m = 0; m < ct.num_classes(); ++m) {
    const auto g = enc.bank.embeddings.row(m);
    const auto a = grad_bank.row(m);
    const double proj = dot<double, double>(g, a);
    for (std::size_t k = 0; k < d; ++k) grad_shift[k] += (a[k] - g[k] * proj) / enc.norms[m];
  }
  std::vector<double> grad_mean(d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < d; ++k) grad_mean[k] += ct.mix(i, k) * grad_shift[i];

  Matrix out(context_length, d);
  const double inv_len = 1.0 / static_cast<double>(context_length);
  for (std::size_t l = 0; l < context_length; ++l)
    for (std::size_t k = 0; k < d; ++k) out(l, k) = grad_mean[k] * inv_len;
  return out;
}

/// i.i.d. N(0, sigma^2) context vectors, deterministic per seed.
inline PromptContext init_prompt(std::size_t length, std::size_t dim, double init_sigma,
                                 std::uint64_t seed) {
  if (length < 1 || dim < 1) throw InvalidArgument("init_prompt requires L, d >= 1");
  if (!(init_sigma >= 0.0)) throw InvalidArgument("init_sigma must be >= 0");
  PromptContext ctx{Matrix(length, dim), true};
  if (init_sigma == 0.0) return ctx;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, init_sigma);
  for (double& x : ctx.vectors.data()) x = normal(rng);
  return ctx;
}

// ---- FOBP prompt checkpoint: "FOBP" | version u32 | L u32 | d u32 | L*d f32 ----

inline constexpr std::uint32_t kFobpVersion = 1;

inline void write_prompt(const PromptContext& ctx, std::ostream& os) {
  io::put_magic(os, "FOBP");
  io::put_u32(os, kFobpVersion);
  io::put_u32(os, static_cast<std::uint32_t>(ctx.length()));
  io::put_u32(os, static_cast<std::uint32_t>(ctx.dim()));
  for (double x : ctx.vectors.data()) io::put_f32(os, static_cast<float>(x));
  if (!os) throw Error("I/O failure while writing prompt checkpoint");
}

inline PromptContext read_prompt(std::istream& is) {
  io::Reader rd(is);
  if (rd.magic(4) != "FOBP") throw FormatError("bad magic");
  if (const auto v = rd.u32("version"); v != kFobpVersion)
    throw FormatError("unsupported version " + std::to_string(v));
  const std::uint32_t length = rd.u32("L");
  const std::uint32_t dim = rd.u32("d");
  if (length == 0 || dim == 0) throw FormatError("empty prompt checkpoint");
  if (std::uint64_t{length} * dim > (1ull << 28)) throw FormatError("prompt checkpoint too large");
  PromptContext ctx{Matrix(length, dim), true};
  for (double& x : ctx.vectors.data()) {
    x = rd.f32("context vectors");
    if (!std::isfinite(x)) throw FormatError("non-finite context value");
  }
  if (!rd.at_end()) throw FormatError("trailing bytes after prompt checkpoint");
  return ctx;
}

inline void save_prompt(const PromptContext& ctx, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_prompt(ctx, os);
}

inline PromptContext load_prompt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_prompt(is);
}

// ---- FOBT class tokens: "FOBT" | version u32 | M u32 | d u32 | has_mix u32 |
//      M*d f32 tokens | (d*d f32 mix if has_mix) ----

inline constexpr std::uint32_t kFobtVersion = 1;

inline void write_class_tokens(const ClassTokens& ct, std::ostream& os) {
  const bool has_mix = ct.mix != Matrix::identity(ct.dim());
  io::put_magic(os, "FOBT");
  io::put_u32(os, kFobtVersion);
  io::put_u32(os, static_cast<std::uint32_t>(ct.num_classes()));
  io::put_u32(os, static_cast<std::uint32_t>(ct.dim()));
  io::put_u32(os, has_mix ? 1u : 0u);
  for (double x : ct.tokens.data()) io::put_f32(os, static_cast<float>(x));
  if (has_mix)
    for (double x : ct.mix.data()) io::put_f32(os, static_cast<float>(x));
  if (!os) throw Error("I/O failure while writing class tokens");
}

inline ClassTokens read_class_tokens(std::istream& is) {
  io::Reader rd(is);
  if (rd.magic(4) != "FOBT") throw FormatError("bad magic");
  if (const auto v = rd.u32("version"); v != kFobtVersion)
    throw FormatError("unsupported version " + std::to_string(v));
  const std::uint32_t num_classes = rd.u32("M");
  const std::uint32_t dim = rd.u32("d");
  const std::uint32_t has_mix = rd.u32("has_mix");
  if (num_classes == 0 || dim == 0 || has_mix > 1) throw FormatError("bad class-token header");
  if (std::uint64_t{num_classes} * dim > (1ull << 28) || std::uint64_t{dim} * dim > (1ull << 28))
    throw FormatError("class-token file too large");
  ClassTokens ct{Matrix(num_classes, dim), Matrix::identity(dim)};
  for (double& x : ct.tokens.data()) x = rd.f32("tokens");
  if (has_mix)
    for (double& x : ct.mix.data()) x = rd.f32("mix");
  for (double x : ct.tokens.data())
    if (!std::isfinite(x)) throw FormatError("non-finite class token");
  if (!rd.at_end()) throw FormatError("trailing bytes after class tokens");
  return ct;
}

inline void save_class_tokens(const ClassTokens& ct, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_class_tokens(ct, os);
}

inline ClassTokens load_class_tokens(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_class_tokens(is);
}

}  // namespace fobor
