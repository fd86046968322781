#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fobor/binary_io.hpp"
#include "fobor/error.hpp"
#include "fobor/tensor.hpp"

namespace fobor {

enum class Split : std::uint32_t { id_train = 0, id_test = 1, ood_test = 2 };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::id_train: return "id_train";
    case Split::id_test: return "id_test";
    case Split::ood_test: return "ood_test";
  }
  return "?";
}

inline constexpr double kUnitNormTolerance = 1e-5;

/// One image: global feature f, per-patch features f^i, per-patch attention
/// queries and the global token's key. Features are unit-norm; queries and
/// keys are raw attention inputs.
struct EmbeddingRecord {
  std::vector<float> global_feature;
  std::vector<std::vector<float>> patch_features;
  std::vector<std::vector<float>> patch_queries;
  std::vector<float> global_key;
  std::optional<std::uint32_t> label;

  std::size_t num_patches() const noexcept { return patch_features.size(); }

  friend bool operator==(const EmbeddingRecord&, const EmbeddingRecord&) = default;
};

struct Dims {
  std::uint32_t num_classes = 0;  // M
  std::uint32_t feature_dim = 0;  // d
  std::uint32_t key_dim = 0;      // d_k
  std::uint32_t num_patches = 0;  // N

  friend bool operator==(const Dims&, const Dims&) = default;
};

struct EmbeddingDataset {
  std::vector<EmbeddingRecord> records;
  std::vector<std::string> class_names;
  Dims dims;
  Split split = Split::id_train;

  bool has_labels() const noexcept { return split != Split::ood_test; }

  friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;
};

struct Violation {
  std::optional<std::size_t> record;
  std::string message;

  std::string to_string() const {
    return record ? "record " + std::to_string(*record) + ": " + message : message;
  }
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
};

namespace detail {

template <class T>
bool all_finite(std::span<const T> v) {
  for (T x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool unit_norm(std::span<const float> v) {
  return std::abs(norm2(v) - 1.0) <= kUnitNormTolerance;
}

}  // namespace detail

/// Reports every invariant violation. Shape violations on a record suppress
/// the numeric checks for that record.
inline ValidationReport validate(const EmbeddingDataset& ds) {
  ValidationReport rep;
  auto add = [&](std::optional<std::size_t> r, std::string msg) {
    rep.violations.push_back({r, std::move(msg)});
  };
  const Dims& dm = ds.dims;
  if (dm.num_classes < 1) add(std::nullopt, "num_classes must be >= 1");
  if (dm.feature_dim < 1) add(std::nullopt, "feature_dim must be >= 1");
  if (dm.key_dim < 1) add(std::nullopt, "key_dim must be >= 1");
  if (dm.num_patches < 1) add(std::nullopt, "num_patches must be >= 1");
  if (ds.class_names.size() != dm.num_classes)
    add(std::nullopt, "class_names has " + std::to_string(ds.class_names.size()) +
                          " entries, expected " + std::to_string(dm.num_classes));

  for (std::size_t r = 0; r < ds.records.size(); ++r) {
    const EmbeddingRecord& rec = ds.records[r];
    bool shape_ok = rec.global_feature.size() == dm.feature_dim &&
                    rec.global_key.size() == dm.key_dim &&
                    rec.patch_features.size() == dm.num_patches &&
                    rec.patch_queries.size() == dm.num_patches;
    for (const auto& p : rec.patch_features) shape_ok = shape_ok && p.size() == dm.feature_dim;
    for (const auto& q : rec.patch_queries) shape_ok = shape_ok && q.size() == dm.key_dim;
    if (!shape_ok) {
      add(r, "shape mismatch with dataset dims (d=" + std::to_string(dm.feature_dim) +
                 ", d_k=" + std::to_string(dm.key_dim) + ", N=" + std::to_string(dm.num_patches) +
                 ")");
      continue;
    }

    if (ds.has_labels()) {
      if (!rec.label)
        add(r, "missing label in a labelled split");
      else if (*rec.label >= dm.num_classes)
        add(r, "label " + std::to_string(*rec.label) + " >= M=" + std::to_string(dm.num_classes));
    } else if (rec.label) {
      add(r, "OOD record carries a label");
    }

    bool finite = detail::all_finite<float>(rec.global_feature) &&
                  detail::all_finite<float>(rec.global_key);
    for (const auto& p : rec.patch_features) finite = finite && detail::all_finite<float>(p);
    for (const auto& q : rec.patch_queries) finite = finite && detail::all_finite<float>(q);
    if (!finite) {
      add(r, "non-finite value");
      continue;
    }

    if (!detail::unit_norm(rec.global_feature))
      add(r, "global_feature norm " + std::to_string(norm2<float>(rec.global_feature)) +
                 " violates unit norm");
    for (std::size_t i = 0; i < rec.patch_features.size(); ++i)
      if (!detail::unit_norm(rec.patch_features[i]))
        add(r, "patch_features[" + std::to_string(i) + "] norm " +
                   std::to_string(norm2<float>(rec.patch_features[i])) + " violates unit norm");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// FOBO binary format
//
//   "FOBO" | version u32 | flags u32 | M u32 | d u32 | d_k u32 | N u32 |
//   record_count u64 | M x (u32 length + UTF-8 bytes) | records
//   record: label i32 (-1 = none) | f: d f32 | patches: N*d f32 |
//           queries: N*d_k f32 | key: d_k f32
//
// flags bit0 = has_labels; bits 1-2 = split tag. All little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFoboVersion = 1;
inline constexpr std::uint32_t kFlagHasLabels = 1u;
inline constexpr std::uint32_t kSplitShift = 1;
inline constexpr std::uint32_t kSplitMask = 0x3u << kSplitShift;
inline constexpr std::size_t kFoboFixedHeaderBytes = 4 + 4 * 6 + 8;

inline std::size_t record_size_bytes(const Dims& d) {
  return 4 * (1 + std::size_t{d.feature_dim} + std::size_t{d.num_patches} * d.feature_dim +
              std::size_t{d.num_patches} * d.key_dim + d.key_dim);
}

inline std::size_t header_size_bytes(const EmbeddingDataset& ds) {
  std::size_t n = kFoboFixedHeaderBytes;
  for (const auto& name : ds.class_names) n += 4 + name.size();
  return n;
}

inline void write_dataset(const EmbeddingDataset& ds, std::ostream& os) {
  if (auto rep = validate(ds); !rep.ok())
    throw InvalidArgument("refusing to save invalid dataset: " + rep.violations.front().to_string());
  const std::uint32_t flags =
      (ds.has_labels() ? kFlagHasLabels : 0u) | (static_cast<std::uint32_t>(ds.split) << kSplitShift);
  io::put_magic(os, "FOBO");
  io::put_u32(os, kFoboVersion);
  io::put_u32(os, flags);
  io::put_u32(os, ds.dims.num_classes);
  io::put_u32(os, ds.dims.feature_dim);
  io::put_u32(os, ds.dims.key_dim);
  io::put_u32(os, ds.dims.num_patches);
  io::put_u64(os, ds.records.size());
  for (const auto& name : ds.class_names) {
    io::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (const auto& rec : ds.records) {
    io::put_i32(os, rec.label ? static_cast<std::int32_t>(*rec.label) : -1);
    io::put_f32s(os, rec.global_feature);
    for (const auto& p : rec.patch_features) io::put_f32s(os, p);
    for (const auto& q : rec.patch_queries) io::put_f32s(os, q);
    io::put_f32s(os, rec.global_key);
  }
  if (!os) throw Error("I/O failure while writing dataset");
}

inline void save_dataset(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_dataset(ds, os);
  os.close();
  if (!os) throw Error("I/O failure while writing " + path.string());
}

inline EmbeddingDataset read_dataset(std::istream& is) {
  io::Reader rd(is);
  if (rd.magic(4) != "FOBO") throw FormatError("bad magic");
  const std::uint32_t version = rd.u32("version");
  if (version != kFoboVersion)
    throw FormatError("unsupported version " + std::to_string(version));
  const std::uint32_t flags = rd.u32("flags");
  if ((flags & ~(kFlagHasLabels | kSplitMask)) != 0) throw FormatError("unknown flag bits");
  const std::uint32_t split_raw = (flags & kSplitMask) >> kSplitShift;
  if (split_raw > 2) throw FormatError("unknown split tag");

  EmbeddingDataset ds;
  ds.split = static_cast<Split>(split_raw);
  if (((flags & kFlagHasLabels) != 0) != ds.has_labels())
    throw FormatError("has_labels flag inconsistent with split tag");
  ds.dims.num_classes = rd.u32("M");
  ds.dims.feature_dim = rd.u32("d");
  ds.dims.key_dim = rd.u32("d_k");
  ds.dims.num_patches = rd.u32("N");
  const std::uint64_t count = rd.u64("record_count");

  // Class-name lengths are bounded so a corrupt header cannot trigger a huge allocation.
  constexpr std::uint32_t kMaxNameBytes = 1u << 16;
  ds.class_names.reserve(std::min<std::uint32_t>(ds.dims.num_classes, 1u << 20));
  for (std::uint32_t m = 0; m < ds.dims.num_classes; ++m) {
    const std::uint32_t len = rd.u32("class-name length");
    if (len > kMaxNameBytes) throw FormatError("class-name length out of range");
    std::string name(len, '\0');
    rd.bytes(name.data(), len, "class name");
    ds.class_names.push_back(std::move(name));
  }

  const Dims& dm = ds.dims;
  ds.records.reserve(std::min<std::uint64_t>(count, 1u << 16));
  for (std::uint64_t r = 0; r < count; ++r) {
    EmbeddingRecord rec;
    const std::int32_t label = rd.i32("label");
    if (label >= 0) rec.label = static_cast<std::uint32_t>(label);
    else if (label != -1) throw FormatError("record " + std::to_string(r) + ": bad label sentinel");
    rec.global_feature.resize(dm.feature_dim);
    rd.f32s(rec.global_feature, "global_feature");
    rec.patch_features.assign(dm.num_patches, std::vector<float>(dm.feature_dim));
    for (auto& p : rec.patch_features) rd.f32s(p, "patch_features");
    rec.patch_queries.assign(dm.num_patches, std::vector<float>(dm.key_dim));
    for (auto& q : rec.patch_queries) rd.f32s(q, "patch_queries");
    rec.global_key.resize(dm.key_dim);
    rd.f32s(rec.global_key, "global_key");
    ds.records.push_back(std::move(rec));
  }
  if (!rd.at_end()) throw FormatError("trailing bytes after last record");

  if (auto rep = validate(ds); !rep.ok()) {
    std::ostringstream msg;
    msg << "invalid dataset: " << rep.violations.front().to_string();
    if (rep.violations.size() > 1) msg << " (+" << rep.violations.size() - 1 << " more)";
    throw FormatError(msg.str());
  }
  return ds;
}

inline EmbeddingDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_dataset(is);
}

}  // namespace fobor
