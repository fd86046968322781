#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "fobor/error.hpp"
#include "fobor/fixture.hpp"
#include "fobor/trainer.hpp"

// Schema-versioned JSON configuration. Unknown keys are rejected; missing
// keys keep their defaults, and to_json echoes the fully resolved document.
namespace fobor {

inline constexpr int kConfigSchemaVersion = 1;

struct RunPaths {
  std::string data;
  std::string checkpoint;

  friend bool operator==(const RunPaths&, const RunPaths&) = default;
};

struct RunConfig {
  FixtureSpec fixture;
  TrainConfig train;
  RunPaths paths;
};

class ConfigError : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

namespace detail {

using nlohmann::json;

class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_arithmetic_v<T>) {
        if (!it->is_number()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (!it->is_number_unsigned()) throw ConfigError("");
        if constexpr (std::is_integral_v<T>)
          if (!it->is_number_integer()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("");
      }
      out = it->get<T>();
    } catch (const std::exception&) {
      throw ConfigError(where_ + "." + key + ": wrong type");
    }
  }

  template <class E>
  void get_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    for (const auto& [n, v] : names)
      if (s == n) {
        out = v;
        return;
      }
    throw ConfigError(where_ + "." + key + ": unknown value '" + s + "'");
  }

  void mark(const char* key) { seen_.insert(key); }
  const json* find(const char* key) const {
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const FixtureSpec& s) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : s.confusable_pairs) pairs.push_back({{"a", p.a}, {"b", p.b}, {"cosine", p.cosine}});
  return {{"num_classes", s.num_classes},
          {"feature_dim", s.feature_dim},
          {"key_dim", s.key_dim},
          {"num_patches", s.num_patches},
          {"images_per_class", s.images_per_class},
          {"test_images_per_class", s.test_images_per_class},
          {"ood_images", s.ood_images},
          {"ood_classes", s.ood_classes},
          {"fg_fraction", s.fg_fraction},
          {"bg_correlation", s.bg_correlation},
          {"confusable_pairs", pairs},
          {"noise_sigma", s.noise_sigma},
          {"text_context_coupling", s.text_context_coupling},
          {"text_bias", s.text_bias},
          {"text_noise", s.text_noise},
          {"attn_foreground", s.attn_foreground},
          {"attn_context", s.attn_context},
          {"attn_neutral", s.attn_neutral},
          {"attn_noise", s.attn_noise},
          {"seed", s.seed}};
}

inline FixtureSpec fixture_from_json(const nlohmann::json& j) {
  FixtureSpec s;
  detail::ObjectReader r(j, "fixture");
  r.get("num_classes", s.num_classes);
  r.get("feature_dim", s.feature_dim);
  r.get("key_dim", s.key_dim);
  r.get("num_patches", s.num_patches);
  r.get("images_per_class", s.images_per_class);
  r.get("test_images_per_class", s.test_images_per_class);
  r.get("ood_images", s.ood_images);
  r.get("ood_classes", s.ood_classes);
  r.get("fg_fraction", s.fg_fraction);
  r.get("bg_correlation", s.bg_correlation);
  r.mark("confusable_pairs");
  if (const auto* pairs = r.find("confusable_pairs")) {
    if (!pairs->is_array()) throw ConfigError("fixture.confusable_pairs: expected an array");
    s.confusable_pairs.clear();
    for (const auto& pj : *pairs) {
      ConfusablePair p;
      detail::ObjectReader pr(pj, "fixture.confusable_pairs[]");
      pr.get("a", p.a);
      pr.get("b", p.b);
      pr.get("cosine", p.cosine);
      pr.finish();
      s.confusable_pairs.push_back(p);
    }
  }
  r.get("noise_sigma", s.noise_sigma);
  r.get("text_context_coupling", s.text_context_coupling);
  r.get("text_bias", s.text_bias);
  r.get("text_noise", s.text_noise);
  r.get("attn_foreground", s.attn_foreground);
  r.get("attn_context", s.attn_context);
  r.get("attn_neutral", s.attn_neutral);
  r.get("attn_noise", s.attn_noise);
  r.get("seed", s.seed);
  r.finish();
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},
          {"beta", c.beta},
          {"eta", c.eta},
          {"kappa", c.kappa},
          {"lambda", c.lambda},
          {"n_class", c.n_class},
          {"n_patch", c.n_patch},
          {"tau", c.tau},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"use_abs", c.use_abs},
          {"use_cfr", c.use_cfr},
          {"bg_loss_mode", c.bg_loss_mode == BgLossMode::uniform ? "uniform" : "weighted"},
          {"patch_reduce", c.patch_reduce == PatchReduce::max ? "max" : "mean"},
          {"pair_mode", c.pair_mode == PairMode::raw ? "raw" : "renormalized"},
          {"context_length", c.context_length},
          {"init_sigma", c.init_sigma}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig c;
  detail::ObjectReader r(j, "train");
  r.get("alpha", c.alpha);
  r.get("beta", c.beta);
  r.get("eta", c.eta);
  r.get("kappa", c.kappa);
  r.get("lambda", c.lambda);
  r.get("n_class", c.n_class);
  r.get("n_patch", c.n_patch);
  r.get("tau", c.tau);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("steps", c.steps);
  r.get("batch_size", c.batch_size);
  r.get("seed", c.seed);
  r.get("use_abs", c.use_abs);
  r.get("use_cfr", c.use_cfr);
  r.get_enum("bg_loss_mode", c.bg_loss_mode,
             {{"uniform", BgLossMode::uniform}, {"weighted", BgLossMode::weighted}});
  r.get_enum("patch_reduce", c.patch_reduce, {{"max", PatchReduce::max}, {"mean", PatchReduce::mean}});
  r.get_enum("pair_mode", c.pair_mode, {{"raw", PairMode::raw}, {"renormalized", PairMode::renormalized}});
  r.get("context_length", c.context_length);
  r.get("init_sigma", c.init_sigma);
  r.finish();
  return c;
}

inline nlohmann::json to_json(const RunConfig& rc) {
  return {{"schema_version", kConfigSchemaVersion},
          {"fixture", to_json(rc.fixture)},
          {"train", to_json(rc.train)},
          {"paths", {{"data", rc.paths.data}, {"checkpoint", rc.paths.checkpoint}}}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig rc;
  detail::ObjectReader r(j, "config");
  int version = kConfigSchemaVersion;
  r.get("schema_version", version);
  if (version != kConfigSchemaVersion)
    throw ConfigError("config: unsupported schema_version " + std::to_string(version));
  r.mark("fixture");
  r.mark("train");
  r.mark("paths");
  if (const auto* f = r.find("fixture")) rc.fixture = fixture_from_json(*f);
  if (const auto* t = r.find("train")) rc.train = train_from_json(*t);
  if (const auto* p = r.find("paths")) {
    detail::ObjectReader pr(*p, "paths");
    pr.get("data", rc.paths.data);
    pr.get("checkpoint", rc.paths.checkpoint);
    pr.finish();
  }
  r.finish();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace fobor
